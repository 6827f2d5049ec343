import numpy as np
import pytest

from localpgm import (
    CliqueVector,
    Dataset,
    Domain,
    Factor,
    GbpConfig,
    StepSizeTooLargeError,
    UnsupportedCliqueError,
    build_factor_graph,
    build_saturated,
    check_local_consistency,
    dataset_project,
)
from localpgm.estimation import (
    FittedModel,
    Measurement,
    ProxConfig,
    default_step_size,
    l2_loss,
    load_measurements,
    prox_pgm,
    save_measurements,
)

from oracles import finite_difference

DOM = Domain(("a", "b", "c", "d"), (3, 2, 3, 2))


def dataset(m=400, seed=0, dom=DOM):
    rng = np.random.default_rng(seed)
    # correlated columns so marginals are not products
    base = rng.integers(0, 6, m)
    cols = [(base + rng.integers(0, 2, m)) % n for n in dom.sizes]
    return Dataset(dom, np.column_stack(cols))


def noisy(X, cliques, sigma, seed=1):
    rng = np.random.default_rng(seed)
    out = []
    for c in cliques:
        mu = dataset_project(X, c).flat
        out.append(Measurement(c, mu + rng.normal(0, sigma, mu.size), sigma))
    return out


def test_l2_loss_examples():
    dom = Domain.uniform(1, 2)
    loss = l2_loss([Measurement((0,), [0.3, 0.7], 1.0)], dom)
    tau = CliqueVector([Factor((0,), np.array([0.5, 0.5]))])
    assert loss.value(tau) == pytest.approx(0.08)
    assert np.allclose(loss.gradient(tau)[(0,)].flat, [0.4, -0.4])
    at_y = CliqueVector([Factor((0,), np.array([0.3, 0.7]))])
    assert loss.value(at_y) == 0.0 and np.all(loss.gradient(at_y)[(0,)].flat == 0)


def test_gradient_matches_finite_differences(rng):
    meas = [
        Measurement((0, 1), rng.normal(size=4), 0.7, rng.normal(size=(4, 6))),
        Measurement((0, 1), rng.normal(size=6), 1.3),
        Measurement((2,), rng.normal(size=2), 0.5, rng.normal(size=(2, 3))),
    ]
    loss = l2_loss(meas, DOM)
    tau = {c: rng.dirichlet(np.ones(DOM.size(c))) for c in loss.cliques}

    def vec(t):
        return CliqueVector(Factor.from_flat(DOM, c, v) for c, v in t.items())

    grad = loss.gradient(vec(tau))
    for c in loss.cliques:
        def f(x, c=c):
            return loss.value(vec({**tau, c: x}))
        assert np.max(np.abs(finite_difference(f, tau[c]) - grad[c].flat)) <= 1e-6


def test_lipschitz_and_default_step(rng):
    dom = Domain.uniform(3, 2)
    one = l2_loss([Measurement((0,), [0.5, 0.5], 1.0)], dom)
    assert one.lipschitz == pytest.approx(2.0) and default_step_size(one) == pytest.approx(1.0)
    two = l2_loss([Measurement((0,), [0.5, 0.5], 1.0), Measurement((1,), [0.5, 0.5], 1.0)], dom)
    assert two.lipschitz == pytest.approx(2.0) and default_step_size(two) == pytest.approx(1.0)
    Q = rng.normal(size=(5, 4))
    q = l2_loss([Measurement((0, 1), np.zeros(5), 0.5, Q)], dom)
    assert q.lipschitz == pytest.approx(2 / 0.25 * np.linalg.eigvalsh(Q.T @ Q).max(), rel=1e-5)


def test_measurement_validation():
    with pytest.raises(ValueError):
        Measurement((0,), [0.5, 0.5], 0.0)
    with pytest.raises(ValueError):
        Measurement((0,), [0.5, 0.5], 1.0, np.ones((3, 3)))
    with pytest.raises(ValueError):
        l2_loss([Measurement((0,), [0.5, 0.5, 0.0, 0.0], 1.0)], DOM)


def test_noiseless_recovery_on_saturated_graph():
    X = dataset()
    cliques = [(0, 1), (1, 2), (2, 3), (0, 3)]
    meas = [Measurement(c, dataset_project(X, c).flat, 1.0) for c in cliques]
    G = build_saturated(DOM, cliques)
    model = prox_pgm(l2_loss(meas, DOM), G, "convex_gbp", ProxConfig(outer_iters=20000))
    for c in cliques:
        assert np.max(np.abs(model.tau[c].flat - dataset_project(X, c).flat)) <= 1e-4
    assert check_local_consistency(model.tau, G, 1e-6).feasible


def test_loss_non_increasing_with_converged_inner_loop():
    X = dataset(seed=3)
    cliques = [(0, 1), (1, 2), (0, 2)]
    loss = l2_loss(noisy(X, cliques, 0.05), DOM)
    G = build_saturated(DOM, cliques)
    for oracle in ("exact", "convex_gbp"):
        cfg = ProxConfig(outer_iters=300, inner_gbp_iters=500, gbp=GbpConfig(convergence_tol=1e-12),
                         line_search=False)
        trace = prox_pgm(loss, G, oracle, cfg).loss_trace
        assert np.all(np.diff(trace) <= 1e-9 * trace[0])


def test_first_order_optimality_certificate(rng):
    X = dataset(seed=5)
    cliques = [(0, 1), (1, 2), (0, 2)]
    loss = l2_loss(noisy(X, cliques, 0.05), DOM)
    G = build_saturated(DOM, cliques)
    model = prox_pgm(loss, G, "convex_gbp", ProxConfig(outer_iters=20000))
    grad = loss.gradient(model.tau.restrict(loss.cliques))
    for _ in range(100):
        m = int(rng.integers(5, 300))
        Y = Dataset(DOM, np.column_stack([rng.integers(0, n, m) for n in DOM.sizes]))
        d = sum(float(grad[c].flat @ (dataset_project(Y, c).flat - model.tau[c].flat)) for c in loss.cliques)
        assert d >= -1e-4


def test_oracle_swap_on_tree():
    X = dataset(seed=7)
    cliques = [(0, 1), (1, 2), (1, 3)]
    loss = l2_loss(noisy(X, cliques, 0.05), DOM)
    G = build_saturated(DOM, cliques)
    a = prox_pgm(loss, G, "exact", ProxConfig(outer_iters=20000))
    b = prox_pgm(loss, G, "convex_gbp", ProxConfig(outer_iters=20000))
    assert a.tau.max_abs_diff(b.tau) <= 1e-4


def test_sub_clique_measurement_lifted():
    X = dataset(seed=2)
    meas = [Measurement((0, 1), dataset_project(X, (0, 1)).flat, 1.0),
            Measurement((2,), dataset_project(X, (2,)).flat, 1.0)]
    G = build_saturated(DOM, [(0, 1), (1, 2)])
    model = prox_pgm(l2_loss(meas, DOM), G, "convex_gbp", ProxConfig(outer_iters=20000))
    from localpgm import factor_marginalize
    assert np.allclose(factor_marginalize(model.tau[(1, 2)], (2,)).flat, dataset_project(X, (2,)).flat, atol=1e-4)


def test_unsupported_clique():
    loss = l2_loss([Measurement((0, 2), np.full(9, 1 / 9), 1.0)], DOM)
    with pytest.raises(UnsupportedCliqueError):
        prox_pgm(loss, build_factor_graph(DOM, [(0, 1), (1, 2)]))


def test_divergence_guard():
    X = dataset(seed=4)
    cliques = [(0, 1), (1, 2), (0, 2)]
    loss = l2_loss(noisy(X, cliques, 0.05), DOM)
    with pytest.raises(StepSizeTooLargeError):
        prox_pgm(loss, build_saturated(DOM, cliques), "exact",
                 ProxConfig(step_size=1e3 / loss.lipschitz, line_search=False))


def test_line_search_recovers_from_large_step():
    X = dataset(seed=4)
    cliques = [(0, 1), (1, 2), (0, 2)]
    loss = l2_loss(noisy(X, cliques, 0.05), DOM)
    G = build_saturated(DOM, cliques)
    big = prox_pgm(loss, G, "exact", ProxConfig(outer_iters=3000, step_size=1e3 / loss.lipschitz))
    assert np.all(np.diff(big.loss_trace) <= 0)
    ref = prox_pgm(loss, G, "exact", ProxConfig(outer_iters=3000, line_search=False))
    assert big.tau.max_abs_diff(ref.tau) <= 1e-4


def test_model_and_measurement_files(tmp_path):
    X = dataset(seed=8)
    cliques = [(0, 1), (1, 2)]
    meas = noisy(X, cliques, 0.1) + [Measurement((3,), [0.1, 0.2, 0.3], 0.2, np.ones((3, 2)))]
    save_measurements(meas, DOM, tmp_path / "m.json")
    back = load_measurements(tmp_path / "m.json", DOM)
    for a, b in zip(meas, back):
        assert a.clique == b.clique and np.array_equal(a.y, b.y) and a.noise_scale == b.noise_scale
    model = prox_pgm(l2_loss(back, DOM), build_saturated(DOM, cliques + [(3,)]), "convex_gbp",
                     ProxConfig(outer_iters=50))
    model.save(tmp_path / "model.json")
    again = FittedModel.load(tmp_path / "model.json")
    assert again.tau.max_abs_diff(model.tau) == 0.0
    assert again.theta.max_abs_diff(model.theta) == 0.0
    assert np.array_equal(again.loss_trace, model.loss_trace)
    assert all(np.array_equal(again.messages.lam[e], model.messages.lam[e]) for e in model.graph.edges)

"""Prox-PGM: mirror descent on clique parameters with a marginal oracle in the loop."""
from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol

import numpy as np

from .errors import StepSizeTooLargeError, UnsupportedCliqueError
from .factors import (
    FULL_TABLE_LIMIT,
    Clique,
    CliqueVector,
    Domain,
    Factor,
    broadcast_shape,
    factor_marginalize,
)
from .inference import GbpConfig, MessageState, convex_gbp, exact_oracle
from .region_graph import RegionGraph, check_local_consistency

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0
OUTER_TOL = 1e-7
MIN_STEP = 1e-12
LINE_SEARCH_GROWTH = 1.25


@dataclass(frozen=True, eq=False)
class Measurement:
    clique: Clique
    y: np.ndarray
    noise_scale: float = 1.0
    query: Optional[np.ndarray] = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64).ravel()
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "clique", tuple(self.clique))
        if not self.noise_scale > 0:
            raise ValueError("noise_scale must be positive")
        if self.query is not None:
            q = np.atleast_2d(np.asarray(self.query, dtype=np.float64))
            if q.shape[0] != y.size:
                raise ValueError(f"query has {q.shape[0]} rows but y has {y.size} entries")
            object.__setattr__(self, "query", q)

    def check(self, domain: Domain) -> None:
        domain.check(self.clique)
        n_r = domain.size(self.clique)
        cols = n_r if self.query is None else self.query.shape[1]
        if cols != n_r:
            raise ValueError(f"query on {self.clique} needs {n_r} columns, got {cols}")
        if self.query is None and self.y.size != n_r:
            raise ValueError(f"identity measurement on {self.clique} needs {n_r} answers")

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x if self.query is None else self.query @ x

    def adjoint(self, v: np.ndarray) -> np.ndarray:
        return v if self.query is None else self.query.T @ v


def _largest_eig(q: Optional[np.ndarray], n: int, rtol: float = 1e-6, max_iters: int = 10_000) -> float:
    """Largest eigenvalue of Q^T Q by power iteration (1 for the identity)."""
    if q is None:
        return 1.0
    x = np.linspace(1.0, 2.0, n)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iters):
        z = q.T @ (q @ x)
        nz = np.linalg.norm(z)
        if nz == 0.0:
            return 0.0
        new = float(x @ z)
        x = z / nz
        if abs(new - lam) <= rtol * abs(new):
            return new
        lam = new
    return lam


class LossFunction:
    """Weighted least squares over measured cliques.

    ``value`` and ``gradient`` take marginals keyed by measured clique (extra
    cliques are ignored); gradients have one factor per measured clique.
    """

    def __init__(self, measurements: list[Measurement], domain: Domain):
        if not measurements:
            raise ValueError("at least one measurement is required")
        for meas in measurements:
            meas.check(domain)
        self.measurements = list(measurements)
        self.domain = domain
        self.cliques: list[Clique] = sorted({m.clique for m in measurements})
        per_clique = defaultdict(float)
        for meas in measurements:
            n = domain.size(meas.clique)
            per_clique[meas.clique] += 2.0 / meas.noise_scale**2 * _largest_eig(meas.query, n)
        self.clique_lipschitz = dict(per_clique)
        self.lipschitz = max(per_clique.values())

    def value(self, tau: CliqueVector) -> float:
        total = 0.0
        for meas in self.measurements:
            resid = meas.apply(tau[meas.clique].flat) - meas.y
            total += float(resid @ resid) / meas.noise_scale**2
        return total

    def gradient(self, tau: CliqueVector) -> CliqueVector:
        acc = {c: np.zeros(self.domain.size(c)) for c in self.cliques}
        for meas in self.measurements:
            resid = meas.apply(tau[meas.clique].flat) - meas.y
            acc[meas.clique] += 2.0 / meas.noise_scale**2 * meas.adjoint(resid)
        return CliqueVector(Factor.from_flat(self.domain, c, g) for c, g in acc.items())


def l2_loss(measurements: list[Measurement], domain: Domain) -> LossFunction:
    return LossFunction(measurements, domain)


def default_step_size(loss: LossFunction) -> float:
    if not loss.lipschitz > 0:
        raise ValueError("loss has no positive Lipschitz bound")
    return 2.0 / loss.lipschitz


@dataclass
class ProxConfig:
    outer_iters: int = 1000
    step_size: Optional[float] = None
    inner_gbp_iters: int = 1
    warm_start: bool = True
    gbp: GbpConfig = field(default_factory=GbpConfig)
    tol: float = OUTER_TOL
    # on a stall with tau still outside the local polytope, double the inner sweeps
    adaptive_inner: bool = True
    consistency_tol: float = 1e-6
    # backtracking on the loss; None means on for oracles that are exact
    line_search: Optional[bool] = None

    def __post_init__(self):
        if self.outer_iters < 1 or self.inner_gbp_iters < 1:
            raise ValueError("iteration counts must be positive")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")


class MarginalOracle(Protocol):
    name: str

    def __call__(self, theta: CliqueVector, warm: Optional[MessageState]) -> tuple[CliqueVector, Optional[MessageState]]:
        ...


class GbpOracle:
    name = "convex_gbp"

    def __init__(self, graph: RegionGraph, config: GbpConfig):
        self.graph = graph
        self.config = config

    def __call__(self, theta, warm):
        return convex_gbp(self.graph, theta, self.config, warm)


class ExactOracle:
    name = "exact"

    def __init__(self, graph: RegionGraph, limit: int = FULL_TABLE_LIMIT):
        self.graph = graph
        self.limit = limit

    def __call__(self, theta, warm):
        return exact_oracle(theta, self.graph.domain, self.graph.vertices, self.limit), None


def make_oracle(kind: str, graph: RegionGraph, config: ProxConfig) -> MarginalOracle:
    if kind == "exact":
        return ExactOracle(graph)
    if kind == "convex_gbp":
        gbp = GbpConfig(config.inner_gbp_iters, config.gbp.damping, config.gbp.convergence_tol)
        return GbpOracle(graph, gbp)
    raise ValueError(f"unknown oracle {kind!r}")


@dataclass
class FittedModel:
    graph: RegionGraph
    tau: CliqueVector
    theta: CliqueVector
    messages: Optional[MessageState]
    loss_trace: np.ndarray
    oracle: str = "convex_gbp"

    @property
    def domain(self) -> Domain:
        return self.graph.domain

    def to_json(self) -> dict:
        g = self.graph
        names = g.domain.attr_names
        out = {
            "domain": g.domain.to_json(),
            "oracle": self.oracle,
            "graph": {k: v for k, v in g.to_json().items() if k != "kappa"},
            "kappa": [[names(v), g.kappa[v]] for v in g.vertices],
            "theta": [[names(c), self.theta[c].flat.tolist()] for c in self.theta],
            "tau": [[names(c), self.tau[c].flat.tolist()] for c in self.tau],
            "loss_trace": [float(x) for x in self.loss_trace],
        }
        if self.messages is not None:
            out["messages"] = {
                "m": [[names(r), names(t), a.ravel().tolist()] for (r, t), a in self.messages.m.items()],
                "lam": [[names(r), names(t), a.ravel().tolist()] for (r, t), a in self.messages.lam.items()],
                "sweeps": self.messages.sweeps,
            }
        return out

    @classmethod
    def from_json(cls, obj: dict) -> FittedModel:
        domain = Domain.from_json(obj["domain"])
        graph = RegionGraph.from_json({**obj["graph"], "kappa": obj.get("kappa", [])}, domain)

        def vec(rows):
            return CliqueVector(Factor.from_flat(domain, domain.clique(c), v) for c, v in rows)

        messages = None
        if "messages" in obj:
            from .inference import kappa_ratios

            def arrays(rows):
                return {
                    (domain.clique(r), domain.clique(t)): np.asarray(v, dtype=np.float64).reshape(domain.shape(domain.clique(t)))
                    for r, t, v in rows
                }

            msg = obj["messages"]
            messages = MessageState(arrays(msg["m"]), arrays(msg["lam"]), kappa_ratios(graph), msg.get("sweeps", 0))
        return cls(graph, vec(obj["tau"]), vec(obj["theta"]), messages,
                   np.asarray(obj["loss_trace"], dtype=np.float64), obj.get("oracle", "convex_gbp"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> FittedModel:
        return cls.from_json(json.loads(Path(path).read_text()))


def lifting_map(graph: RegionGraph, cliques) -> dict[Clique, Clique]:
    """Measured clique -> smallest containing vertex."""
    out = {}
    for c in cliques:
        v = graph.containing_vertex(c)
        if v is None:
            raise UnsupportedCliqueError(f"clique {c} is not contained in any vertex")
        out[c] = v
    return out


def project_to(tau: CliqueVector, lift: dict[Clique, Clique]) -> CliqueVector:
    return CliqueVector(
        tau[v] if c == v else factor_marginalize(tau[v], c) for c, v in lift.items()
    )


def lift_gradient(grad: CliqueVector, lift: dict[Clique, Clique], graph: RegionGraph) -> dict[Clique, np.ndarray]:
    """Pull clique gradients back onto their host vertices (adjoint of marginalization)."""
    shape = graph.domain.shape
    out: dict[Clique, np.ndarray] = {}
    for c in grad:
        v = lift[c]
        g = grad[c].values.reshape(broadcast_shape(v, c, grad[c].values.shape))
        out[v] = out.get(v, np.zeros(shape(v))) + g
    return out


def _escalate(oracle: MarginalOracle, tau: CliqueVector, config: ProxConfig) -> bool:
    """Warm-started messages trail a drifting theta; give them more sweeps when
    the outer loop stalls at a point that is not yet locally consistent."""
    if not isinstance(oracle, GbpOracle):
        return False
    cfg = oracle.config
    if cfg.max_iters >= config.gbp.max_iters:
        return False
    if check_local_consistency(tau, oracle.graph, config.consistency_tol).feasible:
        return False
    new_iters = min(2 * cfg.max_iters, config.gbp.max_iters)
    log.debug("raising inner sweeps from %d to %d", cfg.max_iters, new_iters)
    oracle.config = GbpConfig(new_iters, cfg.damping, cfg.convergence_tol)
    return True


def prox_pgm(
    loss: LossFunction,
    graph: RegionGraph,
    oracle: str | MarginalOracle = "convex_gbp",
    config: ProxConfig | None = None,
) -> FittedModel:
    """Minimize ``loss`` over the local polytope of ``graph`` (or the marginal
    polytope with the exact oracle) by mirror descent in parameter space."""
    config = config or ProxConfig()
    lift = lifting_map(graph, loss.cliques)
    if isinstance(oracle, str):
        oracle = make_oracle(oracle, graph, config)
    step = config.step_size if config.step_size is not None else default_step_size(loss)

    theta = {v: np.zeros(graph.domain.shape(v)) for v in graph.vertices}

    def as_vector(th):
        return CliqueVector(Factor(v, a) for v, a in th.items())

    tau, state = oracle(as_vector(theta), None)
    initial = loss.value(project_to(tau, lift))
    guard = DIVERGENCE_FACTOR * initial + 1e-12
    search = config.line_search if config.line_search is not None else oracle.name == "exact"
    value = initial
    trace = []
    for it in range(config.outer_iters):
        grad = lift_gradient(loss.gradient(project_to(tau, lift)), lift, graph)
        warm = state if config.warm_start else None
        while True:
            trial = dict(theta)
            for v, g in grad.items():
                trial[v] = theta[v] - step * g
            new_tau, new_state = oracle(as_vector(trial), warm)
            new_value = loss.value(project_to(new_tau, lift))
            if not search or new_value <= value or step < MIN_STEP:
                break
            step /= 2
        if search:
            step *= LINE_SEARCH_GROWTH
        theta, state, value = trial, new_state, new_value
        trace.append(value)
        if not np.isfinite(value) or value > guard:
            raise StepSizeTooLargeError(
                f"loss {value:.4g} exceeded {DIVERGENCE_FACTOR:g}x its initial value {initial:.4g} "
                f"at iteration {it}; lower the step size"
            )
        delta = new_tau.max_abs_diff(tau)
        tau = new_tau
        if delta < config.tol:
            if config.adaptive_inner and _escalate(oracle, tau, config):
                continue
            log.debug("prox-pgm converged after %d iterations", it + 1)
            break
    return FittedModel(graph, tau, as_vector(theta), state, np.asarray(trace), oracle.name)


def measurements_to_json(measurements: list[Measurement], domain: Domain) -> list[dict]:
    out = []
    for meas in measurements:
        row = {"clique": domain.attr_names(meas.clique)}
        if meas.query is not None:
            row["query"] = meas.query.tolist()
        row["y"] = meas.y.tolist()
        row["noise_scale"] = meas.noise_scale
        out.append(row)
    return out


def measurements_from_json(rows: list[dict], domain: Domain) -> list[Measurement]:
    out = []
    for row in rows:
        meas = Measurement(domain.clique(row["clique"]), row["y"], float(row["noise_scale"]), row.get("query"))
        meas.check(domain)
        out.append(meas)
    return out


def save_measurements(measurements: list[Measurement], domain: Domain, path: str | Path) -> None:
    Path(path).write_text(json.dumps(measurements_to_json(measurements, domain), indent=1) + "\n")


def load_measurements(path: str | Path, domain: Domain) -> list[Measurement]:
    return measurements_from_json(json.loads(Path(path).read_text()), domain)

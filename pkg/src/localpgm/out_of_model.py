"""Marginals on cliques that no region-graph vertex contains.

The query marginal is the maximum-entropy point among minimizers of the summed
squared disagreement with every model vertex it overlaps.  Entropic mirror
descent started from the uniform distribution finds it: its iterates keep
``log tau`` in the span of the overlap indicators.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .estimation import FittedModel
from .factors import (
    Clique,
    CliqueVector,
    Dataset,
    Domain,
    Factor,
    broadcast_shape,
    dataset_project,
    factor_marginalize,
    make_clique,
)
from .inference import full_log_table


@dataclass(frozen=True)
class OomConfig:
    max_iters: int = 5000
    grad_tol: float = 1e-8
    initial_step: float = 1.0
    armijo: float = 1e-4
    min_step: float = 1e-20

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.grad_tol < 0:
            raise ValueError("grad_tol must be nonnegative")


@dataclass
class OomResult:
    tau: Factor
    value: float
    iterations: int
    trace: list[float]


class _Violation:
    """Sum over overlapping vertices u of ||P_{r->s} tau_r - P_{u->s} tau_u||^2, s = u & r.

    Terms sharing the same s are merged: sum_u ||x - t_u||^2 = k ||x - mean||^2 + const.
    """

    def __init__(self, model_tau: CliqueVector, r: Clique):
        self.r = r
        groups: dict[Clique, list[np.ndarray]] = {}
        for u in model_tau:
            s = tuple(a for a in u if a in set(r))
            if not s:
                continue
            groups.setdefault(s, []).append(factor_marginalize(model_tau[u], s).values)
        self.terms = []
        for s, targets in sorted(groups.items()):
            stack = np.stack(targets)
            mean = stack.mean(axis=0)
            const = float(np.sum((stack - mean) ** 2))
            axes = tuple(i for i, a in enumerate(r) if a not in set(s))
            self.terms.append((s, axes, len(targets), mean, const))

    def __call__(self, tau: np.ndarray) -> tuple[float, np.ndarray]:
        value = 0.0
        grad = np.zeros_like(tau)
        for s, axes, k, mean, const in self.terms:
            proj = tau.sum(axis=axes) if axes else tau
            resid = proj - mean
            value += k * float(np.sum(resid**2)) + const
            grad += (2.0 * k * resid).reshape(broadcast_shape(self.r, s, resid.shape))
        return value, grad


def violation_objective(tau_r: Factor, model_tau: CliqueVector, r: Clique) -> tuple[float, Factor]:
    value, grad = _Violation(model_tau, r)(tau_r.values)
    return value, Factor(r, grad)


def _mirror_step(tau: np.ndarray, grad: np.ndarray, step: float) -> np.ndarray:
    z = -step * grad
    z = np.exp(z - z.max()) * tau
    return z / z.sum()


def solve_out_of_model(model_tau: CliqueVector, r: Clique, domain: Domain,
                       config: OomConfig | None = None) -> OomResult:
    """Entropic mirror descent with backtracking, from the uniform distribution."""
    config = config or OomConfig()
    r = make_clique(r)
    domain.check(r)
    objective = _Violation(model_tau, r)
    shape = domain.shape(r)
    tau = np.full(shape, 1.0 / domain.size(r))
    value, grad = objective(tau)
    trace = [value]
    it = 0
    for it in range(1, config.max_iters + 1):
        if np.linalg.norm((tau - _mirror_step(tau, grad, 1.0)).ravel()) <= config.grad_tol:
            break
        centered = grad - np.sum(tau * grad)
        local_sq = float(np.sum(tau * centered**2))
        step = config.initial_step
        while step >= config.min_step:
            cand = _mirror_step(tau, grad, step)
            cand_value, cand_grad = objective(cand)
            if cand_value <= value - config.armijo * step * local_sq:
                break
            step /= 2
        else:
            break
        tau, value, grad = cand, cand_value, cand_grad
        trace.append(value)
    return OomResult(Factor(r, tau), value, it, trace)


def _table_marginal(logp: np.ndarray, r: Clique, domain: Domain) -> Factor:
    axes = tuple(i for i in range(domain.d) if i not in set(r))
    p = np.exp(logp)
    return Factor(r, p.sum(axis=axes) if axes else p)


def infer_marginal(model: FittedModel, r, config: OomConfig | None = None,
                   log_table: Optional[np.ndarray] = None) -> Factor:
    """Marginal of the fitted model on ``r``.

    In-model cliques read off the smallest containing vertex.  Exact-oracle
    models hold a full distribution, so other cliques come from it directly;
    everything else goes through the entropic solver.
    """
    domain = model.domain
    r = domain.check(make_clique(r))
    host = model.graph.containing_vertex(r)
    if host is not None:
        return factor_marginalize(model.tau[host], r)
    if model.oracle == "exact":
        if log_table is None:
            log_table = full_log_table(model.theta, domain)
        return _table_marginal(log_table, r, domain)
    return solve_out_of_model(model.tau, r, domain, config).tau


def l1_error(a: Factor, b: Factor) -> float:
    return float(np.sum(np.abs(a.values - b.values)))


def evaluate_marginals(model: FittedModel, truth: Dataset, cliques, config: OomConfig | None = None,
                       workers: int = 1) -> dict[Clique, float]:
    """L1 distance between model and dataset marginals, per clique."""
    cliques = [truth.domain.check(make_clique(c)) for c in cliques]
    table = None
    if model.oracle == "exact" and any(model.graph.containing_vertex(c) is None for c in cliques):
        table = full_log_table(model.theta, model.domain)

    def one(c):
        return l1_error(infer_marginal(model, c, config, table), dataset_project(truth, c))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            errors = list(pool.map(one, cliques))
    else:
        errors = [one(c) for c in cliques]
    return dict(zip(cliques, errors))

"""Marginal oracles: convex generalized belief propagation and brute-force inference.

Messages live in log space.  For an edge ``r -> t`` (parent ``r``, child ``t``)
the state keeps ``m[r, t]`` (the parent-to-child message) and ``lam[r, t]``
(the child-to-parent message), both arrays over the sub-domain of ``t``.
Beliefs are

    tau_r  ∝  exp((theta_r + sum_{c child of r} lam[r, c] - sum_{p parent of r} lam[p, r]) / kappa_r)
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidCountingNumbersError
from .factors import (
    FULL_TABLE_LIMIT,
    Clique,
    CliqueVector,
    Domain,
    Factor,
    broadcast_shape,
    check_table_size,
    factor_entropy,
    logsumexp,
)
from .region_graph import Edge, RegionGraph


@dataclass
class GbpConfig:
    max_iters: int = 1000
    # None picks 0 on tree-shaped graphs and 0.5 otherwise
    damping: Optional[float] = None
    convergence_tol: float = 1e-8

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.damping is not None and not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be nonnegative")

    def resolved_damping(self, graph: RegionGraph) -> float:
        if self.damping is not None:
            return self.damping
        return 0.0 if graph.is_tree() else 0.5


@dataclass
class MessageState:
    m: dict[Edge, np.ndarray]
    lam: dict[Edge, np.ndarray]
    kappa_ratios: dict[Edge, float]
    sweeps: int = 0
    last_delta: float = float("inf")

    @classmethod
    def initial(cls, graph: RegionGraph) -> MessageState:
        _check_kappa(graph)
        shape = graph.domain.shape
        return cls(
            m={e: np.zeros(shape(e[1])) for e in graph.edges},
            lam={e: np.zeros(shape(e[1])) for e in graph.edges},
            kappa_ratios=kappa_ratios(graph),
        )

    def copy(self) -> MessageState:
        return MessageState(
            {e: a.copy() for e, a in self.m.items()},
            {e: a.copy() for e, a in self.lam.items()},
            dict(self.kappa_ratios),
            self.sweeps,
            self.last_delta,
        )


def _check_kappa(graph: RegionGraph) -> None:
    if any(not k > 0 for k in graph.kappa.values()):
        raise InvalidCountingNumbersError("Convex-GBP requires positive counting numbers")


def kappa_ratios(graph: RegionGraph) -> dict[Edge, float]:
    """kappa_r / (kappa_t + sum of kappa over all parents of t), per edge r -> t."""
    k = graph.kappa
    denom = {t: k[t] + sum(k[p] for p in graph.parents[t]) for t in graph.vertices}
    return {(r, t): k[r] / denom[t] for r, t in graph.edges}


@dataclass
class _Plan:
    shapes: dict[Clique, tuple[int, ...]]
    sum_axes: dict[Edge, tuple[int, ...]]
    bshape: dict[Edge, tuple[int, ...]]
    children: dict[Clique, list[Clique]]
    parents: dict[Clique, list[Clique]]


_plans: "weakref.WeakKeyDictionary[RegionGraph, _Plan]" = weakref.WeakKeyDictionary()


def _plan(graph: RegionGraph) -> _Plan:
    plan = _plans.get(graph)
    if plan is None:
        shapes = {v: graph.domain.shape(v) for v in graph.vertices}
        sum_axes, bshape = {}, {}
        for r, t in graph.edges:
            ts = set(t)
            sum_axes[(r, t)] = tuple(i for i, a in enumerate(r) if a not in ts)
            bshape[(r, t)] = broadcast_shape(r, t, shapes[t])
        plan = _Plan(shapes, sum_axes, bshape, graph.children, graph.parents)
        _plans[graph] = plan
    return plan


def _theta_arrays(graph: RegionGraph, theta: CliqueVector, plan: _Plan) -> dict[Clique, np.ndarray]:
    out = {}
    for v in graph.vertices:
        out[v] = theta[v].values if v in theta else np.zeros(plan.shapes[v])
    return out


def _numerator(r, th, state, plan, skip=None):
    acc = th[r].copy()
    for c in plan.children[r]:
        if c != skip:
            acc += state.lam[(r, c)].reshape(plan.bshape[(r, c)])
    for p in plan.parents[r]:
        acc -= state.lam[(p, r)]
    return acc


def _beliefs(graph, th, state, plan) -> dict[Clique, np.ndarray]:
    out = {}
    for r in graph.vertices:
        z = _numerator(r, th, state, plan) / graph.kappa[r]
        z = np.exp(z - z.max())
        out[r] = z / z.sum()
    return out


def gbp_sweep(graph: RegionGraph, th: dict, state: MessageState, damping: float, plan: _Plan) -> None:
    """One pass over all edges in sorted order, updating in place."""
    kappa = graph.kappa
    for r, t in graph.edges:
        kr = kappa[r]
        num = _numerator(r, th, state, plan, skip=t)
        m_new = kr * logsumexp(num / kr, plan.sum_axes[(r, t)])
        state.m[(r, t)] = m_new
        agg = th[t].copy()
        for c in plan.children[t]:
            agg += state.lam[(t, c)].reshape(plan.bshape[(t, c)])
        for p in plan.parents[t]:
            agg += state.m[(p, t)]
        lam_new = state.kappa_ratios[(r, t)] * agg - m_new
        if damping:
            lam_new = (1.0 - damping) * lam_new + damping * state.lam[(r, t)]
        state.lam[(r, t)] = lam_new
    state.sweeps += 1


def convex_gbp(
    graph: RegionGraph,
    theta: CliqueVector,
    config: GbpConfig | None = None,
    warm: MessageState | None = None,
) -> tuple[CliqueVector, MessageState]:
    """Approximate free-energy minimization on ``graph`` by message passing.

    Runs up to ``config.max_iters`` sweeps, stopping early once the largest
    change in any belief between sweeps drops below ``config.convergence_tol``.
    The ``warm`` state is copied, never mutated.
    """
    config = config or GbpConfig()
    _check_kappa(graph)
    plan = _plan(graph)
    th = _theta_arrays(graph, theta, plan)
    state = warm.copy() if warm is not None else MessageState.initial(graph)
    damping = config.resolved_damping(graph)

    prev = _beliefs(graph, th, state, plan) if config.max_iters > 1 else None
    beliefs = prev
    for _ in range(config.max_iters):
        gbp_sweep(graph, th, state, damping, plan)
        beliefs = _beliefs(graph, th, state, plan)
        if prev is not None:
            delta = max((float(np.max(np.abs(beliefs[v] - prev[v]))) for v in graph.vertices),
                        default=0.0)
            state.last_delta = delta
            if delta < config.convergence_tol:
                break
        prev = beliefs
    if beliefs is None:
        beliefs = _beliefs(graph, th, state, plan)
    tau = CliqueVector(Factor(v, beliefs[v]) for v in graph.vertices)
    return tau, state


def free_energy(tau: CliqueVector, theta: CliqueVector, graph: RegionGraph) -> float:
    """-tau . theta - sum_r kappa_r H(tau_r), with missing theta entries read as zero."""
    energy = 0.0
    for v in graph.vertices:
        if v in theta:
            energy -= float(np.sum(tau[v].values * theta[v].values))
        energy -= graph.kappa[v] * factor_entropy(tau[v])
    return energy


def full_log_table(theta: CliqueVector, domain: Domain, limit: int = FULL_TABLE_LIMIT) -> np.ndarray:
    """Normalized log p_theta over the whole domain."""
    check_table_size(domain, limit)
    full = domain.full_clique()
    cliques = theta.cliques
    # fold sub-clique potentials into a containing maximal clique first
    maximal = [c for c in cliques if not any(set(c) < set(o) for o in cliques)]
    folded = {c: theta[c].values.copy() for c in maximal}
    for c in cliques:
        if c in folded:
            continue
        host = next(o for o in maximal if set(c) <= set(o))
        folded[host] += theta[c].values.reshape(broadcast_shape(host, c, theta[c].values.shape))
    logp = np.zeros(domain.shape(full))
    for c, vals in folded.items():
        logp += vals.reshape(broadcast_shape(full, c, vals.shape))
    return logp - logsumexp(logp, tuple(range(domain.d)))


def table_marginals(p: np.ndarray, cliques, domain: Domain) -> CliqueVector:
    """Marginals of a full (linear-space) table, computing nested cliques from their hosts."""
    cliques = sorted(set(cliques))
    maximal = [c for c in cliques if not any(set(c) < set(o) for o in cliques)]
    out = {}
    for c in maximal:
        axes = tuple(i for i in range(domain.d) if i not in set(c))
        out[c] = p.sum(axis=axes) if axes else p.copy()
    for c in cliques:
        if c in out:
            continue
        host = next(o for o in maximal if set(c) <= set(o))
        axes = tuple(i for i, a in enumerate(host) if a not in set(c))
        out[c] = out[host].sum(axis=axes)
    return CliqueVector(Factor(c, v) for c, v in out.items())


def exact_oracle(theta: CliqueVector, domain: Domain, cliques, limit: int = FULL_TABLE_LIMIT) -> CliqueVector:
    """Marginals of p_theta on ``cliques`` by materializing the full table."""
    p = np.exp(full_log_table(theta, domain, limit))
    return table_marginals(p, cliques, domain)

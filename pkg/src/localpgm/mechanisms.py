"""Private measurement mechanisms, MWEM-style selection, and synthetic data.

Neighboring datasets differ by replacing one record, so a normalized marginal
moves by at most 2/m in L1.  All noise is calibrated from that.
"""
from __future__ import annotations

import json
import math
from collections.abc import Iterator
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Optional

import numpy as np

from .estimation import FittedModel, Measurement, ProxConfig, l2_loss, prox_pgm
from .factors import Clique, CliqueVector, Dataset, Domain, Factor, dataset_project, make_clique
from .out_of_model import OomConfig, infer_marginal, l1_error
from .region_graph import RegionGraph, build_factor_graph, build_saturated

SELECTION_SENSITIVITY = 2.0


class SeededRng:
    """PCG64 stream with explicitly derived noise distributions.

    Uniforms come from 53-bit integers shifted to the cell midpoint, so they
    lie strictly inside (0, 1).  Laplace noise applies the inverse CDF to
    those uniforms; Gaussian noise uses numpy's ziggurat ``standard_normal``
    on the same PCG64 stream.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def open_uniform(self, size=None) -> np.ndarray:
        k = self._gen.integers(0, 2**53, size=size, dtype=np.int64)
        return (k + 0.5) / 2.0**53

    def laplace(self, scale: float, size=None) -> np.ndarray:
        p = self.open_uniform(size)
        return np.where(p < 0.5, scale * np.log(2 * p), -scale * np.log(2 - 2 * p))

    def normal(self, sigma: float, size=None) -> np.ndarray:
        return sigma * self._gen.standard_normal(size)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=False)

    def randint(self, n: int) -> int:
        return int(self._gen.integers(0, n))


@dataclass(frozen=True)
class PrivacyBudget:
    """``epsilon=None`` with ``noiseless=True`` is the no-noise sentinel."""

    epsilon: Optional[float]
    delta: float = 0.0
    record_count: Optional[int] = None
    noiseless: bool = False

    def __post_init__(self):
        if self.noiseless:
            if self.epsilon is not None:
                raise ValueError("the noiseless budget carries no epsilon")
        elif self.epsilon is None or not (0 < self.epsilon < math.inf):
            raise ValueError("epsilon must be a positive finite number (use noiseless_budget() for no noise)")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must lie in [0, 1)")
        if self.record_count is not None and self.record_count < 1:
            raise ValueError("record_count must be positive")

    @classmethod
    def noiseless_budget(cls, record_count: Optional[int] = None) -> PrivacyBudget:
        return cls(None, 0.0, record_count, noiseless=True)

    @classmethod
    def parse(cls, text: str, record_count: Optional[int] = None) -> PrivacyBudget:
        if text.strip().lower() in ("inf", "infinity", "none"):
            return cls.noiseless_budget(record_count)
        return cls(float(text), 0.0, record_count)


@dataclass
class Workload:
    cliques: list[Clique]
    queries: Optional[dict[Clique, np.ndarray]] = None

    def __post_init__(self):
        self.cliques = [make_clique(c) for c in self.cliques]
        if not self.cliques:
            raise ValueError("workload must contain at least one clique")
        if len(set(self.cliques)) != len(self.cliques):
            raise ValueError("workload cliques must be distinct")

    def __len__(self) -> int:
        return len(self.cliques)


@dataclass
class ProvenanceLog:
    """One record per privacy-consuming event."""

    records: list[dict] = field(default_factory=list)

    def charge(self, mechanism: str, clique: Clique, epsilon: Optional[float], scale: float, seed: int,
               names: Optional[list[str]] = None, **extra) -> None:
        rec = {
            "mechanism": mechanism,
            "clique": names if names is not None else list(clique),
            "epsilon": epsilon,
            "scale": scale,
            "seed": seed,
        }
        rec.update(extra)
        self.records.append(rec)

    def total_epsilon(self) -> float:
        return float(sum(r["epsilon"] for r in self.records if r["epsilon"] is not None))

    def write(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def laplace_scale(m: int, k: int, epsilon: float) -> float:
    """Per-cell scale when epsilon is split over k normalized marginals."""
    return 2.0 * k / (m * epsilon)


def laplace_measure(X: Dataset, cliques: list[Clique], budget: PrivacyBudget, rng: SeededRng,
                    provenance: Optional[ProvenanceLog] = None) -> list[Measurement]:
    if not cliques:
        raise ValueError("no cliques to measure")
    if budget.record_count is not None and budget.record_count != X.m:
        raise ValueError("budget record count does not match the dataset")
    k = len(cliques)
    out = []
    for c in cliques:
        mu = dataset_project(X, c).flat
        names = X.domain.attr_names(c)
        if budget.noiseless:
            out.append(Measurement(c, mu.copy(), 1.0))
            if provenance is not None:
                provenance.charge("laplace", c, None, 0.0, rng.seed, names, noiseless=True)
            continue
        b = laplace_scale(X.m, k, budget.epsilon)
        y = mu + rng.laplace(b, mu.size)
        out.append(Measurement(c, y, b * math.sqrt(2.0)))
        if provenance is not None:
            provenance.charge("laplace", c, budget.epsilon / k, b, rng.seed, names)
    return out


def gaussian_measure(X: Dataset, cliques: list[Clique], sigma: float, rng: SeededRng,
                     provenance: Optional[ProvenanceLog] = None) -> list[Measurement]:
    """Gaussian noise of standard deviation ``sigma``; accounting is left to the caller."""
    if not cliques:
        raise ValueError("no cliques to measure")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    out = []
    for c in cliques:
        mu = dataset_project(X, c).flat
        if sigma == 0:
            out.append(Measurement(c, mu.copy(), 1.0))
        else:
            out.append(Measurement(c, mu + rng.normal(sigma, mu.size), sigma))
        if provenance is not None:
            provenance.charge("gaussian", c, None, sigma, rng.seed, X.domain.attr_names(c))
    return out


def exponential_probabilities(scores: np.ndarray, epsilon: float, sensitivity: float) -> np.ndarray:
    logits = epsilon * np.asarray(scores, dtype=np.float64) / (2.0 * sensitivity)
    w = np.exp(logits - logits.max())
    return w / w.sum()


def exponential_select(scores, epsilon: Optional[float], sensitivity: float, rng: SeededRng) -> int:
    """Index drawn with probability proportional to exp(eps * score / (2 * sensitivity)).

    ``epsilon=None`` is the noiseless sentinel and returns the first argmax.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if epsilon is None:
        return int(np.argmax(scores))
    p = np.cumsum(exponential_probabilities(scores, epsilon, sensitivity))
    u = float(rng.open_uniform())
    return int(min(np.searchsorted(p, u * p[-1], side="right"), len(p) - 1))


GRAPH_BUILDERS = {"saturated": build_saturated, "factor": build_factor_graph}


def uniform_model(domain: Domain, cliques) -> FittedModel:
    """Placeholder model over ``cliques`` with uniform marginals and zero parameters."""
    graph = RegionGraph(domain, tuple(make_clique(c) for c in cliques), ())
    return FittedModel(graph, CliqueVector.uniform(domain, graph.vertices),
                       CliqueVector.zeros(domain, graph.vertices), None, np.zeros(0), "exact")


@dataclass
class MwemRound:
    index: int
    clique: Clique
    model: FittedModel
    measurements: list[Measurement]


def mwem_rounds(X: Dataset, workload: Workload, rounds: int, eps_per_round: Optional[float],
                oracle: str, graph_builder: str, rng: SeededRng,
                prox: ProxConfig | None = None, provenance: Optional[ProvenanceLog] = None,
                oom: OomConfig | None = None) -> Iterator[MwemRound]:
    """Select, measure, re-estimate; yields after every round.

    ``eps_per_round=None`` runs the noiseless variant (exact argmax selection
    and exact measurements).
    """
    if rounds < 1 or rounds > len(workload):
        raise ValueError(f"rounds must lie in [1, {len(workload)}]")
    if graph_builder not in GRAPH_BUILDERS:
        raise ValueError(f"unknown graph builder {graph_builder!r}")
    domain = X.domain
    truth = {c: dataset_project(X, c) for c in workload.cliques}
    eps_half = None if eps_per_round is None else eps_per_round / 2.0
    measure_budget = (PrivacyBudget.noiseless_budget() if eps_half is None
                      else PrivacyBudget(eps_half, 0.0, X.m))
    model = uniform_model(domain, workload.cliques)
    measured: list[Clique] = []
    measurements: list[Measurement] = []
    for t in range(rounds):
        candidates = [c for c in workload.cliques if c not in measured]
        scores = [X.m * l1_error(infer_marginal(model, c, oom), truth[c]) for c in candidates]
        choice = candidates[exponential_select(scores, eps_half, SELECTION_SENSITIVITY, rng)]
        if provenance is not None:
            provenance.charge("exponential", choice, eps_half, SELECTION_SENSITIVITY, rng.seed,
                              domain.attr_names(choice), round=t + 1,
                              **({"noiseless": True} if eps_half is None else {}))
        measured.append(choice)
        log = ProvenanceLog() if provenance is not None else None
        measurements.extend(laplace_measure(X, [choice], measure_budget, rng, log))
        if log is not None:
            for rec in log.records:
                rec["round"] = t + 1
            provenance.records.extend(log.records)
        graph = GRAPH_BUILDERS[graph_builder](domain, measured)
        model = prox_pgm(l2_loss(measurements, domain), graph, oracle, prox)
        yield MwemRound(t + 1, choice, model, list(measurements))


def mwem(X: Dataset, workload: Workload, rounds: int, eps_per_round: Optional[float],
         oracle: str = "convex_gbp", graph_builder: str = "saturated", rng: SeededRng | None = None,
         prox: ProxConfig | None = None, provenance: Optional[ProvenanceLog] = None) -> FittedModel:
    rng = rng or SeededRng(0)
    last = None
    for last in mwem_rounds(X, workload, rounds, eps_per_round, oracle, graph_builder, rng, prox, provenance):
        pass
    return last.model


def workload_error(model: FittedModel, X: Dataset, cliques, oom: OomConfig | None = None) -> float:
    """Mean L1 error of the model over ``cliques``."""
    errs = [l1_error(infer_marginal(model, c, oom), dataset_project(X, c)) for c in cliques]
    return float(np.mean(errs))


def random_spanning_tree(d: int, rng: SeededRng) -> list[tuple[int, int]]:
    """Uniform spanning tree of the complete graph on d nodes (Wilson's algorithm, root 0)."""
    in_tree = [False] * d
    nxt = [-1] * d
    in_tree[0] = True
    for start in range(1, d):
        u = start
        while not in_tree[u]:
            v = rng.randint(d - 1)
            nxt[u] = v if v < u else v + 1
            u = nxt[u]
        u = start
        while not in_tree[u]:
            in_tree[u] = True
            u = nxt[u]
    return sorted(tuple(sorted((i, nxt[i]))) for i in range(1, d))


def tree_sample(domain: Domain, edges: list[tuple[int, int]], theta: CliqueVector, m: int,
                rng: SeededRng) -> np.ndarray:
    """Forward-sample m records from a pairwise tree model rooted at attribute 0."""
    d = domain.d
    adj = {i: [] for i in range(d)}
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    order, parent = [0], {0: None}
    for v in order:
        for w in sorted(adj[v]):
            if w not in parent:
                parent[w] = v
                order.append(w)
    if len(order) != d:
        raise ValueError("edges do not span the domain")

    def pair(p, v):
        # log-potential indexed [x_p, x_v]
        key = (min(p, v), max(p, v))
        vals = theta[key].values if key in theta else np.zeros(domain.shape(key))
        return vals if p < v else vals.T

    # upward messages, normalized to keep the scale bounded
    incoming = {v: np.ones(domain.sizes[v]) for v in range(d)}
    for v in reversed(order[1:]):
        p = parent[v]
        msg = np.exp(pair(p, v) - pair(p, v).max()) @ incoming[v]
        incoming[p] = incoming[p] * (msg / msg.sum())
    records = np.zeros((m, d), dtype=np.int64)
    root = incoming[0] / incoming[0].sum()
    records[:, 0] = _inverse_cdf(root[None, :], np.zeros(m, dtype=np.int64), rng.open_uniform(m))
    for v in order[1:]:
        p = parent[v]
        cond = np.exp(pair(p, v) - pair(p, v).max(axis=1, keepdims=True)) * incoming[v][None, :]
        cond /= cond.sum(axis=1, keepdims=True)
        records[:, v] = _inverse_cdf(cond, records[:, p], rng.open_uniform(m))
    return records


def _inverse_cdf(table: np.ndarray, rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(table, axis=1)
    cdf[:, -1] = 1.0
    return (u[:, None] >= cdf[rows]).sum(axis=1)


def synth_generate(d: int, sizes, m: int, sigma: float, rng: SeededRng,
                   names: Optional[list[str]] = None) -> tuple[Dataset, CliqueVector]:
    """Random tree-structured pairwise model and m records sampled from it."""
    if d < 1:
        raise ValueError("need at least one attribute")
    if m < 0 or sigma < 0:
        raise ValueError("m and sigma must be nonnegative")
    sizes = [int(sizes)] * d if np.isscalar(sizes) else [int(n) for n in sizes]
    domain = Domain(tuple(names) if names else tuple(f"a{i}" for i in range(d)), tuple(sizes))
    edges = random_spanning_tree(d, rng)
    theta = CliqueVector(Factor(e, rng.normal(sigma, domain.shape(e))) for e in edges)
    records = tree_sample(domain, edges, theta, m, rng)
    return Dataset(domain, records), theta


def random_cliques(d: int, k: int, width: int, rng: SeededRng) -> list[Clique]:
    """k distinct width-subsets of range(d), sampled uniformly without replacement."""
    combos = list(combinations(range(d), width))
    if k > len(combos):
        raise ValueError(f"only {len(combos)} distinct {width}-cliques exist over {d} attributes")
    idx = rng.choice_without_replacement(len(combos), k)
    return [combos[i] for i in idx]

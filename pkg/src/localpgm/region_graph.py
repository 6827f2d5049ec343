"""Region graphs over cliques, their counting numbers, and local-polytope checks."""
from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations

import numpy as np

from .errors import IncompleteVectorError, InvalidCountingNumbersError
from .factors import Clique, CliqueVector, Domain, factor_marginalize, make_clique

Edge = tuple[Clique, Clique]


@dataclass(frozen=True, eq=False)
class RegionGraph:
    """Directed containment graph; edges run from parent (superset) to child."""

    domain: Domain
    vertices: tuple[Clique, ...]
    edges: tuple[Edge, ...]
    kappa: Mapping[Clique, float] = field(default_factory=dict)

    def __post_init__(self):
        vertices = tuple(sorted(set(self.vertices)))
        for v in vertices:
            self.domain.check(v)
        vset = set(vertices)
        edges = tuple(sorted(set(self.edges)))
        for r, s in edges:
            if r not in vset or s not in vset:
                raise ValueError(f"edge {r}->{s} uses an unknown vertex")
            if not (set(s) < set(r)):
                raise ValueError(f"edge {r}->{s} is not a strict containment")
        kappa = {v: float(self.kappa.get(v, 1.0)) for v in vertices}
        if any(not k > 0 for k in kappa.values()):
            raise InvalidCountingNumbersError("counting numbers must be positive")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "kappa", kappa)

    @cached_property
    def children(self) -> dict[Clique, list[Clique]]:
        out: dict[Clique, list[Clique]] = {v: [] for v in self.vertices}
        for r, s in self.edges:
            out[r].append(s)
        return out

    @cached_property
    def parents(self) -> dict[Clique, list[Clique]]:
        out: dict[Clique, list[Clique]] = {v: [] for v in self.vertices}
        for r, s in self.edges:
            out[s].append(r)
        return out

    def with_kappa(self, kappa: float | Mapping[Clique, float]) -> RegionGraph:
        if not isinstance(kappa, Mapping):
            kappa = {v: float(kappa) for v in self.vertices}
        return RegionGraph(self.domain, self.vertices, self.edges, kappa)

    def is_tree(self) -> bool:
        """True when the undirected skeleton is a forest."""
        parent = {v: v for v in self.vertices}

        def find(v):
            while parent[v] != v:
                parent[v] = parent[parent[v]]
                v = parent[v]
            return v

        for r, s in self.edges:
            a, b = find(r), find(s)
            if a == b:
                return False
            parent[a] = b
        return True

    def containing_vertex(self, clique: Clique) -> Clique | None:
        """Smallest vertex containing ``clique``; ties broken lexicographically."""
        cs = set(clique)
        best = None
        for v in self.vertices:
            if cs.issubset(v):
                key = (self.domain.size(v), len(v), v)
                if best is None or key < best[0]:
                    best = (key, v)
        return None if best is None else best[1]

    def to_json(self) -> dict:
        names = self.domain.attr_names
        return {
            "vertices": [names(v) for v in self.vertices],
            "edges": [[names(r), names(s)] for r, s in self.edges],
            "kappa": [[names(v), self.kappa[v]] for v in self.vertices],
        }

    @classmethod
    def from_json(cls, obj: dict, domain: Domain) -> RegionGraph:
        vertices = [domain.clique(v) for v in obj["vertices"]]
        edges = [(domain.clique(r), domain.clique(s)) for r, s in obj["edges"]]
        kappa = {domain.clique(v): k for v, k in obj.get("kappa", [])}
        return cls(domain, tuple(vertices), tuple(edges), kappa)


def _dedupe(cliques: Iterable[Clique]) -> list[Clique]:
    out = sorted({make_clique(c) for c in cliques})
    if not out:
        raise ValueError("at least one clique is required")
    return out


def _hasse_edges(vertices: list[Clique]) -> list[Edge]:
    vset = set(vertices)
    edges = []
    for r in vertices:
        rs = set(r)
        if 2 ** len(r) <= len(vertices):
            below = [s for k in range(1, len(r)) for s in combinations(r, k) if s in vset]
        else:
            below = [s for s in vertices if set(s) < rs]
        for s in below:
            ss = set(s)
            if not any(ss < set(t) for t in below if t != s):
                edges.append((r, s))
    return edges


def _intersection_closure(cliques: list[Clique]) -> set[Clique]:
    closed = {frozenset(c) for c in cliques}
    frontier = set(closed)
    while frontier:
        fresh = set()
        for a in frontier:
            for b in closed:
                c = a & b
                if c and c not in closed:
                    fresh.add(c)
        closed |= fresh
        frontier = fresh
    return {make_clique(c) for c in closed}


def build_saturated(domain: Domain, cliques: Iterable[Clique]) -> RegionGraph:
    """Closure of the maximal cliques under intersection, with Hasse-diagram edges.

    Cliques nested inside other input cliques stay as vertices but do not seed
    further intersections.
    """
    cliques = _dedupe(cliques)
    maximal = [c for c in cliques if not any(set(c) < set(o) for o in cliques)]
    vertices = sorted(_intersection_closure(maximal) | set(cliques))
    return RegionGraph(domain, tuple(vertices), tuple(_hasse_edges(vertices)))


def build_factor_graph(domain: Domain, cliques: Iterable[Clique]) -> RegionGraph:
    cliques = _dedupe(cliques)
    singles = {(a,) for c in cliques for a in c}
    vertices = sorted(set(cliques) | singles)
    edges = [(r, (a,)) for r in cliques for a in r if len(r) > 1]
    return RegionGraph(domain, tuple(vertices), tuple(edges))


def supports(G: RegionGraph, cliques: Iterable[Clique]) -> bool:
    return all(any(set(c).issubset(v) for v in G.vertices) for c in cliques)


@dataclass(frozen=True)
class ConsistencyReport:
    normalization_violations: dict[Clique, float]
    edge_violations: dict[Edge, float]
    max_violation: float
    min_entry: float
    tol: float

    @property
    def feasible(self) -> bool:
        """Membership in the local polytope up to ``tol``."""
        return self.max_violation <= self.tol and self.min_entry >= -self.tol


def check_local_consistency(tau: CliqueVector, G: RegionGraph, tol: float = 1e-6) -> ConsistencyReport:
    missing = [v for v in G.vertices if v not in tau]
    if missing:
        raise IncompleteVectorError(f"no factor for vertices {missing}")
    norm = {v: abs(tau[v].total() - 1.0) for v in G.vertices}
    edge = {}
    for r, s in G.edges:
        diff = factor_marginalize(tau[r], s).values - tau[s].values
        edge[(r, s)] = float(np.max(np.abs(diff))) if diff.size else 0.0
    worst = max([*norm.values(), *edge.values()], default=0.0)
    min_entry = min(float(tau[v].values.min()) for v in G.vertices)
    return ConsistencyReport(norm, edge, worst, min_entry, tol)

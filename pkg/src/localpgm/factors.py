"""Discrete domains, cliques, dense factors, and datasets.

A clique is a sorted tuple of attribute indices into a :class:`Domain`.  A
:class:`Factor` stores its table as an n-d array with one axis per clique
attribute (ascending attribute id), so ``values.ravel()`` enumerates the
sub-domain lexicographically with the last attribute varying fastest.
"""
from __future__ import annotations

import csv
import json
import math
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    EmptyDatasetError,
    InvalidCliqueError,
    InvalidDistributionError,
    TableTooLargeError,
)

Clique = tuple[int, ...]

FULL_TABLE_LIMIT = 10**7
ENTROPY_FLOOR = 1e-15


def make_clique(attrs: Iterable[int]) -> Clique:
    return tuple(sorted(set(int(a) for a in attrs)))


def is_subset(s: Clique, r: Clique) -> bool:
    return set(s).issubset(r)


@dataclass(frozen=True)
class Domain:
    names: tuple[str, ...]
    sizes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        object.__setattr__(self, "sizes", tuple(int(n) for n in self.sizes))
        if len(self.names) != len(self.sizes):
            raise ValueError("names and sizes must have equal length")
        if len(set(self.names)) != len(self.names):
            raise ValueError("attribute names must be unique")
        if any(n < 1 for n in self.sizes):
            raise ValueError("every attribute size must be >= 1")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, int]]) -> Domain:
        pairs = list(pairs)
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    @classmethod
    def uniform(cls, d: int, n: int, prefix: str = "a") -> Domain:
        return cls(tuple(f"{prefix}{i}" for i in range(d)), (n,) * d)

    @property
    def d(self) -> int:
        return len(self.names)

    def __len__(self) -> int:
        return len(self.names)

    def full_clique(self) -> Clique:
        return tuple(range(self.d))

    def check(self, clique: Clique) -> Clique:
        if any(b <= a for a, b in zip(clique, clique[1:])):
            raise InvalidCliqueError(f"clique {clique} is not strictly increasing")
        if clique and (clique[0] < 0 or clique[-1] >= self.d):
            raise InvalidCliqueError(f"clique {clique} out of range for {self.d} attributes")
        return clique

    def shape(self, clique: Clique) -> tuple[int, ...]:
        return tuple(self.sizes[i] for i in clique)

    def size(self, clique: Clique | None = None) -> int:
        """Number of cells of the sub-domain (the full domain if ``clique`` is None)."""
        if clique is None:
            clique = self.full_clique()
        return math.prod(self.shape(clique))

    def clique(self, attrs: Iterable[str | int]) -> Clique:
        """Clique from attribute names or indices."""
        idx = []
        for a in attrs:
            if isinstance(a, str):
                if a not in self.names:
                    raise InvalidCliqueError(f"unknown attribute {a!r}")
                idx.append(self.names.index(a))
            else:
                idx.append(int(a))
        return self.check(make_clique(idx))

    def attr_names(self, clique: Clique) -> list[str]:
        return [self.names[i] for i in clique]

    def to_json(self) -> dict:
        return {"attrs": [{"name": n, "size": s} for n, s in zip(self.names, self.sizes)]}

    @classmethod
    def from_json(cls, obj: dict) -> Domain:
        return cls.from_pairs((a["name"], a["size"]) for a in obj["attrs"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> Domain:
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class Factor:
    """Dense table over the sub-domain of ``clique``."""

    clique: Clique
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != len(self.clique):
            raise ValueError(
                f"factor on {self.clique} needs {len(self.clique)} axes, got {values.ndim}"
            )
        if np.isnan(values).any() or np.isposinf(values).any():
            raise ValueError("factor entries must be finite (or -inf in log space)")
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, domain: Domain, clique: Clique) -> Factor:
        return cls(clique, np.zeros(domain.shape(clique)))

    @classmethod
    def uniform(cls, domain: Domain, clique: Clique) -> Factor:
        shape = domain.shape(clique)
        return cls(clique, np.full(shape, 1.0 / math.prod(shape)))

    @classmethod
    def from_flat(cls, domain: Domain, clique: Clique, flat) -> Factor:
        flat = np.asarray(flat, dtype=np.float64)
        shape = domain.shape(clique)
        if flat.size != math.prod(shape):
            raise ValueError(f"expected {math.prod(shape)} values for {clique}, got {flat.size}")
        return cls(clique, flat.reshape(shape))

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    @property
    def size(self) -> int:
        return self.values.size

    def total(self) -> float:
        return float(self.values.sum())

    def normalize(self) -> Factor:
        return Factor(self.clique, self.values / self.values.sum())

    def __add__(self, other: Factor) -> Factor:
        _same_clique(self, other)
        return Factor(self.clique, self.values + other.values)

    def __sub__(self, other: Factor) -> Factor:
        _same_clique(self, other)
        return Factor(self.clique, self.values - other.values)

    def __mul__(self, c: float) -> Factor:
        return Factor(self.clique, self.values * c)

    __rmul__ = __mul__

    def __neg__(self) -> Factor:
        return Factor(self.clique, -self.values)

    def __repr__(self) -> str:
        return f"Factor(clique={self.clique}, values={self.flat!r})"


def _same_clique(a: Factor, b: Factor) -> None:
    if a.clique != b.clique:
        raise InvalidCliqueError(f"clique mismatch: {a.clique} vs {b.clique}")


def _sum_axes(r: Clique, s: Clique) -> tuple[int, ...]:
    if not is_subset(s, r):
        raise InvalidCliqueError(f"{s} is not a subset of {r}")
    keep = set(s)
    return tuple(i for i, a in enumerate(r) if a not in keep)


def broadcast_shape(r: Clique, s: Clique, s_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Shape that aligns an array over ``s`` with the axes of ``r`` (s must be a subset)."""
    pos = {a: j for j, a in enumerate(s)}
    return tuple(s_shape[pos[a]] if a in pos else 1 for a in r)


def logsumexp(a: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    """Stable log-sum-exp over ``axes``; all -inf slices give -inf."""
    if not axes:
        return a.copy()
    mx = np.max(a, axis=axes, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - mx), axis=axes, keepdims=True)) + mx
    return np.squeeze(out, axis=axes)


def factor_marginalize(f: Factor, s: Clique) -> Factor:
    """Sum ``f`` over the attributes not in ``s``."""
    axes = _sum_axes(f.clique, s)
    return Factor(s, f.values.sum(axis=axes) if axes else f.values.copy())


def factor_expand(f: Factor, r: Clique, domain: Domain) -> Factor:
    """Broadcast ``f`` onto the larger clique ``r``."""
    if not is_subset(f.clique, r):
        raise InvalidCliqueError(f"{f.clique} is not a subset of {r}")
    aligned = f.values.reshape(broadcast_shape(r, f.clique, f.values.shape))
    return Factor(r, np.broadcast_to(aligned, domain.shape(r)).copy())


def factor_logsumexp(f: Factor, s: Clique) -> Factor:
    return Factor(s, logsumexp(f.values, _sum_axes(f.clique, s)))


def factor_entropy(f: Factor) -> float:
    """Shannon entropy in nats; entries at or below the clamp floor contribute 0."""
    p = f.flat
    if (p < -1e-9).any():
        raise InvalidDistributionError(f"negative entry {p.min():.3g} in distribution")
    p = p[p > ENTROPY_FLOOR]
    return float(-np.sum(p * np.log(p)))


class CliqueVector(Mapping):
    """Factors keyed by clique, iterated in sorted clique order."""

    def __init__(self, factors: Iterable[Factor] | Mapping[Clique, Factor] = ()):
        if isinstance(factors, Mapping):
            items = list(factors.values())
        else:
            items = list(factors)
        self._data: dict[Clique, Factor] = {}
        for f in sorted(items, key=lambda f: f.clique):
            if f.clique in self._data:
                raise ValueError(f"duplicate clique {f.clique}")
            self._data[f.clique] = f

    @classmethod
    def zeros(cls, domain: Domain, cliques: Iterable[Clique]) -> CliqueVector:
        return cls(Factor.zeros(domain, c) for c in cliques)

    @classmethod
    def uniform(cls, domain: Domain, cliques: Iterable[Clique]) -> CliqueVector:
        return cls(Factor.uniform(domain, c) for c in cliques)

    def __getitem__(self, clique: Clique) -> Factor:
        return self._data[clique]

    def __iter__(self) -> Iterator[Clique]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    @property
    def cliques(self) -> list[Clique]:
        return list(self._data)

    def _zip(self, other: CliqueVector):
        if self.cliques != other.cliques:
            raise InvalidCliqueError("clique vectors have different cliques")
        return zip(self._data.values(), other._data.values())

    def __add__(self, other: CliqueVector) -> CliqueVector:
        return CliqueVector(a + b for a, b in self._zip(other))

    def __sub__(self, other: CliqueVector) -> CliqueVector:
        return CliqueVector(a - b for a, b in self._zip(other))

    def __mul__(self, c: float) -> CliqueVector:
        return CliqueVector(f * c for f in self._data.values())

    __rmul__ = __mul__

    def dot(self, other: CliqueVector) -> float:
        return float(sum(np.sum(a.values * b.values) for a, b in self._zip(other)))

    def max_abs_diff(self, other: CliqueVector) -> float:
        return max((float(np.max(np.abs(a.values - b.values))) for a, b in self._zip(other)),
                   default=0.0)

    def restrict(self, cliques: Iterable[Clique]) -> CliqueVector:
        return CliqueVector(self._data[c] for c in cliques)

    def __repr__(self) -> str:
        return f"CliqueVector({self.cliques})"


class Dataset:
    """Integer-coded records over a :class:`Domain`."""

    def __init__(self, domain: Domain, records):
        records = np.asarray(records, dtype=np.int64)
        if records.size == 0:
            records = records.reshape(0, domain.d)
        if records.ndim != 2 or records.shape[1] != domain.d:
            raise ValueError(f"records must have shape (m, {domain.d})")
        if records.size and ((records < 0).any() or (records >= np.array(domain.sizes)).any()):
            raise ValueError("record value out of range for its attribute")
        self.domain = domain
        self.records = records

    @property
    def m(self) -> int:
        return self.records.shape[0]

    def __len__(self) -> int:
        return self.m

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.domain.names)
            w.writerows(self.records.tolist())

    @classmethod
    def load_csv(cls, path: str | Path, domain: Domain) -> Dataset:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError(f"{path}: missing header row")
        header, body = rows[0], rows[1:]
        if tuple(header) != domain.names:
            raise ValueError(f"{path}: header {header} does not match domain {list(domain.names)}")
        return cls(domain, [[int(v) for v in row] for row in body])


def dataset_project(X: Dataset, r: Clique) -> Factor:
    """Normalized empirical marginal of ``X`` on clique ``r``."""
    X.domain.check(r)
    if X.m == 0:
        raise EmptyDatasetError("cannot take marginals of an empty dataset")
    shape = X.domain.shape(r)
    if not r:
        return Factor(r, np.array(1.0))
    idx = np.ravel_multi_index(tuple(X.records[:, a] for a in r), shape)
    counts = np.bincount(idx, minlength=math.prod(shape)).astype(np.float64)
    return Factor(r, (counts / X.m).reshape(shape))


def check_table_size(domain: Domain, limit: int = FULL_TABLE_LIMIT) -> None:
    n = domain.size()
    if n > limit:
        raise TableTooLargeError(f"full table has {n} cells, above the limit of {limit}")


def dataset_datavector(X: Dataset, limit: int = FULL_TABLE_LIMIT) -> Factor:
    check_table_size(X.domain, limit)
    return dataset_project(X, X.domain.full_clique())

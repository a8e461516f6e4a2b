"""Measurement bases: canonical and Sylvester-Hadamard, with row orderings.

A basis is an ``n x n`` matrix whose rows are the patterns displayed on the
SLM one after another. Hadamard rows are never materialised unless asked
for; ``apply`` and ``solve`` go through the fast Walsh-Hadamard transform
and the row permutation.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage

CANONICAL = "canonical"
HADAMARD = "hadamard"

ORDERING_KINDS = ("natural", "walsh", "cake", "random")
DEFAULT_RANDOM_SEED = 20240917


def is_power_of_four(n: int) -> bool:
    return n >= 4 and (n & (n - 1)) == 0 and (n.bit_length() - 1) % 2 == 0


def _check_power_of_four(n: int) -> None:
    if not isinstance(n, (int, np.integer)) or not is_power_of_four(int(n)):
        raise ValueError(f"basis size must be 4**k with k >= 1, got {n!r}")


@dataclass(frozen=True)
class Ordering:
    """Row ordering of a Hadamard basis.

    ``kind`` is one of ``natural``, ``walsh``, ``cake`` or ``random``; only the
    random ordering carries a seed.
    """

    kind: str = "natural"
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ORDERING_KINDS:
            raise ValueError(f"unknown ordering {self.kind!r}")
        if self.kind == "random":
            if self.seed is None:
                object.__setattr__(self, "seed", DEFAULT_RANDOM_SEED)
            if not 0 <= int(self.seed) < 2**64:
                raise ValueError("random ordering seed must be a 64-bit unsigned int")
        elif self.seed is not None:
            raise ValueError(f"ordering {self.kind!r} takes no seed")

    @classmethod
    def parse(cls, text: str) -> Ordering:
        """Parse the CLI form ``natural|walsh|cake|random:<seed>``."""
        text = text.strip().lower()
        if text.startswith("random"):
            _, _, seed = text.partition(":")
            return cls("random", int(seed) if seed else None)
        return cls(text)

    def __str__(self) -> str:
        if self.kind == "random":
            return f"random:{self.seed}"
        return self.kind


@dataclass(frozen=True, eq=False)
class BasisMatrix:
    """An ``n x n`` measurement basis.

    Row ``k`` of the basis is natural row ``perm[k]``. For the canonical basis
    the natural matrix is the identity; for the Hadamard basis it is the
    Sylvester matrix with ``entry(i, j) = (-1) ** popcount(i & j)``.
    """

    n: int
    kind: str = HADAMARD
    perm: np.ndarray = field(default=None, repr=False)
    ordering: Ordering = field(default_factory=Ordering)

    def __post_init__(self):
        _check_power_of_four(self.n)
        if self.kind not in (CANONICAL, HADAMARD):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        perm = np.arange(self.n) if self.perm is None else np.asarray(self.perm, dtype=np.int64)
        if perm.shape != (self.n,) or not np.array_equal(np.sort(perm), np.arange(self.n)):
            raise ValueError("perm must be a permutation of 0..n-1")
        perm = perm.copy()
        perm.flags.writeable = False
        object.__setattr__(self, "perm", perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(self.n)
        inv.flags.writeable = False
        object.__setattr__(self, "_inverse_perm", inv)

    @property
    def side(self) -> int:
        return int(round(np.sqrt(self.n)))

    @property
    def label(self) -> str:
        return CANONICAL if self.kind == CANONICAL else str(self.ordering)

    def with_perm(self, perm, ordering: Ordering) -> BasisMatrix:
        return BasisMatrix(self.n, self.kind, perm, ordering)

    def natural_rows(self, idx) -> np.ndarray:
        """Natural-order rows ``idx`` as an int8 array of shape ``(len(idx), n)``."""
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        if self.kind == CANONICAL:
            out = np.zeros((idx.size, self.n), dtype=np.int8)
            out[np.arange(idx.size), idx] = 1
            return out
        cols = np.arange(self.n, dtype=np.int64)
        parity = _popcount(idx[:, None] & cols[None, :]) & 1
        return (1 - 2 * parity).astype(np.int8)

    def row(self, k: int) -> np.ndarray:
        return self.natural_rows([self.perm[k]])[0]

    def entry(self, k: int, j: int) -> int:
        i = int(self.perm[k])
        if self.kind == CANONICAL:
            return int(i == j)
        return -1 if bin(i & j).count("1") % 2 else 1

    def dense(self) -> np.ndarray:
        """Materialise the full matrix (rows in basis order)."""
        return self.natural_rows(self.perm)

    def apply(self, v) -> np.ndarray:
        """Return ``B @ v`` along the last axis."""
        v = np.asarray(v)
        if v.shape[-1] != self.n:
            raise ValueError(f"expected length {self.n}, got {v.shape[-1]}")
        if self.kind == CANONICAL:
            return v[..., self.perm]
        return fwht(v)[..., self.perm]

    def solve(self, y) -> np.ndarray:
        """Return ``v`` with ``B @ v = y`` along the last axis."""
        y = np.asarray(y)
        if y.shape[-1] != self.n:
            raise ValueError(f"expected length {self.n}, got {y.shape[-1]}")
        natural = y[..., self._inverse_perm]
        if self.kind == CANONICAL:
            return natural
        return fwht(natural) / self.n


def _popcount(a: np.ndarray) -> np.ndarray:
    a = a.astype(np.uint64)
    count = np.zeros(a.shape, dtype=np.int64)
    while np.any(a):
        count += (a & np.uint64(1)).astype(np.int64)
        a = a >> np.uint64(1)
    return count


def canonical(n: int) -> BasisMatrix:
    return BasisMatrix(n, CANONICAL)


def hadamard_natural(n: int) -> BasisMatrix:
    return BasisMatrix(n, HADAMARD)


def sign_changes(row) -> int:
    """Number of adjacent entries of opposite sign in a +-1 vector."""
    row = np.asarray(row)
    return int(np.count_nonzero(row[1:] != row[:-1]))


def _require_natural_hadamard(h: BasisMatrix) -> None:
    if h.kind != HADAMARD:
        raise ValueError("ordering applies to Hadamard bases only")
    if h.ordering.kind != "natural":
        raise ValueError("expected a naturally ordered Hadamard basis")


def natural_sequencies(n: int) -> np.ndarray:
    """Sign changes of every natural Sylvester row of size ``n``.

    The sequency of natural row ``i`` is the inverse Gray code of the
    bit-reversed index.
    """
    bits = n.bit_length() - 1
    i = np.arange(n, dtype=np.int64)
    rev = np.zeros_like(i)
    for b in range(bits):
        rev |= ((i >> b) & 1) << (bits - 1 - b)
    seq = rev.copy()
    shift = rev >> 1
    while np.any(shift):
        seq ^= shift
        shift >>= 1
    return seq


def walsh_order(h: BasisMatrix) -> BasisMatrix:
    """Sort rows by ascending number of sign changes (sequency order)."""
    if h.kind == HADAMARD and h.ordering.kind == "walsh":
        return h
    _require_natural_hadamard(h)
    perm = np.argsort(natural_sequencies(h.n), kind="stable")
    return h.with_perm(perm, Ordering("walsh"))


def connected_plus_regions(grid: np.ndarray) -> int:
    """4-connected components of the +1 cells of a 2-D +-1 array."""
    _, count = ndimage.label(np.asarray(grid) > 0)
    return int(count)


@lru_cache(maxsize=None)
def cake_counts(n: int, chunk: int = 256) -> np.ndarray:
    """Connected +1 region counts of every natural Hadamard row of size ``n``."""
    _check_power_of_four(n)
    h = hadamard_natural(n)
    side = h.side
    counts = np.empty(n, dtype=np.int64)
    for start in range(0, n, chunk):
        rows = h.natural_rows(np.arange(start, min(start + chunk, n)))
        for k, r in enumerate(rows):
            counts[start + k] = connected_plus_regions(r.reshape(side, side))
    counts.flags.writeable = False
    return counts


def cake_cutting_order(h: BasisMatrix) -> BasisMatrix:
    """Sort rows by the number of connected +1 blocks in their 2-D layout.

    Ties keep the natural order.
    """
    if h.kind == HADAMARD and h.ordering.kind == "cake":
        return h
    _require_natural_hadamard(h)
    perm = np.argsort(cake_counts(h.n), kind="stable")
    return h.with_perm(perm, Ordering("cake"))


def random_order(h: BasisMatrix, seed: int = DEFAULT_RANDOM_SEED) -> BasisMatrix:
    _require_natural_hadamard(h)
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    perm = np.arange(h.n)
    rng.shuffle(perm)
    return h.with_perm(perm, Ordering("random", int(seed)))


def make_basis(n: int, kind: str = HADAMARD, ordering: Ordering | str | None = None) -> BasisMatrix:
    """Build a basis from its CLI-level description."""
    if kind == CANONICAL:
        return canonical(n)
    if ordering is None:
        ordering = Ordering()
    elif isinstance(ordering, str):
        ordering = Ordering.parse(ordering)
    h = hadamard_natural(n)
    if ordering.kind == "walsh":
        return walsh_order(h)
    if ordering.kind == "cake":
        return cake_cutting_order(h)
    if ordering.kind == "random":
        return random_order(h, ordering.seed)
    return h


def reshape_2d(v) -> np.ndarray:
    """Row-major ``sqrt(n) x sqrt(n)`` layout of a length-``n`` vector."""
    v = np.asarray(v)
    n = v.shape[-1]
    side = int(round(np.sqrt(n)))
    if side * side != n or n == 0:
        raise ValueError(f"length {n} is not a perfect square")
    return v.reshape(v.shape[:-1] + (side, side))


def flatten_2d(grid) -> np.ndarray:
    grid = np.asarray(grid)
    return grid.reshape(grid.shape[:-2] + (-1,))


def fwht(v) -> np.ndarray:
    """Fast Walsh-Hadamard transform in natural (Sylvester) order.

    Works along the last axis and returns a new array; ``fwht(fwht(v)) == n*v``.
    """
    a = np.array(v, copy=True)
    if not np.issubdtype(a.dtype, np.inexact):
        a = a.astype(np.float64)
    n = a.shape[-1]
    if n < 1 or n & (n - 1):
        raise ValueError(f"fwht needs a power-of-two length, got {n}")
    lead = a.shape[:-1]
    h = 1
    while h < n:
        a = a.reshape(lead + (n // (2 * h), 2, h))
        lo = a[..., 0, :]
        hi = a[..., 1, :]
        a = np.stack((lo + hi, lo - hi), axis=-2)
        h *= 2
    return a.reshape(lead + (n,))


def export_permutation_csv(basis: BasisMatrix, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "perm"])
        for k, p in enumerate(basis.perm):
            w.writerow([k, int(p)])
    return path

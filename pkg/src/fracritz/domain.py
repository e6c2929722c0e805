"""Hypercube domains, the boundary factor h(x), and point sets on them."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def first_primes(n: int) -> np.ndarray:
    primes: list[int] = []
    k = 2
    while len(primes) < n:
        if all(k % p for p in primes if p * p <= k):
            primes.append(k)
        k += 1
    return np.array(primes, dtype=np.int64)


MAX_HALTON_DIM = 64
_PRIMES = first_primes(MAX_HALTON_DIM)


@dataclass(frozen=True)
class Hypercube:
    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        if len(lo) != len(hi) or not lo:
            raise ValueError("lower and upper bounds must have the same nonzero length")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError(f"degenerate hypercube: {lo} x {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def cube(cls, d: int, a: float = -1.0, b: float = 1.0) -> "Hypercube":
        return cls((a,) * d, (b,) * d)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.upper, self.lower)))

    def from_unit(self, u: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lower)
        return lo + u * (np.asarray(self.upper) - lo)

    def contains(self, x: np.ndarray, strict: bool = True) -> np.ndarray:
        x = np.asarray(x)
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        if strict:
            return np.all((x > lo) & (x < hi), axis=-1)
        return np.all((x >= lo) & (x <= hi), axis=-1)


def boundary_factor(dom: Hypercube, x) -> tuple[np.ndarray, np.ndarray]:
    """h(x) = prod_i (x_i - a_i)(b_i - x_i) and its gradient.

    Works on a single point ``(d,)`` or a stack ``(..., d)``.  h is positive
    inside, exactly zero on every face.
    """
    x = np.asarray(x, dtype=np.float64)
    lo, hi = np.asarray(dom.lower), np.asarray(dom.upper)
    factors = (x - lo) * (hi - x)
    dfactors = (hi - x) - (x - lo)
    h = np.prod(factors, axis=-1)
    d = x.shape[-1]
    grad = np.empty_like(x)
    for i in range(d):
        # product of the other factors; avoids dividing by a zero factor
        others = np.prod(np.delete(factors, i, axis=-1), axis=-1) if d > 1 else 1.0
        grad[..., i] = dfactors[..., i] * others
    return h, grad


def radical_inverse(indices: np.ndarray, base: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64).copy()
    result = np.zeros(indices.shape)
    scale = 1.0 / base
    while np.any(indices > 0):
        indices, digit = np.divmod(indices, base)
        result += digit * scale
        scale /= base
    return result


def halton_unit(n: int, d: int, skip: int = 0) -> np.ndarray:
    """Points ``skip+1 .. skip+n`` of the unscrambled Halton sequence in (0,1)^d."""
    if n < 1:
        raise ValueError("need at least one point")
    if d > MAX_HALTON_DIM:
        raise ValueError(f"Halton sequence supports d <= {MAX_HALTON_DIM}")
    idx = np.arange(skip + 1, skip + n + 1)
    return np.stack([radical_inverse(idx, int(p)) for p in _PRIMES[:d]], axis=1)


@dataclass
class McSample:
    points: np.ndarray
    skip: int = 0
    batch_count: int = 1
    batches: list = field(default_factory=list)

    def __post_init__(self):
        if not self.batches:
            self.batches = np.array_split(np.arange(len(self.points)), self.batch_count)
        self.batch_count = len(self.batches)

    def __len__(self) -> int:
        return len(self.points)

    def batch(self, k: int) -> "McSample":
        return McSample(self.points[self.batches[k]], self.skip)


def halton_points(dom: Hypercube, n: int, skip: int = 0, batch_count: int = 1) -> McSample:
    pts = dom.from_unit(halton_unit(n, dom.dim, skip))
    if batch_count < 1 or batch_count > n:
        raise ValueError(f"batch_count must be in [1, {n}]")
    return McSample(pts, skip, batch_count)


def uniform_test_points(dom: Hypercube, count: int, seed: int) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    return dom.from_unit(rng.random((count, dom.dim)))

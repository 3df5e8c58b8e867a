"""Lattice regions, the Hamiltonian eps*Laplacian + V and banded-matrix algebra.

Matrices are stored dense with a logical spread tag: the smallest radius r such
that ``A[y, x] == 0`` whenever ``|y - x| > r``.  Products and sums propagate
the tag and zero everything beyond it, so the zero pattern is a checked
contract rather than a hope.
"""

import csv
import math
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence, Tuple

import numpy as np

from .torus_model import (ShiftSystem, ThetaField, TorusPoint, hull_values, hull_values_exact,
                          orbit)

__all__ = [
    "SimpleRegion", "BandedMatrix", "WeightedNorms", "NotContraction",
    "NeumannBudgetExceeded", "build_laplacian", "build_hamiltonian",
    "hamiltonian_from_potential", "potential_values", "m_norm_vector",
    "m_norm_matrix", "column_m_norms", "band_product", "band_sum",
    "neumann_inverse", "identity", "diagonal", "dump_csv",
]


class SimpleRegion:
    """Box ``prod [lower_i, upper_i]`` of Z^d cut by half-lattices ``s (x_axis - c) >= 0``.

    Sites are enumerated in lexicographic order; ``index`` maps a site to its
    position.  ``metric`` is the lattice distance used by norms and spreads.
    """

    def __init__(self, lower: Sequence[int], upper: Sequence[int],
                 halfspaces: Sequence[Tuple[int, int, int]] = (), metric: str = "sup"):
        self.lower = tuple(int(a) for a in lower)
        self.upper = tuple(int(b) for b in upper)
        self.halfspaces = tuple((int(ax), int(s), int(c)) for ax, s, c in halfspaces)
        self.metric = metric
        self.d = len(self.lower)
        if self.d < 1 or len(self.upper) != self.d:
            raise ValueError("lower and upper must have equal positive length")
        if metric not in ("sup", "l1"):
            raise ValueError(f"unknown metric {metric!r}")
        for ax, s, _ in self.halfspaces:
            if not 0 <= ax < self.d or s not in (-1, 1):
                raise ValueError("half-lattice needs axis in range and sign +-1")
        axes = [np.arange(a, b + 1) for a, b in zip(self.lower, self.upper)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.d)
        keep = np.array([self.contains(p) for p in grid], dtype=bool)
        self.sites = grid[keep].astype(np.int64)
        self.sites.setflags(write=False)
        if len(self.sites) == 0:
            raise ValueError("region is empty")
        self._index = {tuple(p): i for i, p in enumerate(self.sites.tolist())}
        if not self._connected():
            raise ValueError("region is not connected")
        self._dist = None

    @classmethod
    def segment(cls, a: int, b: int) -> "SimpleRegion":
        return cls((a,), (b,))

    @classmethod
    def box(cls, lower, upper, metric: str = "sup") -> "SimpleRegion":
        return cls(lower, upper, (), metric)

    def _key(self):
        return (self.lower, self.upper, self.halfspaces, self.metric)

    def __eq__(self, other):
        return isinstance(other, SimpleRegion) and self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    def __repr__(self):
        return f"SimpleRegion(lower={self.lower}, upper={self.upper}, halfspaces={self.halfspaces})"

    def __len__(self):
        return len(self.sites)

    @property
    def size(self) -> int:
        return len(self.sites)

    def contains(self, site) -> bool:
        site = tuple(int(v) for v in site)
        if len(site) != self.d:
            return False
        if any(not a <= v <= b for v, a, b in zip(site, self.lower, self.upper)):
            return False
        return all(s * (site[ax] - c) >= 0 for ax, s, c in self.halfspaces)

    def index(self, site) -> int:
        key = tuple(int(v) for v in np.atleast_1d(site))
        try:
            return self._index[key]
        except KeyError:
            raise ValueError(f"site {key} not in region") from None

    def site(self, i: int) -> Tuple[int, ...]:
        return tuple(self.sites[i].tolist())

    def _connected(self) -> bool:
        seen = {0}
        queue = deque([0])
        while queue:
            i = queue.popleft()
            p = self.sites[i]
            for ax in range(self.d):
                for step in (-1, 1):
                    q = p.copy()
                    q[ax] += step
                    j = self._index.get(tuple(q.tolist()))
                    if j is not None and j not in seen:
                        seen.add(j)
                        queue.append(j)
        return len(seen) == len(self.sites)

    def distances(self) -> np.ndarray:
        """Matrix of lattice distances |y - x| between all site pairs."""
        if self._dist is None:
            diff = np.abs(self.sites[:, None, :] - self.sites[None, :, :])
            dist = diff.max(axis=-1) if self.metric == "sup" else diff.sum(axis=-1)
            dist = dist.astype(np.int64)
            dist.setflags(write=False)
            self._dist = dist
        return self._dist

    def distances_from(self, site) -> np.ndarray:
        return self.distances()[self.index(site)]

    @property
    def diameter(self) -> int:
        return int(self.distances().max())


@dataclass(frozen=True)
class WeightedNorms:
    """Exponentially weighted norms with decay parameter m (m = 0 gives l1)."""
    m: float

    def __post_init__(self):
        if not self.m >= 0 or math.isinf(self.m):
            raise ValueError("m must be a finite non-negative real")

    def weights(self, region: SimpleRegion) -> np.ndarray:
        cache = region.__dict__.setdefault("_weights", {})
        w = cache.get(self.m)
        if w is None:
            w = np.exp(self.m * region.distances().astype(float))
            w.setflags(write=False)
            cache[self.m] = w
        return w


class NotContraction(ArithmeticError):
    def __init__(self, norm: float):
        super().__init__(f"Neumann series needs |||D|||_m < 1, got {norm:.6g}")
        self.norm = norm


class NeumannBudgetExceeded(ArithmeticError):
    def __init__(self, terms: int, last_norm: float):
        super().__init__(f"Neumann series not below tolerance after {terms} terms "
                         f"(last term norm {last_norm:.3g})")
        self.terms = terms
        self.last_norm = last_norm


@dataclass(frozen=True, eq=False)
class BandedMatrix:
    """Region-indexed matrix ``data[y, x]`` with spread tag.

    ``exact_diagonal`` optionally carries the diagonal as exact rationals; the
    float diagonal is then its correctly rounded value.
    """
    region: SimpleRegion
    data: np.ndarray
    spread: int
    exact_diagonal: Optional[Tuple[Fraction, ...]] = None

    def __post_init__(self):
        data = np.array(self.data, dtype=float)
        n = self.region.size
        if data.shape != (n, n):
            raise ValueError(f"matrix shape {data.shape} does not match region size {n}")
        spread = int(min(self.spread, self.region.diameter))
        if spread < 0:
            raise ValueError("spread must be non-negative")
        if np.any(data[self.region.distances() > spread] != 0.0):
            raise ValueError(f"entries beyond stored spread {spread}")
        if self.exact_diagonal is not None:
            exact = tuple(Fraction(v) for v in self.exact_diagonal)
            if len(exact) != n:
                raise ValueError("exact diagonal has the wrong length")
            if any(float(e) != data[i, i] for i, e in enumerate(exact)):
                raise ValueError("float diagonal is not the rounding of the exact diagonal")
            object.__setattr__(self, "exact_diagonal", exact)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spread", spread)

    @classmethod
    def from_dense(cls, region: SimpleRegion, data: np.ndarray,
                   spread: Optional[int] = None) -> "BandedMatrix":
        """Wrap a dense array; with ``spread`` given, entries beyond it are zeroed."""
        data = np.array(data, dtype=float)
        dist = region.distances()
        if spread is None:
            nz = dist[data != 0.0]
            spread = int(nz.max()) if nz.size else 0
        else:
            data[dist > spread] = 0.0
        return cls(region, data, spread)

    @property
    def T(self) -> "BandedMatrix":
        return BandedMatrix(self.region, self.data.T, self.spread)

    def diag(self) -> np.ndarray:
        return np.diag(self.data).copy()

    def off_diagonal(self) -> "BandedMatrix":
        data = self.data.copy()
        np.fill_diagonal(data, 0.0)
        return BandedMatrix(self.region, data, self.spread)

    def diagonal_part(self) -> "BandedMatrix":
        return BandedMatrix(self.region, np.diag(np.diag(self.data)), 0)

    def scaled(self, c: float) -> "BandedMatrix":
        return BandedMatrix(self.region, c * self.data, self.spread)

    def truncated(self, radius: float) -> "BandedMatrix":
        """Zero all entries with |y - x| > radius."""
        data = self.data.copy()
        data[self.region.distances() > radius] = 0.0
        return BandedMatrix(self.region, data, min(self.spread, int(math.floor(radius))))

    def shifted(self, t) -> "BandedMatrix":
        """``self + t * Identity``, computed on the exact diagonal when available."""
        exact = self.exact_diagonal
        if exact is None:
            exact = tuple(Fraction(v) for v in np.diag(self.data))
        new = tuple(e + Fraction(t) for e in exact)
        data = self.data.copy()
        np.fill_diagonal(data, [float(e) for e in new])
        return BandedMatrix(self.region, data, self.spread, new)

    def __add__(self, other: "BandedMatrix") -> "BandedMatrix":
        return band_sum(self, other)

    def __sub__(self, other: "BandedMatrix") -> "BandedMatrix":
        return band_sum(self, other, -1.0)

    def __matmul__(self, other: "BandedMatrix") -> "BandedMatrix":
        return band_product(self, other)

    def true_spread(self) -> int:
        nz = self.region.distances()[self.data != 0.0]
        return int(nz.max()) if nz.size else 0

    def is_symmetric(self) -> bool:
        return bool(np.array_equal(self.data, self.data.T))


def identity(region: SimpleRegion) -> BandedMatrix:
    return BandedMatrix(region, np.eye(region.size), 0)


def diagonal(region: SimpleRegion, values) -> BandedMatrix:
    return BandedMatrix(region, np.diag(np.asarray(values, dtype=float)), 0)


def _check_same(A: BandedMatrix, B: BandedMatrix):
    if A.region != B.region:
        raise ValueError("region mismatch")


def band_product(A: BandedMatrix, B: BandedMatrix) -> BandedMatrix:
    _check_same(A, B)
    spread = min(A.spread + B.spread, A.region.diameter)
    data = A.data @ B.data
    data[A.region.distances() > spread] = 0.0
    return BandedMatrix(A.region, data, spread)


def band_sum(A: BandedMatrix, B: BandedMatrix, beta: float = 1.0) -> BandedMatrix:
    """``A + beta * B``."""
    _check_same(A, B)
    return BandedMatrix(A.region, A.data + beta * B.data, max(A.spread, B.spread))


def m_norm_vector(f, norms: WeightedNorms, x, region: SimpleRegion) -> float:
    """Sum over y of exp(m |y - x|) |f(y)|."""
    w = norms.weights(region)[region.index(x)]
    return float(np.sum(w * np.abs(np.asarray(f, dtype=float))))


def column_m_norms(A: BandedMatrix, norms: WeightedNorms) -> np.ndarray:
    """m-norm of each column x of A, centred at x."""
    return np.sum(norms.weights(A.region) * np.abs(A.data), axis=0)


def m_norm_matrix(A: BandedMatrix, norms: WeightedNorms) -> float:
    """Maximum over columns of the column m-norm."""
    return float(column_m_norms(A, norms).max())


def neumann_inverse(A: BandedMatrix, norms: WeightedNorms, tol: float = 1e-14,
                    max_terms: int = 500) -> BandedMatrix:
    """Inverse of ``A = I + D`` as the partial sum of ``(-D)^k``.

    Summation stops after the first term whose m-norm is below ``tol``, so the
    residual ``|||A X - I|||_m`` is at most ``tol / (1 - |||D|||_m)``.
    """
    eye = identity(A.region)
    D = A - eye
    normD = m_norm_matrix(D, norms)
    if normD >= 1.0:
        raise NotContraction(normD)
    negD = D.scaled(-1.0)
    result = eye
    term = eye
    for _ in range(max_terms):
        term = band_product(negD, term)
        result = band_sum(result, term)
        last = m_norm_matrix(term, norms)
        if last < tol:
            return result
    raise NeumannBudgetExceeded(max_terms, last)


def build_laplacian(region: SimpleRegion) -> BandedMatrix:
    """Adjacency of nearest neighbours (|y - x|_1 = 1) inside the region."""
    diff = np.abs(region.sites[:, None, :] - region.sites[None, :, :]).sum(axis=-1)
    return BandedMatrix(region, (diff == 1).astype(float), 1)


def potential_values(region: SimpleRegion, sys: ShiftSystem, omega: TorusPoint,
                     theta: ThetaField, N: int) -> np.ndarray:
    return hull_values(theta, orbit(sys, region.sites, omega), N)


def hamiltonian_from_potential(eps: float, region: SimpleRegion, potential) -> BandedMatrix:
    """``eps * Laplacian + diag(potential)``; ``potential`` may hold Fractions."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    exact = tuple(Fraction(v) for v in potential)
    data = eps * build_laplacian(region).data
    np.fill_diagonal(data, [float(e) for e in exact])
    return BandedMatrix(region, data, 1 if eps > 0 else 0, exact)


def build_hamiltonian(eps: float, region: SimpleRegion, sys: ShiftSystem, omega: TorusPoint,
                      theta: ThetaField, N: int, shift: float = 0.0) -> BandedMatrix:
    """``eps * Laplacian + V_N`` with V_N(x) = v_N(T^x omega, theta), plus ``shift``."""
    exact = hull_values_exact(theta, orbit(sys, region.sites, omega), N)
    if shift:
        exact = [e + Fraction(shift) for e in exact]
    return hamiltonian_from_potential(eps, region, exact)


def dump_csv(A: BandedMatrix, path) -> None:
    """Write nonzero entries as (row, col, value) with row/col given as site tuples."""
    rows, cols = np.nonzero(A.data)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "value"])
        for y, x in zip(rows.tolist(), cols.tolist()):
            w.writerow([" ".join(map(str, A.region.site(y))),
                        " ".join(map(str, A.region.site(x))), repr(float(A.data[y, x]))])

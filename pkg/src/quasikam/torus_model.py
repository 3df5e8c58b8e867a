"""Toral shifts, dyadic partitions of the torus and the hull of the potential.

The potential at lattice site ``x`` is ``v(T^x omega, theta)`` where ``T`` is a
toral shift and ``v`` is a super-exponentially weighted sum of indicator
functions of dyadic cubes with random coefficients ``theta_{n,k}``.
"""

import math
import zlib
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "TorusPoint", "ShiftSystem", "DyadicCube", "ThetaField", "UpaReport",
    "DivReport", "torus_distance", "shift_action", "orbit", "check_upa",
    "check_div", "cube_index", "cube_indices", "eval_hull", "hull_values", "hull_values_exact",
    "truncation_error_bound", "tn_of_L", "n_hat", "amplitude",
    "derive_seed", "separated_at_level", "GOLDEN",
]

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0

_U64 = np.uint64
_GAMMA = _U64(0x9E3779B97F4A7C15)
_M1 = _U64(0xBF58476D1CE4E5B9)
_M2 = _U64(0x94D049BB133111EB)


def _wrap(values):
    """Reduce reals mod 1 into [0, 1), guarding the 1.0 produced by -tiny % 1."""
    out = np.mod(np.asarray(values, dtype=float), 1.0)
    out[out >= 1.0] = 0.0
    return out


@dataclass(frozen=True)
class TorusPoint:
    coords: Tuple[float, ...]

    def __post_init__(self):
        coords = tuple(float(c) for c in self.coords)
        if len(coords) < 1:
            raise ValueError("torus point needs at least one coordinate")
        for c in coords:
            if not 0.0 <= c < 1.0:
                raise ValueError(f"torus coordinate {c!r} outside [0, 1)")
        object.__setattr__(self, "coords", coords)

    @classmethod
    def wrap(cls, values) -> "TorusPoint":
        return cls(tuple(_wrap(np.atleast_1d(values)).tolist()))

    @property
    def nu(self) -> int:
        return len(self.coords)

    def as_array(self) -> np.ndarray:
        return np.array(self.coords, dtype=float)


@dataclass(frozen=True)
class ShiftSystem:
    """Shift ``T^x omega = omega + sum_i x_i alpha_i`` with aperiodicity constants.

    ``freqs`` holds ``d`` frequency vectors of length ``nu``.
    """
    nu: int
    d: int
    freqs: Tuple[Tuple[float, ...], ...]
    upa_A: int = 2
    upa_CA: int = 4
    div_A: Optional[int] = None
    div_CA: Optional[int] = None

    def __post_init__(self):
        if self.nu < 1 or self.d < 1:
            raise ValueError("need nu >= 1 and d >= 1")
        freqs = tuple(tuple(float(a) for a in f) for f in self.freqs)
        if len(freqs) != self.d or any(len(f) != self.nu for f in freqs):
            raise ValueError("freqs must be d vectors of length nu")
        for f in freqs:
            for a in f:
                if not 0.0 <= a < 1.0:
                    raise ValueError(f"frequency {a!r} outside [0, 1)")
        if self.upa_A < 1 or self.upa_CA < 1:
            raise ValueError("UPA constants must be positive integers")
        object.__setattr__(self, "freqs", freqs)

    @classmethod
    def golden(cls, upa_A: int = 2, upa_CA: int = 4) -> "ShiftSystem":
        return cls(nu=1, d=1, freqs=((GOLDEN,),), upa_A=upa_A, upa_CA=upa_CA)

    def freq_matrix(self) -> np.ndarray:
        return np.array(self.freqs, dtype=float).reshape(self.d, self.nu)


@dataclass(frozen=True)
class DyadicCube:
    level: int
    index: Tuple[int, ...]

    def __post_init__(self):
        if self.level < 0:
            raise ValueError("cube level must be non-negative")
        side = 1 << self.level
        for l in self.index:
            if not 0 <= l < side:
                raise ValueError(f"cube index {l} outside [0, {side - 1}]")

    @property
    def flat(self) -> int:
        side = 1 << self.level
        return sum(l * side ** j for j, l in enumerate(self.index))

    def contains(self, p: TorusPoint) -> bool:
        side = 1 << self.level
        return all(l <= c * side < l + 1 for l, c in zip(self.index, p.coords))


def torus_distance(p: TorusPoint, q: TorusPoint) -> float:
    if p.nu != q.nu:
        raise ValueError(f"dimension mismatch: {p.nu} vs {q.nu}")
    return max(min(abs(a - b), 1.0 - abs(a - b)) for a, b in zip(p.coords, q.coords))


def _circle_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = np.abs(a - b)
    return np.minimum(diff, 1.0 - diff).max(axis=-1)


def shift_action(sys: ShiftSystem, x: Sequence[int], omega: TorusPoint) -> TorusPoint:
    x = np.asarray(x, dtype=np.int64).reshape(-1)
    if x.size != sys.d:
        raise ValueError(f"lattice vector must have {sys.d} components")
    return TorusPoint(tuple(orbit(sys, x[None, :], omega)[0].tolist()))


def orbit(sys: ShiftSystem, sites: np.ndarray, omega: TorusPoint) -> np.ndarray:
    """Torus coordinates of ``T^x omega`` for every row ``x`` of ``sites``."""
    sites = np.asarray(sites, dtype=np.int64).reshape(-1, sys.d)
    if omega.nu != sys.nu:
        raise ValueError("omega has the wrong torus dimension")
    return _wrap(omega.as_array()[None, :] + sites.astype(float) @ sys.freq_matrix())


@dataclass(frozen=True)
class UpaReport:
    min_ratio: float
    passed: bool
    pair: Optional[Tuple[Tuple[int, ...], Tuple[int, ...]]]


def _ball(d: int, R: int) -> np.ndarray:
    axes = [np.arange(-R, R + 1)] * d
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)


def check_upa(sys: ShiftSystem, omega: TorusPoint, R: int) -> UpaReport:
    """Minimum of dist(T^x w, T^y w) * C_A * |x - y|^A over the sup-ball of radius R."""
    if R < 1:
        raise ValueError("radius must be >= 1")
    pts = _ball(sys.d, R)
    orb = orbit(sys, pts, omega)
    best, pair = math.inf, None
    for i in range(len(pts) - 1):
        sep = np.abs(pts[i + 1:] - pts[i]).max(axis=1).astype(float)
        ratio = _circle_dist(orb[i + 1:], orb[i]) * sys.upa_CA * sep ** sys.upa_A
        k = int(np.argmin(ratio))
        if ratio[k] < best:
            best = float(ratio[k])
            pair = (tuple(pts[i].tolist()), tuple(pts[i + 1 + k].tolist()))
    return UpaReport(best, best >= 1.0, pair)


@dataclass(frozen=True)
class DivReport:
    max_expansion: float
    passed: bool


def check_div(sys: ShiftSystem, points: Sequence[TorusPoint], R: int) -> DivReport:
    """Tempered divergence. Shifts are isometries, so the expansion is 1."""
    worst = 0.0
    shifts = _ball(sys.d, R)
    for p in points:
        for q in points:
            d0 = torus_distance(p, q)
            if d0 == 0.0:
                continue
            dp = _circle_dist(orbit(sys, shifts, p), orbit(sys, shifts, q))
            worst = max(worst, float(dp.max()) / d0)
    return DivReport(worst, True)


def cube_index(n: int, omega: TorusPoint) -> DyadicCube:
    if n < 0:
        raise ValueError("level must be non-negative")
    side = 1 << n
    return DyadicCube(n, tuple(min(int(math.floor(c * side)), side - 1) for c in omega.coords))


def cube_indices(n: int, coords: np.ndarray) -> np.ndarray:
    """Flat cube index at level n for each row of torus coordinates."""
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    side = 1 << n
    l = np.minimum(np.floor(coords * side).astype(np.int64), side - 1)
    weights = side ** np.arange(coords.shape[1], dtype=np.int64)
    return l @ weights


def _splitmix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = z + _GAMMA
        z = (z ^ (z >> _U64(30))) * _M1
        z = (z ^ (z >> _U64(27))) * _M2
    return z ^ (z >> _U64(31))


def _hash_uniform(seed: int, n: int, ks: np.ndarray) -> np.ndarray:
    ks = np.asarray(ks, dtype=np.int64).astype(_U64)
    z = _splitmix(np.full(ks.shape, seed, dtype=_U64))
    z = _splitmix(z ^ _U64(n))
    z = _splitmix(z ^ ks)
    return (z >> _U64(11)).astype(float) * 2.0 ** -53


def derive_seed(master: int, tag: str, *keys: int) -> int:
    """Deterministic 64-bit child seed for a labelled sub-experiment."""
    z = _splitmix(np.array([master], dtype=_U64))
    z = _splitmix(z ^ _U64(zlib.crc32(tag.encode())))
    for k in keys:
        z = _splitmix(z ^ _U64(k & 0xFFFFFFFFFFFFFFFF))
    return int(z[0])


def amplitude(n: int, decay_b: float) -> float:
    return math.exp(-2.0 * decay_b * n * n)


@dataclass(frozen=True)
class ThetaField:
    """Coefficients theta_{n,k} in [0, 1) from a counter-based hash of (seed, n, k).

    ``overrides`` replaces individual coefficients; ``constant`` makes every
    coefficient equal (useful for degenerate test fields).
    """
    master_seed: int
    max_level: int
    decay_b: float = 1.0
    overrides: Tuple[Tuple[Tuple[int, int], float], ...] = ()
    constant: Optional[float] = None

    def __post_init__(self):
        if not 0 <= self.master_seed < 2 ** 64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")
        if self.max_level < 0:
            raise ValueError("max_level must be non-negative")
        if self.decay_b <= 0:
            raise ValueError("decay_b must be positive")
        for _, v in self.overrides:
            if not 0.0 <= v <= 1.0:
                raise ValueError("theta override outside [0, 1]")
        if self.constant is not None and not 0.0 <= self.constant <= 1.0:
            raise ValueError("constant theta outside [0, 1]")

    def amplitude(self, n: int) -> float:
        return amplitude(n, self.decay_b)

    def value(self, n: int, k: int) -> float:
        return float(self.values(n, np.array([k]))[0])

    def values(self, n: int, ks: np.ndarray) -> np.ndarray:
        ks = np.asarray(ks, dtype=np.int64)
        if self.constant is not None:
            out = np.full(ks.shape, self.constant, dtype=float)
        else:
            out = _hash_uniform(self.master_seed, n, ks)
        for (on, ok), v in self.overrides:
            if on == n:
                out[ks == ok] = v
        return out

    def with_override(self, n: int, k: int, value: float) -> "ThetaField":
        kept = tuple(o for o in self.overrides if o[0] != (n, k))
        return ThetaField(self.master_seed, self.max_level, self.decay_b,
                          kept + (((n, k), float(value)),), self.constant)

    def with_seed(self, seed: int) -> "ThetaField":
        return ThetaField(seed, self.max_level, self.decay_b, (), self.constant)


def hull_values(theta: ThetaField, coords: np.ndarray, N: int) -> np.ndarray:
    """v_N at each row of torus coordinates, summed in ascending level order."""
    if N > theta.max_level:
        raise ValueError(f"level {N} exceeds max_level {theta.max_level}")
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    acc = np.zeros(coords.shape[0])
    for n in range(N + 1):
        acc = acc + theta.amplitude(n) * theta.values(n, cube_indices(n, coords))
    return acc


def hull_values_exact(theta: ThetaField, coords: np.ndarray, N: int) -> List[Fraction]:
    """Exact rational sum of the rounded terms a_n * theta_{n,k}.

    Deep levels fall below the resolution of a float sum of order-one values;
    the exact sum keeps them, so sites that agree down to level n still differ.
    """
    if N > theta.max_level:
        raise ValueError(f"level {N} exceeds max_level {theta.max_level}")
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    # Every term is a dyadic rational: sum integer numerators over 2^shift.
    terms = []
    for n in range(N + 1):
        pa, qa = theta.amplitude(n).as_integer_ratio()
        vals = theta.values(n, cube_indices(n, coords)).tolist()
        terms.append((pa, qa.bit_length() - 1, [v.as_integer_ratio() for v in vals]))
    shift = max(ea + q.bit_length() - 1 for _, ea, r in terms for _, q in r)
    acc = [0] * coords.shape[0]
    for pa, ea, ratios in terms:
        acc = [s + ((pa * p) << (shift - ea - q.bit_length() + 1))
               for s, (p, q) in zip(acc, ratios)]
    return [Fraction(s, 1 << shift) for s in acc]


def eval_hull(theta: ThetaField, omega: TorusPoint, N: int) -> float:
    return float(hull_values(theta, omega.as_array()[None, :], N)[0])


def truncation_error_bound(theta, N: int) -> float:
    """Tail sum of the amplitudes beyond level N (terms below 1e-300 dropped).

    ``theta`` is a ThetaField or just its decay constant.
    """
    decay_b = theta.decay_b if isinstance(theta, ThetaField) else float(theta)
    if N < 0:
        raise ValueError("N must be non-negative")
    terms = []
    n = N + 1
    while True:
        a = amplitude(n, decay_b)
        if a < 1e-300:
            break
        terms.append(a)
        n += 1
    return math.fsum(terms)


def tn_of_L(L: int) -> int:
    if L < 2:
        raise ValueError("L must be >= 2")
    return math.ceil(math.log(L) ** 2)


def n_hat(R: int, sys: ShiftSystem) -> int:
    """Smallest n >= 1 with 2^-n <= 1 / (2 C_A R^A), in exact integer arithmetic."""
    if R < 1:
        raise ValueError("R must be >= 1")
    target = 2 * sys.upa_CA * R ** sys.upa_A
    return max(1, (target - 1).bit_length())


def separated_at_level(n: int, coords: Iterable[Sequence[float]]) -> bool:
    """True when the given torus points fall in pairwise distinct level-n cubes."""
    idx = cube_indices(n, np.asarray(list(coords), dtype=float))
    return len(np.unique(idx)) == len(idx)

"""Dense-diagonalization oracle, localization checks and Monte Carlo eigenvalue statistics."""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .kam_engine import KamState
from .lattice_algebra import BandedMatrix, SimpleRegion
from .model import ModelSpec
from .torus_model import derive_seed

__all__ = [
    "EigenSystem", "CenterMap", "McEstimate", "DecayProfile", "OracleComparison",
    "LocalizationFailure", "NoUnimodalCenter", "DuplicateCenter", "AmbiguousMatch",
    "OracleCapExceeded", "exact_diagonalize", "center_bijection", "decay_profile",
    "kam_vs_exact", "spacing_mc", "wegner_mc", "wegner_sweep", "minami_mc",
    "minami_sweep", "SpacingResult", "WegnerResult", "MinamiSweep", "labelled_levels",
    "ORACLE_CAP",
]

ORACLE_CAP = 4096


class OracleCapExceeded(ValueError):
    pass


class LocalizationFailure(RuntimeError):
    def __init__(self, site, message):
        super().__init__(message)
        self.site = site


class NoUnimodalCenter(LocalizationFailure):
    def __init__(self, site):
        super().__init__(site, f"no eigenvector carries more than half its mass at {site}")


class DuplicateCenter(LocalizationFailure):
    def __init__(self, site):
        super().__init__(site, f"several eigenvectors carry more than half their mass at {site}")


class AmbiguousMatch(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class EigenSystem:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    region: SimpleRegion
    center: Fraction = Fraction(0)

    def residuals(self, H: BandedMatrix) -> np.ndarray:
        r = H.data @ self.eigenvectors - self.eigenvectors * self.eigenvalues[None, :]
        return np.linalg.norm(r, axis=0)

    def orthonormality_error(self) -> float:
        V = self.eigenvectors
        return float(np.max(np.abs(V.T @ V - np.eye(V.shape[1]))))


def exact_diagonalize(H: BandedMatrix, cap: int = ORACLE_CAP) -> EigenSystem:
    """Full eigendecomposition of H by a dense symmetric solver.

    The diagonal is first centred by its exact mean, so H and H + t I present
    the solver with the same matrix: eigenvectors agree bitwise and eigenvalues
    differ by t up to one rounding.  Each eigenvector is signed so that its
    largest-magnitude entry is positive.
    """
    n = H.region.size
    if n > cap:
        raise OracleCapExceeded(f"region of {n} sites exceeds oracle cap {cap}")
    if not H.is_symmetric():
        raise ValueError("H must be symmetric")
    exact = H.exact_diagonal
    if exact is None:
        exact = [Fraction(v) for v in np.diag(H.data).tolist()]
    c = sum(exact, Fraction(0)) / n
    A = H.data.copy()
    np.fill_diagonal(A, [float(e - c) for e in exact])
    w, V = np.linalg.eigh(A)
    peak = np.argmax(np.abs(V), axis=0)
    V = V * np.sign(V[peak, np.arange(n)])[None, :]
    vals = np.array([float(Fraction(x) + c) for x in w.tolist()])
    V.setflags(write=False)
    vals.setflags(write=False)
    return EigenSystem(vals, V, H.region, c)


@dataclass(frozen=True, eq=False)
class CenterMap:
    """``eig_of_site[i]`` is the eigenpair centred at region site i."""
    eig_of_site: np.ndarray
    peak_mass: np.ndarray

    @property
    def site_of_eig(self) -> np.ndarray:
        inv = np.empty_like(self.eig_of_site)
        inv[self.eig_of_site] = np.arange(len(self.eig_of_site))
        return inv


def center_bijection(es: EigenSystem) -> CenterMap:
    P = es.eigenvectors ** 2
    heavy = P > 0.5
    counts = heavy.sum(axis=1)
    for i, c in enumerate(counts.tolist()):
        if c == 0:
            raise NoUnimodalCenter(es.region.site(i))
        if c > 1:
            raise DuplicateCenter(es.region.site(i))
    eig = np.argmax(heavy, axis=1)
    if len(np.unique(eig)) != len(eig):
        raise DuplicateCenter(None)
    return CenterMap(eig, P[np.arange(len(eig)), eig])


def labelled_levels(es: EigenSystem, cmap: CenterMap) -> np.ndarray:
    """Eigenvalue labelled by its localization centre, indexed like the region sites."""
    return es.eigenvalues[cmap.eig_of_site]


@dataclass(frozen=True)
class DecayProfile:
    rates: np.ndarray
    violations: np.ndarray

    @property
    def min_rate(self) -> float:
        r = self.rates[~np.isnan(self.rates)]
        return float(r.min()) if r.size else math.nan

    @property
    def max_violation(self) -> float:
        """Largest log-excess of |phi_x(y)| over exp(-rate |y - x|); <= 0 means the envelope holds."""
        v = self.violations[~np.isnan(self.violations)]
        return float(v.max()) if v.size else 0.0


def decay_profile(es: EigenSystem, cmap: CenterMap, floor: float = 1e-14) -> DecayProfile:
    """Least-squares rate of ln|phi_x(y)| ~ -rate |y - x| through the origin."""
    dist = es.region.distances()
    n = len(cmap.eig_of_site)
    rates = np.full(n, math.nan)
    viol = np.full(n, math.nan)
    for i in range(n):
        phi = np.abs(es.eigenvectors[:, cmap.eig_of_site[i]])
        d = dist[i].astype(float)
        keep = (phi > floor) & (d > 0)
        if not keep.any():
            continue
        ln = np.log(phi[keep])
        rate = -float(np.dot(d[keep], ln) / np.dot(d[keep], d[keep]))
        rates[i] = rate
        viol[i] = float(np.max(ln + rate * d[keep]))
    return DecayProfile(rates, viol)


@dataclass(frozen=True)
class OracleComparison:
    lam_error: np.ndarray
    overlap: np.ndarray
    matched: np.ndarray
    psi_l2: np.ndarray

    @property
    def bound_ok(self) -> np.ndarray:
        return self.lam_error <= self.psi_l2 + 1e-10

    @property
    def max_error(self) -> float:
        return float(self.lam_error.max())

    @property
    def min_overlap(self) -> float:
        return float(self.overlap.min())


def kam_vs_exact(state: KamState, es: EigenSystem) -> OracleComparison:
    """Match each KAM column to the exact eigenvector of largest overlap."""
    if state.region != es.region:
        raise ValueError("region mismatch")
    ov = np.abs(state.U.data.T @ es.eigenvectors)
    matched = np.argmax(ov, axis=1)
    best = ov[np.arange(len(matched)), matched]
    if best.min() < 0.6:
        i = int(np.argmin(best))
        raise AmbiguousMatch(f"column at site {state.region.site(i)} has best overlap {best[i]:.3f}")
    lam = state.lam_exact
    err = np.array([abs(float(lam[i] - Fraction(es.eigenvalues[k])))
                    for i, k in enumerate(matched.tolist())])
    psi = np.linalg.norm(state.Psi.data, axis=0)
    return OracleComparison(err, best, matched, psi)


@dataclass(frozen=True)
class McEstimate:
    trials: int
    successes: int

    @property
    def p_hat(self) -> float:
        return self.successes / self.trials if self.trials else math.nan

    @property
    def stderr(self) -> float:
        p = self.p_hat
        return math.sqrt(p * (1.0 - p) / self.trials) if self.trials else math.nan

    def to_dict(self):
        return {"trials": self.trials, "successes": self.successes,
                "p_hat": self.p_hat, "stderr": self.stderr}


def _sample(model: ModelSpec, seed: int):
    """(all eigenvalues, labelled levels or None) for one theta sample."""
    es = exact_diagonalize(model.hamiltonian(model.theta(seed)))
    try:
        cmap = center_bijection(es)
    except LocalizationFailure:
        return es.eigenvalues, None
    return es.eigenvalues, labelled_levels(es, cmap)


def _run_trials(model: ModelSpec, tag: str, trials: int, fn: Callable, workers: int = 1,
                key: int = 0) -> list:
    seeds = [derive_seed(model.master_seed, tag, key, t) for t in range(trials)]
    work = lambda s: fn(*_sample(model, s))
    if workers <= 1:
        return [work(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, seeds))


@dataclass(frozen=True)
class SpacingResult:
    s_grid: Tuple[float, ...]
    estimates: Tuple[McEstimate, ...]
    failures: int
    trials: int
    radius: int
    kappa: float
    r2: float

    def to_dict(self):
        return {"s_grid": list(self.s_grid), "estimates": [e.to_dict() for e in self.estimates],
                "failures": self.failures, "trials": self.trials, "radius": self.radius,
                "kappa": self.kappa, "r2": self.r2}


def _fit_through_origin(x: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    kappa = float(np.dot(x, y) / np.dot(x, x))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum((y - kappa * x) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else -math.inf)
    return kappa, r2


def spacing_mc(model: ModelSpec, s_grid: Sequence[float], trials: int, L: int = 4,
               workers: int = 1) -> SpacingResult:
    """P{min gap between centre-matched levels within distance min(L^2, diam) <= s}."""
    if trials < 100:
        raise ValueError("spacing_mc needs at least 100 trials")
    region = model.region
    radius = min(L * L, region.diameter)
    dist = region.distances()
    iu = np.nonzero(np.triu((dist >= 1) & (dist <= radius), 1))

    def stat(_, levels):
        if levels is None:
            return None
        return float(np.min(np.abs(levels[iu[0]] - levels[iu[1]])))

    gaps = _run_trials(model, "spacing", trials, stat, workers)
    ok = np.array([g for g in gaps if g is not None])
    s = np.asarray(s_grid, dtype=float)
    ests = tuple(McEstimate(len(ok), int(np.sum(ok <= v))) for v in s)
    p = np.array([e.p_hat for e in ests])
    pos = s > 0
    if len(ok) and np.any(pos):
        kappa, r2 = _fit_through_origin(s[pos], p[pos])
    else:
        kappa, r2 = math.nan, math.nan
    return SpacingResult(tuple(s.tolist()), ests, trials - len(ok), trials, radius, kappa, r2)


@dataclass(frozen=True)
class WegnerResult:
    interval: Tuple[float, float]
    trials: int
    mean_count: float
    count_stderr: float
    any_level: McEstimate
    double_rate: float
    failures: int

    def to_dict(self):
        return {"interval": list(self.interval), "trials": self.trials,
                "mean_count": self.mean_count, "count_stderr": self.count_stderr,
                "any_level": self.any_level.to_dict(), "double_rate": self.double_rate,
                "failures": self.failures}


def wegner_mc(model: ModelSpec, interval: Tuple[float, float], trials: int,
              sites: Optional[Sequence] = None, workers: int = 1, key: int = 0) -> WegnerResult:
    """Eigenvalue counts in an interval.

    With ``sites`` given, only levels whose localization centre is one of the
    sites are counted (samples without a centre bijection are then excluded).
    """
    lo, hi = float(interval[0]), float(interval[1])
    if not hi > lo:
        raise ValueError("interval must have positive length")
    idx = None if sites is None else np.array([model.region.index(s) for s in sites])

    def stat(values, levels):
        if idx is None:
            vals = values
        elif levels is None:
            return None
        else:
            vals = levels[idx]
        return int(np.sum((vals >= lo) & (vals <= hi)))

    counts = [c for c in _run_trials(model, "wegner", trials, stat, workers, key) if c is not None]
    c = np.array(counts, dtype=float)
    n = len(c)
    mean = float(c.mean()) if n else math.nan
    sd = float(c.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    return WegnerResult((lo, hi), n, mean, sd, McEstimate(n, int(np.sum(c >= 1))),
                        float(np.mean(c >= 2)) if n else math.nan, trials - n)


def wegner_sweep(model: ModelSpec, center: float, widths: Sequence[float], trials: int,
                 sites: Optional[Sequence] = None, workers: int = 1) -> List[WegnerResult]:
    return [wegner_mc(model, (center - w / 2, center + w / 2), trials, sites, workers, key=i)
            for i, w in enumerate(widths)]


@dataclass(frozen=True)
class MinamiResult:
    estimate: McEstimate
    failures: int
    trials: int

    @property
    def failure_rate(self) -> float:
        return self.failures / self.trials


def minami_mc(model: ModelSpec, sites: Sequence, intervals: Sequence[Tuple[float, float]],
              trials: int, workers: int = 1, key: int = 0) -> MinamiResult:
    """P{lambda_{x_k} in I_k for all k} over theta samples with a centre bijection."""
    if len(sites) != len(intervals):
        raise ValueError("need one interval per site")
    idx = np.array([model.region.index(s) for s in sites])
    if len(set(idx.tolist())) != len(idx):
        raise ValueError("sites must be distinct")
    lo = np.array([float(a) for a, _ in intervals])
    hi = np.array([float(b) for _, b in intervals])

    def stat(_, levels):
        if levels is None:
            return None
        v = levels[idx]
        return bool(np.all((v >= lo) & (v <= hi)))

    hits = _run_trials(model, "minami", trials, stat, workers, key)
    ok = [h for h in hits if h is not None]
    return MinamiResult(McEstimate(len(ok), int(sum(ok))), trials - len(ok), trials)


@dataclass(frozen=True)
class MinamiSweep:
    sites: Tuple
    centers: Tuple[float, float]
    base_widths: Tuple[float, float]
    ratios: Tuple[float, ...]
    cells: Tuple[Tuple[float, float, McEstimate], ...]
    kappa: float
    cell_pass: Tuple[bool, ...]
    failures: int
    trials_total: int
    target_met: bool

    @property
    def passed_cells(self) -> int:
        return int(sum(self.cell_pass))

    @property
    def failure_rate(self) -> float:
        return self.failures / self.trials_total if self.trials_total else math.nan

    def to_dict(self):
        return {"sites": [list(s) for s in self.sites], "centers": list(self.centers),
                "base_widths": list(self.base_widths), "ratios": list(self.ratios),
                "cells": [{"rho1": r1, "rho2": r2, **e.to_dict(), "pass": ok}
                          for (r1, r2, e), ok in zip(self.cells, self.cell_pass)],
                "kappa": self.kappa, "passed_cells": self.passed_cells,
                "failure_rate": self.failure_rate, "target_met": self.target_met}


def _pilot_design(model: ModelSpec, idx: np.ndarray, trials: int, pilot: int,
                  min_ratio: float, workers: int):
    """Choose centres and base widths from a pilot run.

    Centres are the 35% and 65% quantiles of the two labelled levels; the base
    width is set so that the smallest cell (both widths times min_ratio) has an
    expected count of at least 10, as estimated from the pilot joint density,
    capped so the two intervals stay disjoint.
    """
    pairs = [l[idx] for l in _run_trials(model, "minami-pilot", pilot,
                                         lambda _, l: l, workers) if l is not None]
    if len(pairs) < 20:
        raise LocalizationFailure(None, "pilot run: too few samples with a centre bijection")
    pts = np.array(pairs)
    c1 = float(np.quantile(pts[:, 0], 0.35))
    c2 = float(np.quantile(pts[:, 1], 0.65))
    span = float(np.ptp(pts))
    w = span / 8.0
    while True:
        inside = np.sum((np.abs(pts[:, 0] - c1) <= w / 2) & (np.abs(pts[:, 1] - c2) <= w / 2))
        if inside >= 20 or w >= span:
            break
        w *= 2.0
    density = max(inside, 1) / (len(pts) * w * w)
    want = math.sqrt(10.0 / (trials * density)) / min_ratio
    cap = 0.999 * abs(c1 - c2)
    base = min(want, cap)
    return (c1, c2), (base, base), base >= want


def minami_sweep(model: ModelSpec, sites: Sequence, trials: int,
                 ratios: Sequence[float] = (1.0, 0.5, 0.25, 0.125),
                 centers: Optional[Tuple[float, float]] = None,
                 base_widths: Optional[Tuple[float, float]] = None,
                 pilot: int = 500, workers: int = 1) -> MinamiSweep:
    """Two-site joint occupancy over a grid of independently scaled widths.

    A bilinear model p = kappa |I_1| |I_2| is fitted to all cells; a cell passes
    when its estimate is within 3 standard errors (binomial, at the model value)
    of the model.
    """
    if len(sites) != 2:
        raise ValueError("the sweep is defined for two sites")
    idx = np.array([model.region.index(s) for s in sites])
    target_met = True
    if centers is None or base_widths is None:
        c, b, target_met = _pilot_design(model, idx, trials, pilot, min(ratios), workers)
        centers = centers or c
        base_widths = base_widths or b
    cells = []
    failures = total = 0
    key = 0
    for r1 in ratios:
        for r2 in ratios:
            w1, w2 = base_widths[0] * r1, base_widths[1] * r2
            iv = [(centers[0] - w1 / 2, centers[0] + w1 / 2),
                  (centers[1] - w2 / 2, centers[1] + w2 / 2)]
            res = minami_mc(model, sites, iv, trials, workers, key)
            cells.append((float(r1), float(r2), res.estimate))
            failures += res.failures
            total += res.trials
            key += 1
    area = np.array([base_widths[0] * r1 * base_widths[1] * r2 for r1, r2, _ in cells])
    p = np.array([e.p_hat for _, _, e in cells])
    n = np.array([e.trials for _, _, e in cells], dtype=float)
    # Poisson maximum likelihood for p = kappa * area
    kappa = float(np.sum(p * n) / np.sum(area * n)) if np.sum(area * n) > 0 else math.nan
    model_p = np.clip(kappa * area, 0.0, 1.0)
    sd = np.sqrt(model_p * (1.0 - model_p) / n)
    ok = tuple(bool(abs(pi - mi) <= 3.0 * si) for pi, mi, si in zip(p, model_p, sd))
    return MinamiSweep(tuple(model.region.site(i) for i in idx), tuple(centers),
                       tuple(base_widths), tuple(float(r) for r in ratios), tuple(cells),
                       kappa, ok, failures, total, target_met)

"""Finite-difference probes of how eigenvalue approximations respond to the potential.

Perturbations act on the exact (rational) diagonal, so differences of KAM
eigenvalues are computed exactly and only the update terms carry rounding.
"""

import math
from dataclasses import dataclass, field
from fractions import Fraction
from math import comb
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .kam_engine import InductionResult, ScaleSchedule, run_induction
from .lattice_algebra import BandedMatrix, column_m_norms
from .model import ModelSpec
from .spectral_lab import center_bijection, exact_diagonalize, labelled_levels
from .torus_model import ThetaField, amplitude, cube_indices, n_hat

__all__ = [
    "Perturbation", "FdReport", "LemmaRow", "LemmaReport", "FdProbeFailed",
    "CubeSeparationError", "NoExteriorCoefficient", "perturbed_potential",
    "perturbed_hamiltonian", "fd_derivative", "check_base_lemma", "check_induction_lemma",
    "check_remote_decay", "check_covariance_shift", "check_stochastic_support",
    "eigen_map_jacobian", "check_inverse_map_covering", "check_higher_derivatives",
    "RemoteDecayReport", "CovarianceReport", "SupportReport", "JacobianReport",
    "CoveringReport", "HigherDerivativeReport",
]


class FdProbeFailed(RuntimeError):
    pass


class CubeSeparationError(ValueError):
    pass


class NoExteriorCoefficient(ValueError):
    pass


@dataclass(frozen=True)
class Perturbation:
    """Potential deformation of size t.

    Site mode adds t at ``site``.  Coefficient mode shifts theta_{n,k} by
    t / a_n (clipped to keep it in [0, 1]), adding a_n times the clipped shift
    on every site whose orbit point lies in the cube.  With neither given the
    whole diagonal moves by t.
    """
    t: float
    site: Optional[Tuple[int, ...]] = None
    coeff: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.site is not None and self.coeff is not None:
            raise ValueError("give a site or a coefficient, not both")
        if self.site is not None:
            object.__setattr__(self, "site", tuple(int(v) for v in np.atleast_1d(self.site)))

    def with_t(self, t: float) -> "Perturbation":
        return Perturbation(t, self.site, self.coeff)


def perturbed_potential(model: ModelSpec, pert: Perturbation,
                        theta: Optional[ThetaField] = None) -> List[Fraction]:
    theta = model.theta() if theta is None else theta
    V = list(model.exact_potential(theta))
    t = Fraction(pert.t)
    if pert.site is not None:
        if not model.region.contains(pert.site):
            raise ValueError(f"site {pert.site} outside region")
        i = model.region.index(pert.site)
        V[i] += t
    elif pert.coeff is not None:
        n, k = pert.coeff
        a = theta.amplitude(n)
        th = theta.value(n, k)
        s = pert.t / a
        if s < -th or s > 1.0 - th:
            s = min(max(s, -th), 1.0 - th)
            t = Fraction(a) * Fraction(s)
        for i in model.sites_in_cube(n, k).tolist():
            V[i] += t
    else:
        V = [v + t for v in V]
    return V


def perturbed_hamiltonian(model: ModelSpec, pert: Perturbation,
                          theta: Optional[ThetaField] = None) -> BandedMatrix:
    return model.hamiltonian(exact_potential=perturbed_potential(model, pert, theta))


def _run(model, schedule, pert, steps, theta=None) -> InductionResult:
    """Exactly ``steps`` KAM steps on the perturbed Hamiltonian."""
    H = perturbed_hamiltonian(model, pert, theta)
    res = run_induction(H, schedule, max_steps=steps, stop_tol=-1.0, verify=False)
    if res.error is not None:
        raise FdProbeFailed(f"run at t={pert.t!r} stopped: {res.status}: {res.error}")
    return res


def _converged_steps(model, schedule, theta=None, stop_tol=1e-12) -> int:
    res = run_induction(model.hamiltonian(theta), schedule, stop_tol=stop_tol, verify=False)
    if res.error is not None:
        raise FdProbeFailed(f"base run stopped: {res.status}: {res.error}")
    return res.final.j


@dataclass(frozen=True)
class FdReport:
    quantity: str
    x: Tuple[int, ...]
    perturbation: str
    step: int
    h: float
    est_h: float
    est_h2: float
    richardson: float
    predicted: float
    discrepancy: float
    ratio: float

    def to_dict(self):
        return dict(self.__dict__, x=list(self.x))


def _quantity(model, schedule, pert, quantity, i, step, theta):
    if quantity == "lam_exact":
        H = perturbed_hamiltonian(model, pert, theta)
        es = exact_diagonalize(H)
        try:
            cmap = center_bijection(es)
        except Exception as exc:
            raise FdProbeFailed(f"no centre bijection at t={pert.t!r}: {exc}") from exc
        return Fraction(float(labelled_levels(es, cmap)[i]))
    state = _run(model, schedule, pert, step, theta).states[step]
    if quantity == "lam":
        return state.lam_exact[i]
    if quantity == "phi":
        return state.U.data[:, i].copy()
    if quantity == "psi":
        return state.Psi.data[:, i].copy()
    raise ValueError(f"unknown quantity {quantity!r}")


def fd_derivative(model: ModelSpec, schedule: ScaleSchedule, quantity: str, x,
                  pert: Perturbation, h: Optional[float] = None, step: int = 0,
                  theta: Optional[ThetaField] = None) -> FdReport:
    """Central difference of a quantity at x with respect to the perturbation amplitude.

    Estimates at h, h/2 and h/4 give the Richardson value and the convergence
    ratio |d(h) - d(h/2)| / |d(h/2) - d(h/4)| (about 4 for smooth quantities).
    Vector quantities are reported through the m-norm centred at x.
    """
    if h is None:
        h = 1e-6 if pert.coeff is None else 1e-5 * amplitude(pert.coeff[0], model.decay_b)
    i = model.region.index(x)
    w = schedule.norms.weights(model.region)[i]

    def d(hh):
        qp = _quantity(model, schedule, pert.with_t(hh), quantity, i, step, theta)
        qm = _quantity(model, schedule, pert.with_t(-hh), quantity, i, step, theta)
        if isinstance(qp, Fraction):
            return float((qp - qm) / (2 * Fraction(hh)))
        return (qp - qm) / (2.0 * hh)

    def size(v):
        return abs(v) if np.isscalar(v) else float(np.sum(w * np.abs(v)))

    d1, d2, d4 = d(h), d(h / 2), d(h / 4)
    rich = (4.0 * d2 - d1) / 3.0
    num, den = size(d1 - d2), size(d2 - d4)
    ratio = num / den if den > 0 else (math.nan if num == 0 else math.inf)
    predicted = math.nan
    if quantity == "lam" and step == 0 and pert.site is not None:
        predicted = 1.0 if model.region.index(pert.site) == i else 0.0
    elif quantity == "lam_exact" and pert.site is not None:
        es = exact_diagonalize(model.hamiltonian(theta))
        cmap = center_bijection(es)
        z = model.region.index(pert.site)
        predicted = float(es.eigenvectors[z, cmap.eig_of_site[i]] ** 2)
    value = size(rich)
    disc = abs(value - predicted) / max(abs(predicted), 1e-300) if not math.isnan(predicted) else math.nan
    return FdReport(quantity, model.region.site(i), _describe(pert), step, h, size(d1), size(d2),
                    value, predicted, disc, ratio)


def _describe(pert: Perturbation) -> str:
    if pert.site is not None:
        return f"site {pert.site}"
    if pert.coeff is not None:
        return f"coefficient {pert.coeff}"
    return "global"


class _Derivs:
    """Richardson FD derivatives of lambda, phi, psi at every site and step."""

    def __init__(self, model, schedule, pert, steps, h, theta=None):
        runs = {s: _run(model, schedule, pert.with_t(s), steps, theta) for s in (h, -h, h / 2, -h / 2)}
        self.lam, self.phi, self.psi = [], [], []
        for j in range(steps + 1):
            def fd(get, hh):
                a, b = get(runs[hh].states[j]), get(runs[-hh].states[j])
                return a, b
            lam = []
            for hh in (h, h / 2):
                a, b = fd(lambda s: s.lam_exact, hh)
                lam.append(np.array([float((p - q) / (2 * Fraction(hh))) for p, q in zip(a, b)]))
            self.lam.append((4 * lam[1] - lam[0]) / 3)
            for name, get in (("phi", lambda s: s.U.data), ("psi", lambda s: s.Psi.data)):
                v = []
                for hh in (h, h / 2):
                    a, b = fd(get, hh)
                    v.append((a - b) / (2 * hh))
                getattr(self, name).append((4 * v[1] - v[0]) / 3)
        self.runs = runs


@dataclass(frozen=True)
class LemmaRow:
    step: int
    quantity: str
    measured: float
    bound: float

    @property
    def passed(self) -> bool:
        return self.measured <= self.bound

    def to_dict(self):
        return {"step": self.step, "quantity": self.quantity, "measured": self.measured,
                "bound": self.bound, "pass": self.passed}


@dataclass(frozen=True)
class LemmaReport:
    rows: Tuple[LemmaRow, ...]
    hypothesis_ball: float
    hypothesis_support: float
    threshold: float
    status: str
    detail: str = ""

    @property
    def bounds_ok(self) -> bool:
        return all(r.passed for r in self.rows)

    @property
    def hypothesis_ball_ok(self) -> bool:
        return self.hypothesis_ball >= self.threshold

    @property
    def hypothesis_support_ok(self) -> bool:
        return self.hypothesis_support >= self.threshold

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_dict(self):
        return {"status": self.status, "detail": self.detail,
                "hypothesis_ball_min_gap": self.hypothesis_ball,
                "hypothesis_support_min_gap": self.hypothesis_support,
                "threshold": self.threshold, "rows": [r.to_dict() for r in self.rows]}


def _step0_gaps(model, schedule, z, theta):
    """Minimum step-0 gap over pairs in the ball B_{L0^2}(z) and over the pairs step 0 divides by."""
    V = model.exact_potential(theta)
    dist = model.region.distances()
    iz = model.region.index(z)
    ball = np.nonzero(dist[iz] <= schedule.L0 ** 2)[0]
    gmin_ball = min((abs(float(V[a] - V[b])) for a in ball for b in ball if a < b), default=math.inf)
    r = schedule.trunc_radius(0)
    ii, kk = np.nonzero(np.triu((dist >= 1) & (dist <= r), 1))
    gmin_sup = min((abs(float(V[a] - V[b])) for a, b in zip(ii.tolist(), kk.tolist())),
                   default=math.inf)
    return gmin_ball, gmin_sup


def _lemma_rows(der, schedule, model, steps, safety):
    ups = schedule.upsilon
    w = schedule.norms.weights(model.region)
    rows = []
    for i in range(1, steps + 1):
        e = schedule.eps_j[i - 1]
        dl = float(np.max(np.abs(der.lam[i] - der.lam[i - 1])))
        dphi = float(np.max(np.sum(w * np.abs(der.phi[i] - der.phi[i - 1]), axis=0)))
        dpsi = float(np.max(np.sum(w * np.abs(der.psi[i]), axis=0)))
        rows += [LemmaRow(i, "lam", dl, safety * e ** (2 - ups)),
                 LemmaRow(i, "phi", dphi, safety * e ** (1 - ups)),
                 LemmaRow(i, "psi", dpsi, safety * e ** (2 - ups))]
    return tuple(rows)


def check_induction_lemma(model: ModelSpec, schedule: ScaleSchedule, J: int = 4, z=(0,),
                          h: float = 1e-6, safety: float = 10.0,
                          theta: Optional[ThetaField] = None) -> LemmaReport:
    """Step-to-step drift of the derivatives in t_z, up to step J.

    Status is "hypothesis_violated" when the step-0 spacing on B_{L0^2}(z) is
    below delta_0 (the lemmas assume it), "run_failed" when a probe run stops
    early.  The minimum over the pairs step 0 actually divides by is reported
    alongside, since the ball condition is much stronger.
    """
    ball, sup = _step0_gaps(model, schedule, z, theta)
    thr = schedule.delta[0]
    try:
        der = _Derivs(model, schedule, Perturbation(0.0, site=z), J, h, theta)
    except FdProbeFailed as exc:
        return LemmaReport((), ball, sup, thr, "run_failed", str(exc))
    rows = _lemma_rows(der, schedule, model, J, safety)
    if ball < thr:
        status = "hypothesis_violated"
    else:
        status = "pass" if all(r.passed for r in rows) else "fail"
    return LemmaReport(rows, ball, sup, thr, status)


def check_base_lemma(model: ModelSpec, schedule: ScaleSchedule, z=(0,), h: float = 1e-6,
                     safety: float = 10.0, theta: Optional[ThetaField] = None) -> LemmaReport:
    """Derivative drift between steps 0 and 1."""
    return check_induction_lemma(model, schedule, 1, z, h, safety, theta)


@dataclass(frozen=True)
class RemoteDecayReport:
    rows: Tuple[dict, ...]
    zero_zone: Tuple[dict, ...]
    steps: int

    @property
    def bounds_ok(self) -> bool:
        """Rows with |x - z| <= L0 only need finite values: their bounds are order one."""
        return all((r["lam_pass"] and r["phi_pass"]) if not r["vacuous"]
                   else math.isfinite(r["lam"]) and math.isfinite(r["phi"]) for r in self.rows)

    @property
    def zero_zone_ok(self) -> bool:
        return all(z["nonzero"] == 0 for z in self.zero_zone)

    @property
    def passed(self) -> bool:
        return self.bounds_ok and self.zero_zone_ok

    def to_dict(self):
        return {"steps": self.steps, "rows": list(self.rows), "zero_zone": list(self.zero_zone),
                "pass": self.passed}


def check_remote_decay(model: ModelSpec, schedule: ScaleSchedule, x_grid: Sequence[int],
                       z=(0,), h: float = 1e-6, safety: float = 10.0,
                       theta: Optional[ThetaField] = None) -> RemoteDecayReport:
    """Decay of d lambda_x / d t_z and d phi_x / d t_z with |x - z|, plus the exact-zero zone.

    The zero zone is checked on the raw +-h runs: for |x - z| > 2 L_i the
    exact values lambda^i_x must coincide bitwise.
    """
    steps = _converged_steps(model, schedule, theta)
    der = _Derivs(model, schedule, Perturbation(0.0, site=z), steps, h, theta)
    dist = model.region.distances_from(z)
    w = schedule.norms.weights(model.region)
    e0, L0 = schedule.eps0, schedule.L0
    rows = []
    for r in x_grid:
        idx = np.nonzero(dist == r)[0]
        if idx.size == 0:
            continue
        lam = float(np.max(np.abs(der.lam[steps][idx])))
        phi = float(np.max(np.sum(w[:, idx] * np.abs(der.phi[steps][:, idx]), axis=0)))
        lb, pb = safety * e0 ** (r / (2 * L0)), safety * e0 ** (r / (4 * L0))
        rows.append({"distance": int(r), "vacuous": r <= L0, "lam": lam, "lam_bound": lb, "lam_pass": lam <= lb,
                     "phi": phi, "phi_bound": pb, "phi_pass": phi <= pb})
    zone = []
    plus, minus = der.runs[h], der.runs[-h]
    for i in range(steps + 1):
        far = np.nonzero(dist > 2 * schedule.L[i])[0]
        a, b = plus.states[i], minus.states[i]
        bad = sum(a.lam_exact[k] != b.lam_exact[k] for k in far.tolist())
        phi_bad = int(np.sum(np.any(a.U.data[:, far] != b.U.data[:, far], axis=0)))
        psi_bad = int(np.sum(np.any(a.Psi.data[:, far] != b.Psi.data[:, far], axis=0)))
        zone.append({"step": i, "radius": 2 * schedule.L[i], "sites": int(far.size),
                     "nonzero": int(bad), "phi_nonzero": phi_bad, "psi_nonzero": psi_bad})
    return RemoteDecayReport(tuple(rows), tuple(zone), steps)


@dataclass(frozen=True)
class CovarianceReport:
    t: float
    steps: int
    lam_exact_shift: bool
    lam_max_error: float
    U_bitwise: bool
    Psi_bitwise: bool
    oracle_vectors_bitwise: bool
    oracle_max_error: float

    @property
    def passed(self) -> bool:
        return (self.lam_max_error <= 1e-12 and self.U_bitwise and self.Psi_bitwise
                and self.oracle_vectors_bitwise and self.oracle_max_error <= 1e-12)

    def to_dict(self):
        return dict(self.__dict__, passed=self.passed)


def check_covariance_shift(model: ModelSpec, schedule: ScaleSchedule, t: float = 0.37,
                           theta: Optional[ThetaField] = None,
                           stop_tol: float = 1e-12) -> CovarianceReport:
    """Rerun the induction and the oracle on H + t I and compare step by step."""
    H = model.hamiltonian(theta)
    Ht = H.shifted(t)
    a = run_induction(H, schedule, stop_tol=stop_tol, verify=False)
    b = run_induction(Ht, schedule, stop_tol=stop_tol, verify=False)
    n = min(len(a.states), len(b.states))
    exact = len(a.states) == len(b.states)
    err, ub, pb = 0.0, exact, exact
    for sa, sb in zip(a.states[:n], b.states[:n]):
        exact &= all(y - x == Fraction(t) for x, y in zip(sa.lam_exact, sb.lam_exact))
        err = max(err, float(np.max(np.abs(sb.lam - sa.lam - t))))
        ub &= bool(np.array_equal(sa.U.data, sb.U.data))
        pb &= bool(np.array_equal(sa.Psi.data, sb.Psi.data))
    ea, eb = exact_diagonalize(H), exact_diagonalize(Ht)
    return CovarianceReport(t, n - 1, bool(exact), err, bool(ub), bool(pb),
                            bool(np.array_equal(ea.eigenvectors, eb.eigenvectors)),
                            float(np.max(np.abs(eb.eigenvalues - ea.eigenvalues - t))))


@dataclass(frozen=True)
class SupportReport:
    step: int
    x: Tuple[int, ...]
    level: int
    exterior_cube: int
    sites_moved: int
    lam_unchanged: bool
    phi_unchanged: bool
    psi_unchanged: bool
    interior_cube: int
    interior_changes_lam: bool

    @property
    def passed(self) -> bool:
        return (self.lam_unchanged and self.phi_unchanged and self.psi_unchanged
                and self.interior_changes_lam)

    def to_dict(self):
        return dict(self.__dict__, x=list(self.x), passed=self.passed)


def _flip(theta: ThetaField, n: int, k: int) -> float:
    """A theta shift of 1/2 that stays in [0, 1]."""
    th = theta.value(n, k)
    return 0.5 if th < 0.5 else -0.5


def check_stochastic_support(model: ModelSpec, schedule: ScaleSchedule, step: int, x=(0,),
                             level: Optional[int] = None,
                             theta: Optional[ThetaField] = None) -> SupportReport:
    """Perturb a coefficient whose cube avoids every T^y omega with |y - x| <= 2 L_step.

    The cube is chosen at the shallowest level (or ``level``) where such a cube
    still contains some region orbit point, so the perturbation does move the
    potential somewhere.
    """
    theta = model.theta() if theta is None else theta
    i = model.region.index(x)
    near = model.region.distances()[i] <= 2 * schedule.L[step]
    coords = model.orbit_coords()
    levels = [level] if level is not None else range(1, model.n_max + 1)
    chosen = None
    for n in levels:
        idx = cube_indices(n, coords)
        inner = set(idx[near].tolist())
        outer = sorted(set(idx[~near].tolist()) - inner)
        if outer:
            chosen = (n, outer[0], int(idx[i]))
            break
    if chosen is None:
        raise NoExteriorCoefficient("no cube avoids the support ball at the requested level(s)")
    n, k_out, k_in = chosen
    a = theta.amplitude(n)
    base = _run(model, schedule, Perturbation(0.0), step, theta).states[step]
    out_p = Perturbation(a * _flip(theta, n, k_out), coeff=(n, k_out))
    moved = int(len(model.sites_in_cube(n, k_out)))
    pert = _run(model, schedule, out_p, step, theta).states[step]
    in_p = Perturbation(a * _flip(theta, n, k_in), coeff=(n, k_in))
    inner_state = _run(model, schedule, in_p, step, theta).states[step]
    return SupportReport(
        step, model.region.site(i), n, k_out, moved,
        base.lam_exact[i] == pert.lam_exact[i],
        bool(np.array_equal(base.U.data[:, i], pert.U.data[:, i])),
        bool(np.array_equal(base.Psi.data[:, i], pert.Psi.data[:, i])),
        k_in, base.lam_exact[i] != inner_state.lam_exact[i])


def _separating_cubes(model, sites):
    idx = [model.region.index(s) for s in sites]
    dist = model.region.distances()
    R = max((int(dist[a, b]) for a in idx for b in idx), default=1)
    R = max(R, 1)
    n = n_hat(R, model.system)
    cubes = cube_indices(n, model.orbit_coords()[idx])
    if len(set(cubes.tolist())) != len(idx):
        raise CubeSeparationError(f"sites share a level-{n} cube")
    return idx, R, n, cubes.tolist()


@dataclass(frozen=True)
class JacobianReport:
    sites: Tuple
    diameter: int
    level: int
    J: np.ndarray
    steps: int
    h: float
    offdiag_bound: float

    @property
    def deviation(self) -> float:
        """||J - I|| in the max-row-sum norm."""
        return float(np.max(np.sum(np.abs(self.J - np.eye(len(self.J))), axis=1)))

    @property
    def max_offdiag(self) -> float:
        off = self.J - np.diag(np.diag(self.J))
        return float(np.max(np.abs(off))) if off.size else 0.0

    @property
    def passed(self) -> bool:
        return self.deviation <= 0.25

    def to_dict(self):
        return {"sites": [list(s) for s in self.sites], "diameter": self.diameter,
                "level": self.level, "J": self.J.tolist(), "steps": self.steps, "h": self.h,
                "deviation": self.deviation, "max_offdiag": self.max_offdiag,
                "offdiag_bound": self.offdiag_bound, "pass": self.passed}


def _lams_at(model, schedule, steps, theta, idx, coeffs, ts):
    """Exact KAM eigenvalues at ``idx`` after moving each coefficient by amplitude ts[l]."""
    theta = model.theta() if theta is None else theta
    V = list(model.exact_potential(theta))
    for (n, k), t in zip(coeffs, ts):
        for i in model.sites_in_cube(n, k).tolist():
            V[i] += Fraction(t)
    res = run_induction(model.hamiltonian(exact_potential=V), schedule, max_steps=steps,
                        stop_tol=-1.0, verify=False)
    if res.error is not None:
        raise FdProbeFailed(f"run stopped: {res.status}: {res.error}")
    return [res.final.lam_exact[i] for i in idx]


def eigen_map_jacobian(model: ModelSpec, schedule: ScaleSchedule, sites: Sequence,
                       h_factor: float = 1e-5, theta: Optional[ThetaField] = None) -> JacobianReport:
    """Jacobian of t -> (lambda_{x_1}, ..., lambda_{x_N}) in the separating coefficients.

    t_l moves theta_{n,l_l} by t_l / a_n, so J is the coefficient derivative
    scaled by a_n and equals the identity when eps = 0.
    """
    idx, R, n, cubes = _separating_cubes(model, sites)
    coeffs = [(n, k) for k in cubes]
    steps = _converged_steps(model, schedule, theta)
    h = h_factor * amplitude(n, model.decay_b)
    N = len(idx)
    J = np.zeros((N, N))
    for l in range(N):
        cols = []
        for hh in (h, h / 2):
            tp = [hh if m == l else 0.0 for m in range(N)]
            tm = [-hh if m == l else 0.0 for m in range(N)]
            p = _lams_at(model, schedule, steps, theta, idx, coeffs, tp)
            q = _lams_at(model, schedule, steps, theta, idx, coeffs, tm)
            cols.append(np.array([float((a - b) / (2 * Fraction(hh))) for a, b in zip(p, q)]))
        J[:, l] = (4 * cols[1] - cols[0]) / 3
    return JacobianReport(tuple(model.region.site(i) for i in idx), R, n, J, steps, h,
                          schedule.eps0)


@dataclass(frozen=True)
class CoveringReport:
    grid: int
    half_widths: Tuple[float, ...]
    preimage_points: int
    extent: Tuple[float, ...]
    contained: bool
    shrunk_extent: Tuple[float, ...]
    shrink_ratio: Tuple[float, ...]

    @property
    def passed(self) -> bool:
        return self.contained and self.preimage_points > 0

    def to_dict(self):
        return dict(self.__dict__, passed=self.passed)


def check_inverse_map_covering(model: ModelSpec, schedule: ScaleSchedule, sites: Sequence,
                               scale: float = 0.05, grid: int = 32,
                               theta: Optional[ThetaField] = None) -> CoveringReport:
    """Grid preimage of the rectangle prod [f_k(0) - r, f_k(0) + r] in coefficient space.

    r = scale * a_n; the grid covers [-4r, 4r]^N and containment is tested in
    the doubled rectangle [-2r, 2r]^N.  The same grid also gives the preimage
    of the half-size rectangle, whose extent should shrink by about 1/2.
    """
    theta = model.theta() if theta is None else theta
    idx, R, n, cubes = _separating_cubes(model, sites)
    coeffs = [(n, k) for k in cubes]
    a = amplitude(n, model.decay_b)
    room = min(min(theta.value(n, k), 1.0 - theta.value(n, k)) for k in cubes)
    r = min(scale, room / 4.0) * a
    steps = _converged_steps(model, schedule, theta)
    N = len(idx)
    center = _lams_at(model, schedule, steps, theta, idx, coeffs, [0.0] * N)
    axis = np.linspace(-4 * r, 4 * r, grid)
    pts, devs = [], []
    for tup in np.stack(np.meshgrid(*([axis] * N), indexing="ij"), -1).reshape(-1, N):
        lam = _lams_at(model, schedule, steps, theta, idx, coeffs, tup.tolist())
        devs.append(max(abs(float(l - c)) for l, c in zip(lam, center)))
        pts.append(tup)
    pts, devs = np.array(pts), np.array(devs)
    inside = pts[devs <= r]
    half = pts[devs <= r / 2]
    ext = tuple(float(np.max(np.abs(inside[:, k]))) if len(inside) else math.nan for k in range(N))
    sext = tuple(float(np.max(np.abs(half[:, k]))) if len(half) else math.nan for k in range(N))
    contained = bool(len(inside)) and all(e <= 2 * r for e in ext)
    ratio = tuple(s / e if e else math.nan for s, e in zip(sext, ext))
    return CoveringReport(grid, tuple([r] * N), int(len(inside)), ext, contained, sext, ratio)


@dataclass(frozen=True)
class HigherDerivativeReport:
    order: int
    x: Tuple[int, ...]
    step: int
    hs: Tuple[float, ...]
    estimates: Tuple[float, ...]
    richardson: Tuple[float, ...]
    stable: bool
    detail: str = ""

    def to_dict(self):
        return dict(self.__dict__, x=list(self.x))


_DEFAULT_H = {1: 1e-6, 2: 1e-5, 3: 1e-5}


def check_higher_derivatives(model: ModelSpec, schedule: ScaleSchedule, order: int = 2, x=(0,),
                             h: Optional[float] = None, own_coefficient: bool = False,
                             theta: Optional[ThetaField] = None) -> HigherDerivativeReport:
    """Order-r central differences of lambda^j_x at the converged step, for h, h/2, h/4.

    The perturbation is the site potential at x, or (``own_coefficient``) the
    amplitude of the deepest-level coefficient whose cube holds only T^x omega.
    """
    if not 1 <= order <= 3:
        raise ValueError("order must be 1, 2 or 3")
    h = _DEFAULT_H[order] if h is None else h
    i = model.region.index(x)
    steps = _converged_steps(model, schedule, theta)
    if own_coefficient:
        n = model.n_max
        k = int(cube_indices(n, model.orbit_coords()[[i]])[0])
        pert = Perturbation(0.0, coeff=(n, k))
        h = h * amplitude(n, model.decay_b)
    else:
        pert = Perturbation(0.0, site=x)

    def lam(t):
        return _run(model, schedule, pert.with_t(t), steps, theta).final.lam_exact[i]

    def diff(hh):
        total = Fraction(0)
        for m in range(order + 1):
            total += (-1) ** m * comb(order, m) * lam((order / 2 - m) * hh)
        return float(total / Fraction(hh) ** order)

    hs = (h, h / 2, h / 4)
    try:
        est = tuple(diff(v) for v in hs)
    except FdProbeFailed as exc:
        return HigherDerivativeReport(order, model.region.site(i), steps, hs, (), (), False, str(exc))
    rich = ((4 * est[1] - est[0]) / 3, (4 * est[2] - est[1]) / 3)
    scale = max(abs(v) for v in est)
    stable = all(math.isfinite(v) for v in est) and abs(rich[0] - rich[1]) <= 1e-8 + 0.1 * scale
    return HigherDerivativeReport(order, model.region.site(i), steps, hs, est, rich, stable)

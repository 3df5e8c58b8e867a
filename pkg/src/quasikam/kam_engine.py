"""KAM-type iterative diagonalization with runtime checks of the inductive bounds.

A state at step j is a triple (U, lambda, Psi) with ``H U = U diag(lambda) + Psi``.
One step conjugates by ``1 + M`` where ``M_yx = Q_yx / (lambda_x - lambda_y)`` and
Q is the truncated matrix of inner products (psi_x, phi_y).

Eigenvalue approximations are kept as exact rationals and every update uses
eigenvalue differences only, so adding a constant to the potential shifts
lambda by exactly that constant and leaves U and Psi bitwise unchanged.
"""

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .lattice_algebra import (BandedMatrix, NeumannBudgetExceeded, NotContraction,
                              WeightedNorms, band_product, column_m_norms, identity,
                              m_norm_matrix, neumann_inverse)
from .torus_model import amplitude, tn_of_L

__all__ = [
    "ScaleSchedule", "KamState", "HypothesisEntry", "HypothesisReport", "SpacingTable",
    "StepTerms", "InductionResult", "SmallDenominator", "ScheduleExhausted",
    "make_schedule", "init_state", "gram_and_D", "q_truncated", "spacing_table",
    "m_update_matrix", "w_and_z", "advance_step", "verify_hypotheses", "run_induction",
    "diagnostics_rows", "DIAGNOSTIC_COLUMNS", "NEUMANN_TOL",
]

NEUMANN_TOL = 1e-14
K1_TOL = 1e-12
K3_TOL = 1e-10


@dataclass(frozen=True)
class ScaleSchedule:
    L0: int
    q: float
    eps: float
    eps0: float
    m: float
    decay_b: float
    c_trunc: float
    upsilon: float
    max_steps: int
    L: Tuple[int, ...]
    eps_j: Tuple[float, ...]
    tn: Tuple[int, ...]
    log_beta: Tuple[float, ...]
    log_delta: Tuple[float, ...]

    @property
    def beta(self) -> Tuple[float, ...]:
        return tuple(math.exp(v) for v in self.log_beta)

    @property
    def delta(self) -> Tuple[float, ...]:
        return tuple(math.exp(v) for v in self.log_delta)

    @property
    def norms(self) -> WeightedNorms:
        return WeightedNorms(self.m)

    def log_threshold(self, j: int) -> float:
        """log of the small-denominator threshold 4 delta_j."""
        return math.log(4.0) + self.log_delta[j]

    def threshold(self, j: int) -> float:
        return math.exp(self.log_threshold(j))

    def trunc_radius(self, j: int) -> float:
        return self.c_trunc * self.L[j]


def make_schedule(L0: int = 4, q: float = 1.5, eps: float = 1e-3, decay_b: float = 1.0,
                  c_trunc: float = 0.25, max_steps: int = 8, m: Optional[float] = None,
                  upsilon: float = 0.1) -> ScaleSchedule:
    if L0 < 2:
        raise ValueError("L0 must be >= 2")
    if not 1.0 < q <= 2.0:
        raise ValueError("q must lie in (1, 2]")
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    if not 0.0 < c_trunc < 1.0:
        raise ValueError("c_trunc must lie in (0, 1)")
    if decay_b <= 0:
        raise ValueError("decay_b must be positive")
    if max_steps < 0:
        raise ValueError("max_steps must be non-negative")
    if not 0.0 < upsilon < 1.0:
        raise ValueError("upsilon must lie in (0, 1)")
    eps0 = eps ** 0.25
    if m is None:
        m = math.log(eps ** -0.25)
    L, eps_j, tn, log_beta, log_delta = [], [], [], [], []
    for j in range(max_steps + 1):
        Lj = math.ceil(L0 * q ** j)
        t = tn_of_L(Lj)
        L.append(Lj)
        eps_j.append(math.exp(q ** j * math.log(eps0)))
        tn.append(t)
        log_beta.append(-float(t))
        log_delta.append(-2.0 * decay_b * t * t - t)
    return ScaleSchedule(L0, q, eps, eps0, float(m), decay_b, c_trunc, upsilon, max_steps,
                         tuple(L), tuple(eps_j), tuple(tn), tuple(log_beta), tuple(log_delta))


class SmallDenominator(ArithmeticError):
    """A needed gap |lambda_x - lambda_y| fell below 4 delta_j."""

    def __init__(self, x, y, gap: float, threshold: float, step: int):
        super().__init__(f"step {step}: gap {gap:.3e} between sites {x} and {y} "
                         f"below threshold {threshold:.3e}")
        self.x, self.y, self.gap, self.threshold, self.step = x, y, gap, threshold, step

    def to_dict(self):
        return {"step": self.step, "x": list(self.x), "y": list(self.y),
                "gap": self.gap, "threshold": self.threshold}


class ScheduleExhausted(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class KamState:
    j: int
    H: BandedMatrix
    U: BandedMatrix
    lam_exact: Tuple[Fraction, ...]
    Psi: BandedMatrix
    schedule: ScaleSchedule

    @property
    def norms(self) -> WeightedNorms:
        return self.schedule.norms

    @property
    def region(self):
        return self.H.region

    @property
    def lam(self) -> np.ndarray:
        return np.array([float(v) for v in self.lam_exact])

    def psi_norm(self) -> float:
        return m_norm_matrix(self.Psi, self.norms)

    def residual(self) -> BandedMatrix:
        """H U - U Lambda - Psi."""
        data = self.H.data @ self.U.data - self.U.data * self.lam[None, :] - self.Psi.data
        return BandedMatrix.from_dense(self.region, data)


def init_state(H: BandedMatrix, schedule: ScaleSchedule) -> KamState:
    if not H.is_symmetric():
        raise ValueError("H must be symmetric")
    if H.spread > 1:
        raise ValueError("H must have spread <= 1")
    exact = H.exact_diagonal
    if exact is None:
        exact = tuple(Fraction(v) for v in np.diag(H.data).tolist())
    return KamState(0, H, identity(H.region), tuple(exact), H.off_diagonal(), schedule)


def gram_and_D(state: KamState) -> Tuple[BandedMatrix, BandedMatrix]:
    C = band_product(state.U.T, state.U)
    return C, C - identity(state.region)


def q_truncated(state: KamState) -> Tuple[BandedMatrix, BandedMatrix]:
    """Return (Qtilde, Q): Qtilde = U^T Psi and Q its truncation to |x - y| <= c L_j."""
    Qt = band_product(state.U.T, state.Psi)
    return Qt, Qt.truncated(state.schedule.trunc_radius(state.j))


def _exact_gap(lam: Sequence[Fraction], y: int, x: int) -> float:
    return float(lam[x] - lam[y])


def _is_small(gap: float, log_thr: float) -> bool:
    return gap == 0.0 or math.log(abs(gap)) < log_thr


@dataclass(frozen=True)
class SpacingTable:
    radius: float
    pairs: np.ndarray
    gaps: np.ndarray
    min_gap: float
    argmin: Optional[Tuple[Tuple[int, ...], Tuple[int, ...]]]
    threshold: float
    passed: bool


def _pairs_within(region, radius: float) -> np.ndarray:
    dist = region.distances()
    i, k = np.nonzero(np.triu((dist >= 1) & (dist <= radius), 1))
    return np.stack([i, k], axis=1)


def spacing_table(state: KamState, radius: float, values: Optional[Sequence] = None) -> SpacingTable:
    """Gaps |lambda_x - lambda_y| over pairs with 1 <= |x - y| <= radius.

    ``values`` replaces the state's eigenvalue approximations (e.g. oracle values).
    """
    lam = state.lam_exact if values is None else [Fraction(v) for v in values]
    pairs = _pairs_within(state.region, radius)
    gaps = np.array([abs(float(lam[a] - lam[b])) for a, b in pairs.tolist()])
    log_thr = state.schedule.log_threshold(state.j)
    if len(gaps) == 0:
        return SpacingTable(radius, pairs, gaps, math.inf, None,
                            math.exp(log_thr), True)
    k = int(np.argmin(gaps))
    argmin = (state.region.site(pairs[k, 0]), state.region.site(pairs[k, 1]))
    passed = not _is_small(float(gaps[k]), log_thr)
    return SpacingTable(radius, pairs, gaps, float(gaps[k]), argmin, math.exp(log_thr), passed)


def m_update_matrix(state: KamState, Q: BandedMatrix) -> BandedMatrix:
    """M_yx = Q_yx / (lambda_x - lambda_y) off the diagonal where Q is nonzero."""
    log_thr = state.schedule.log_threshold(state.j)
    rows, cols = np.nonzero(Q.data)
    data = np.zeros_like(Q.data)
    worst = None
    for y, x in zip(rows.tolist(), cols.tolist()):
        if y == x:
            continue
        g = _exact_gap(state.lam_exact, y, x)
        if _is_small(g, log_thr):
            if worst is None or abs(g) < abs(worst[2]):
                worst = (x, y, g)
            continue
        data[y, x] = Q.data[y, x] / g
    if worst is not None:
        x, y, g = worst
        raise SmallDenominator(state.region.site(x), state.region.site(y), abs(g),
                               math.exp(log_thr), state.j)
    return BandedMatrix(state.region, data, Q.spread)


@dataclass(frozen=True, eq=False)
class StepTerms:
    W: BandedMatrix
    Z: BandedMatrix
    F: BandedMatrix
    X: BandedMatrix


def w_and_z(state: KamState, Qt: BandedMatrix, Q: BandedMatrix, M: BandedMatrix,
            D: BandedMatrix) -> StepTerms:
    """Split (1+M)^-1 (Lambda + X)(1+M) - Lambda into W (up to second order) and Z.

    X = Qt - D F equals U^-1 Psi; [Lambda, M] is replaced by -Q_off, which is
    exact by construction of M.
    """
    norms = state.norms
    eye = identity(state.region)
    Uinv = neumann_inverse(state.U, norms, tol=NEUMANN_TOL)
    F = Uinv @ state.Psi
    DF = D @ F
    X = Qt - DF
    Qoff = Q.off_diagonal()
    W = Qt - Qoff - DF + Qt @ M - M @ Qt + M @ Qoff
    P = X - Qoff + X @ M
    N = neumann_inverse(eye + M, norms, tol=NEUMANN_TOL)
    MM = M @ M
    Z = (M @ DF - DF @ M - M @ Qt @ M + M @ DF @ M + MM @ P - MM @ M @ N @ P)
    return StepTerms(W, Z, F, X)


def advance_step(state: KamState) -> KamState:
    sched = state.schedule
    if state.j + 1 > sched.max_steps:
        raise ScheduleExhausted(f"schedule only defined up to step {sched.max_steps}")
    _, D = gram_and_D(state)
    Qt, Q = q_truncated(state)
    M = m_update_matrix(state, Q)
    terms = w_and_z(state, Qt, Q, M, D)
    region = state.region
    Ut = state.U @ (identity(region) + M)
    wdiag = np.diag(terms.W.data).tolist()
    lam = tuple(l + Fraction(w) for l, w in zip(state.lam_exact, wdiag))
    Fn = terms.W.off_diagonal() + terms.Z
    Psi_t = (Ut @ Fn).truncated(Ut.spread + state.H.spread)
    scale = np.sqrt(np.sum(Ut.data * Ut.data, axis=0))
    U = BandedMatrix(region, Ut.data / scale[None, :], Ut.spread)
    Psi = BandedMatrix(region, Psi_t.data / scale[None, :], Psi_t.spread)
    return KamState(state.j + 1, state.H, U, lam, Psi, sched)


@dataclass(frozen=True)
class HypothesisEntry:
    name: str
    measured: float
    required: float
    passed: Optional[bool]
    note: str = ""

    @property
    def margin(self) -> float:
        return self.required - self.measured

    def to_dict(self):
        return {"name": self.name, "measured": self.measured, "required": self.required,
                "margin": self.margin, "pass": self.passed, "note": self.note}


@dataclass(frozen=True)
class HypothesisReport:
    j: int
    entries: Dict[str, HypothesisEntry]
    min_gap: float
    argmin: Optional[Tuple[Tuple[int, ...], Tuple[int, ...]]]

    def __getitem__(self, name: str) -> HypothesisEntry:
        return self.entries[name]

    def passed(self, names: Optional[Sequence[str]] = None) -> bool:
        names = self.entries.keys() if names is None else names
        return all(self.entries[n].passed is not False for n in names if n in self.entries)

    def failed(self) -> List[str]:
        return [n for n, e in self.entries.items() if e.passed is False]

    def to_dict(self):
        return {"j": self.j, "min_gap": self.min_gap,
                "argmin": None if self.argmin is None else [list(s) for s in self.argmin],
                "entries": {n: e.to_dict() for n, e in self.entries.items()}}


def _entry(name, measured, required, note=""):
    measured, required = float(measured), float(required)
    return HypothesisEntry(name, measured, required, measured <= required, note)


def verify_hypotheses(state: KamState, previous: Optional[KamState] = None,
                      oracle_values: Optional[Sequence[float]] = None,
                      k8_probe: Optional[Callable[[KamState], HypothesisEntry]] = None
                      ) -> HypothesisReport:
    sched, j, norms, region = state.schedule, state.j, state.norms, state.region
    ups = sched.upsilon
    eps_j = sched.eps_j[j]
    e = {}
    col = np.sqrt(np.sum(state.U.data ** 2, axis=0))
    e["K1"] = _entry("K1", np.max(np.abs(col - 1.0)), K1_TOL, "unit columns")
    e["K2"] = _entry("K2", m_norm_matrix(state.U - identity(region), norms),
                     0.25 - 4.0 ** -(j + 2), "|||U - I|||_m")
    Hn = m_norm_matrix(state.H, norms)
    e["K3"] = _entry("K3", m_norm_matrix(state.residual(), norms), K3_TOL * (1.0 + Hn),
                     "|||H U - U Lambda - Psi|||_m")
    e["K4"] = _entry("K4", column_m_norms(state.Psi, norms).max(), eps_j, "max_x ||psi_x||_m,x")
    inner = np.abs(np.sum(state.U.data * state.Psi.data, axis=0))
    e["K4_inner"] = _entry("K4_inner", inner.max(), eps_j ** (2.0 - ups), "max_x |(phi_x, psi_x)|")
    far = region.distances() > sched.L[j]
    outside = max(np.max(np.abs(state.U.data[far]), initial=0.0),
                  np.max(np.abs(state.Psi.data[far]), initial=0.0))
    e["K6"] = HypothesisEntry("K6", float(outside), 0.0, outside == 0.0,
                              "largest entry of U or Psi beyond L_j")
    table = spacing_table(state, 2 * sched.L[j])
    e["K7"] = HypothesisEntry("K7", table.threshold, table.min_gap, table.passed,
                              "min gap over 1 <= |x-y| <= 2 L_j vs 4 delta_j")
    sup = spacing_table(state, sched.trunc_radius(j))
    e["K7_support"] = HypothesisEntry("K7_support", sup.threshold, sup.min_gap, sup.passed,
                                      "min gap over the pairs the next step divides by")
    if oracle_values is not None:
        ot = spacing_table(state, 2 * sched.L[j], oracle_values)
        e["K7_oracle"] = HypothesisEntry("K7_oracle", ot.threshold, ot.min_gap, ot.passed,
                                         "K7 evaluated on oracle eigenvalues")
    if k8_probe is not None:
        e["K8"] = k8_probe(state)
    else:
        e["K8"] = HypothesisEntry("K8", math.nan, math.nan, None, "skipped")
    if previous is not None:
        i = previous.j
        dl = max(abs(float(a - b)) for a, b in zip(state.lam_exact, previous.lam_exact))
        e["K9_lam"] = _entry("K9_lam", dl, sched.eps_j[i] ** (2.0 - ups), "max_x |lam^j - lam^j-1|")
        dphi = column_m_norms(state.U - previous.U, norms).max()
        e["K9_phi"] = _entry("K9_phi", dphi, sched.eps_j[i] ** (1.0 - ups),
                             "max_x ||phi^j_x - phi^j-1_x||_m,x")
    return HypothesisReport(j, e, table.min_gap, table.argmin)


@dataclass
class InductionResult:
    states: List[KamState]
    reports: List[HypothesisReport]
    status: str
    error: Optional[Exception] = None

    @property
    def final(self) -> KamState:
        return self.states[-1]

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def psi_norms(self) -> List[float]:
        return [s.psi_norm() for s in self.states]

    def hypotheses_ok(self, required: Sequence[str] = ("K1", "K2", "K3", "K4", "K4_inner",
                                                      "K6", "K7", "K9_lam", "K9_phi")) -> bool:
        """All required entries pass; K7 only where a step was attempted from the state."""
        advanced = len(self.reports) if self.error is not None else len(self.reports) - 1
        for i, rep in enumerate(self.reports):
            names = [n for n in required if n != "K7" or i < advanced]
            if not rep.passed(names):
                return False
        return True


def run_induction(H: BandedMatrix, schedule: ScaleSchedule, max_steps: Optional[int] = None,
                  stop_tol: float = 1e-12, verify: bool = True,
                  k8_probe: Optional[Callable[[KamState], HypothesisEntry]] = None
                  ) -> InductionResult:
    """Iterate advance_step until convergence, max_steps or a step error."""
    max_steps = schedule.max_steps if max_steps is None else min(max_steps, schedule.max_steps)
    state = init_state(H, schedule)
    states = [state]
    reports = [verify_hypotheses(state, k8_probe=k8_probe)] if verify else []
    while True:
        if state.psi_norm() <= stop_tol:
            return InductionResult(states, reports, "converged")
        if state.j >= max_steps:
            return InductionResult(states, reports, "max_steps")
        try:
            nxt = advance_step(state)
        except SmallDenominator as exc:
            return InductionResult(states, reports, "small_denominator", exc)
        except NotContraction as exc:
            return InductionResult(states, reports, "not_contraction", exc)
        except NeumannBudgetExceeded as exc:
            return InductionResult(states, reports, "neumann_budget", exc)
        if verify:
            reports.append(verify_hypotheses(nxt, state, k8_probe=k8_probe))
        states.append(nxt)
        state = nxt


DIAGNOSTIC_COLUMNS = ["j", "L_j", "eps_j", "delta_j", "psi_norm", "max_dlam", "min_gap",
                      "K1", "K2", "K3", "K4", "K4_inner", "K6", "K7", "K7_support",
                      "K9_lam", "K9_phi"]


def diagnostics_rows(result: InductionResult) -> List[dict]:
    rows = []
    for i, state in enumerate(result.states):
        sched = state.schedule
        rep = result.reports[i] if i < len(result.reports) else None
        if i == 0:
            dlam = 0.0
        else:
            prev = result.states[i - 1]
            dlam = max(abs(float(a - b)) for a, b in zip(state.lam_exact, prev.lam_exact))
        row = {"j": state.j, "L_j": sched.L[state.j], "eps_j": sched.eps_j[state.j],
               "delta_j": sched.delta[state.j], "psi_norm": state.psi_norm(),
               "max_dlam": dlam, "min_gap": rep.min_gap if rep else math.nan}
        for name in DIAGNOSTIC_COLUMNS[7:]:
            ent = rep.entries.get(name) if rep else None
            row[name] = "NA" if ent is None or ent.passed is None else int(ent.passed)
        rows.append(row)
    return rows

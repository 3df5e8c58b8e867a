import math

import numpy as np
import pytest

from quasikam.kam_engine import advance_step, init_state, make_schedule
from quasikam.lattice_algebra import BandedMatrix, SimpleRegion, hamiltonian_from_potential
from quasikam.model import dc1
from quasikam.spectral_lab import (LocalizationFailure, McEstimate, OracleCapExceeded,
                                   center_bijection, decay_profile, exact_diagonalize,
                                   kam_vs_exact, labelled_levels, minami_mc, spacing_mc,
                                   wegner_mc)


def H_of(potential, eps):
    return hamiltonian_from_potential(eps, SimpleRegion.segment(0, len(potential) - 1), potential)


def test_diagonal_oracle():
    es = exact_diagonalize(H_of([0.3, 0.1, 0.2], 0.0))
    assert np.array_equal(es.eigenvalues, [0.1, 0.2, 0.3])
    cmap = center_bijection(es)
    assert np.array_equal(cmap.eig_of_site, [2, 0, 1]) and np.all(cmap.peak_mass == 1.0)
    assert np.array_equal(labelled_levels(es, cmap), [0.3, 0.1, 0.2])
    # A delta eigenvector has a single support point: no rate, no violation.
    prof = decay_profile(es, cmap)
    assert np.all(np.isnan(prof.rates)) and prof.max_violation == 0.0


def test_two_site_closed_form():
    eps = 0.01
    es = exact_diagonalize(H_of([0.0, 0.0], eps))
    assert es.eigenvalues == pytest.approx([-eps, eps], abs=1e-17)


def test_oracle_invariants(loc_model):
    H = loc_model.hamiltonian()
    es = exact_diagonalize(H)
    assert abs(es.eigenvalues.sum() - np.trace(H.data)) <= 1e-10
    assert es.orthonormality_error() <= 1e-10
    assert es.residuals(H).max() <= 1e-9 * np.abs(H.data).sum(axis=0).max()


def test_oracle_cap_and_symmetry():
    H = H_of([0.0] * 12, 0.1)
    with pytest.raises(OracleCapExceeded):
        exact_diagonalize(H, cap=10)
    bad = H.data.copy()
    bad[0, 1] = 0.5
    with pytest.raises(ValueError):
        exact_diagonalize(BandedMatrix(H.region, bad, 1))


def test_shift_covariance_bitwise(loc_model):
    t = 0.37
    a = exact_diagonalize(loc_model.hamiltonian())
    b = exact_diagonalize(loc_model.hamiltonian(shift=t))
    assert np.array_equal(a.eigenvectors, b.eigenvectors)
    assert np.max(np.abs(b.eigenvalues - a.eigenvalues - t)) <= 1e-12
    assert np.array_equal(center_bijection(a).eig_of_site, center_bijection(b).eig_of_site)


def test_bijection_and_decay_on_loc(loc_model, loc_schedule):
    es = exact_diagonalize(loc_model.hamiltonian())
    cmap = center_bijection(es)
    assert sorted(cmap.eig_of_site.tolist()) == list(range(loc_model.region.size))
    assert np.array_equal(cmap.site_of_eig[cmap.eig_of_site], np.arange(loc_model.region.size))
    assert cmap.peak_mass.min() > 0.5
    assert decay_profile(es, cmap).min_rate >= 0.8 * loc_schedule.m


def test_flat_strong_coupling_fails_bijection():
    es = exact_diagonalize(H_of([0.5] * 16, 1.0))
    with pytest.raises(LocalizationFailure):
        center_bijection(es)


def test_mirrored_profiles():
    pot = [0.9, 0.1, 0.5, 0.3, 0.7]
    fwd = exact_diagonalize(H_of(pot, 0.05))
    rev = exact_diagonalize(H_of(pot[::-1], 0.05))
    a = decay_profile(fwd, center_bijection(fwd)).rates
    b = decay_profile(rev, center_bijection(rev)).rates
    assert a == pytest.approx(b[::-1], rel=1e-10)


def test_kam_vs_exact_base_case():
    eps = 0.01
    st = init_state(H_of([1.0, 0.0], eps), make_schedule(eps=1e-4))
    cmp = kam_vs_exact(st, exact_diagonalize(st.H))
    # lambda_exact = 1/2 +- sqrt(1/4 + eps^2), so the error is eps^2 / gap to leading order.
    assert cmp.lam_error == pytest.approx([eps ** 2, eps ** 2], rel=1e-3)
    assert np.all(cmp.bound_ok)
    # One step later the error is fourth order: eps^4 / gap^3.
    nxt = advance_step(st)
    err = kam_vs_exact(nxt, exact_diagonalize(st.H)).lam_error
    assert err == pytest.approx([eps ** 4] * 2, rel=1e-3)


def test_kam_vs_exact_eps0():
    st = init_state(H_of([0.4, 0.1, 0.7], 0.0), make_schedule())
    cmp = kam_vs_exact(st, exact_diagonalize(st.H))
    assert cmp.max_error == 0.0 and cmp.min_overlap == 1.0


def test_kam_vs_exact_tracks_discrepancy(loc_run):
    es = exact_diagonalize(loc_run.states[0].H)
    errors = [kam_vs_exact(st, es).max_error for st in loc_run.states]
    for st in loc_run.states:
        assert np.all(kam_vs_exact(st, es).bound_ok)
    assert errors[-1] < 1e-15 < errors[0]


def test_mc_estimate_fields():
    e = McEstimate(400, 100)
    assert e.p_hat == 0.25 and e.stderr == pytest.approx(math.sqrt(0.25 * 0.75 / 400))


@pytest.fixture(scope="module")
def small_model():
    return dc1(eps=1e-8, master_seed=7)


def test_mc_determinism(small_model):
    a = wegner_mc(small_model, (0.4, 0.6), 100)
    b = wegner_mc(small_model, (0.4, 0.6), 100, workers=3)
    assert a == b
    assert spacing_mc(small_model, [0.0, 1e-3], 100) == spacing_mc(small_model, [0.0, 1e-3], 100)


def test_spacing_trivial_ends(small_model):
    res = spacing_mc(small_model, [1e3], 100)
    assert res.estimates[0].p_hat == 1.0
    with pytest.raises(ValueError):
        spacing_mc(small_model, [1.0], 50)


def test_wegner_trivial_intervals(small_model):
    n = small_model.region.size
    assert wegner_mc(small_model, (1e3, 1e3 + 1), 100).mean_count == 0.0
    full = wegner_mc(small_model, (-10.0, 10.0), 100)
    assert full.mean_count == n and full.any_level.p_hat == 1.0
    with pytest.raises(ValueError):
        wegner_mc(small_model, (0.5, 0.5), 100)


def test_minami_empty_and_full(small_model):
    sites = [(-8,), (8,)]
    assert minami_mc(small_model, sites, [(1e3, 1e3 + 1), (-10, 10)], 100).estimate.p_hat == 0.0
    full = minami_mc(small_model, sites, [(-10, 10), (-10, 10)], 100).estimate
    assert full.p_hat == 1.0
    with pytest.raises(ValueError):
        minami_mc(small_model, [(0,), (0,)], [(0, 1), (0, 1)], 10)


def test_single_site_minami_matches_wegner(small_model):
    iv = (0.45, 0.55)
    m = minami_mc(small_model, [(0,)], [iv], 1000).estimate
    w = wegner_mc(small_model, iv, 1000, sites=[(0,)])
    assert w.double_rate == 0.0
    se = math.hypot(m.stderr, w.any_level.stderr)
    assert abs(m.p_hat - w.any_level.p_hat) <= 3 * se

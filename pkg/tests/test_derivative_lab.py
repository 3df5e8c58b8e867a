from fractions import Fraction

import numpy as np
import pytest

from quasikam import derivative_lab as dl
from quasikam.model import dc1


@pytest.fixture(scope="module")
def flat_model():
    return dc1(eps=0.0)


def test_perturbation_modes(loc_model):
    base = loc_model.exact_potential()
    with pytest.raises(ValueError):
        dl.Perturbation(0.1, site=(0,), coeff=(1, 0))
    site = dl.perturbed_potential(loc_model, dl.Perturbation(0.25, site=0))
    i = loc_model.region.index((0,))
    assert site[i] - base[i] == Fraction(0.25)
    assert sum(a != b for a, b in zip(site, base)) == 1
    glob = dl.perturbed_potential(loc_model, dl.Perturbation(0.25))
    assert all(b - a == Fraction(0.25) for a, b in zip(base, glob))


def test_coefficient_mode_is_clipped(loc_model):
    theta = loc_model.theta()
    n, k = 1, 0
    a = theta.amplitude(n)
    moved = dl.perturbed_potential(loc_model, dl.Perturbation(10.0, coeff=(n, k)))
    base = loc_model.exact_potential()
    cube = loc_model.sites_in_cube(n, k).tolist()
    assert cube
    shift = {moved[i] - base[i] for i in cube}
    assert shift == {Fraction(a) * Fraction(1.0 - theta.value(n, k))}
    assert all(moved[i] == base[i] for i in range(len(base)) if i not in cube)


def test_fd_lambda0_is_a_delta(loc_model, loc_schedule):
    z = (0,)
    own = dl.fd_derivative(loc_model, loc_schedule, "lam", z, dl.Perturbation(0.0, site=z))
    nb = dl.fd_derivative(loc_model, loc_schedule, "lam", (1,), dl.Perturbation(0.0, site=z))
    assert abs(own.richardson - 1.0) <= 1e-9 and abs(nb.richardson) <= 1e-9


def test_hellmann_feynman(loc_model, loc_schedule):
    rep = dl.fd_derivative(loc_model, loc_schedule, "lam_exact", (0,), dl.Perturbation(0.0, site=0))
    assert 0.5 < rep.predicted <= 1.0 and rep.discrepancy <= 1e-6


def test_fd_rejects_unknown_quantity(loc_model, loc_schedule):
    with pytest.raises(ValueError):
        dl.fd_derivative(loc_model, loc_schedule, "mu", (0,), dl.Perturbation(0.0, site=0))


def test_eps0_drifts_vanish(flat_model, loc_schedule):
    rep = dl.check_induction_lemma(flat_model, loc_schedule, J=2)
    assert rep.rows and all(r.measured == 0.0 for r in rep.rows)
    assert rep.status == ("pass" if rep.hypothesis_ball_ok else "hypothesis_violated")


def test_lemma_status_follows_ball_hypothesis(loc_model, loc_schedule):
    rep = dl.check_base_lemma(loc_model, loc_schedule)
    assert [r.step for r in rep.rows] == [1, 1, 1]
    assert rep.hypothesis_ball <= rep.hypothesis_support
    if not rep.hypothesis_ball_ok:
        assert rep.status == "hypothesis_violated" and not rep.passed
    lam = next(r for r in rep.rows if r.quantity == "lam")
    assert lam.passed


def test_remote_decay_zero_zone(loc_model, loc_schedule):
    rep = dl.check_remote_decay(loc_model, loc_schedule, [1, 8, 16, 24])
    assert rep.zero_zone_ok and rep.steps == len(rep.zero_zone) - 1
    assert [r["distance"] for r in rep.rows] == [1, 8, 16, 24]
    assert rep.rows[0]["vacuous"] and not rep.rows[-1]["vacuous"]
    far = rep.rows[-1]
    assert far["lam_pass"]


def test_covariance_shift(loc_model, loc_schedule):
    rep = dl.check_covariance_shift(loc_model, loc_schedule)
    assert rep.passed and rep.lam_exact_shift and rep.steps >= 1


def test_stochastic_support(loc_model, loc_schedule):
    rep = dl.check_stochastic_support(loc_model, loc_schedule, step=2)
    assert rep.sites_moved > 0 and rep.passed


def test_stochastic_support_without_exterior(loc_model, loc_schedule):
    with pytest.raises(dl.NoExteriorCoefficient):
        dl.check_stochastic_support(loc_model, loc_schedule, step=5, level=0)


def test_jacobian_is_near_identity(loc_model, loc_schedule):
    rep = dl.eigen_map_jacobian(loc_model, loc_schedule, [(-4,), (4,)])
    assert rep.diameter == 8 and rep.J.shape == (2, 2)
    assert rep.passed and rep.max_offdiag <= rep.offdiag_bound


def test_jacobian_eps0_is_identity(flat_model, loc_schedule):
    rep = dl.eigen_map_jacobian(flat_model, loc_schedule, [(-4,), (4,)])
    assert np.allclose(rep.J, np.eye(2), atol=1e-12)


def test_cube_separation_error(loc_model, loc_schedule):
    with pytest.raises(dl.CubeSeparationError):
        dl.eigen_map_jacobian(loc_model, loc_schedule, [(0,), (0,)])


def test_inverse_map_covering(loc_model, loc_schedule):
    rep = dl.check_inverse_map_covering(loc_model, loc_schedule, [(-4,), (4,)], grid=9)
    assert rep.passed and rep.preimage_points > 0
    assert all(e <= 2 * r for e, r in zip(rep.extent, rep.half_widths))


def test_higher_derivatives(loc_model, loc_schedule):
    with pytest.raises(ValueError):
        dl.check_higher_derivatives(loc_model, loc_schedule, order=4)
    first = dl.check_higher_derivatives(loc_model, loc_schedule, order=1)
    exact = dl.fd_derivative(loc_model, loc_schedule, "lam_exact", (0,), dl.Perturbation(0.0, site=0))
    assert first.stable and abs(first.richardson[1] - exact.richardson) <= 1e-6

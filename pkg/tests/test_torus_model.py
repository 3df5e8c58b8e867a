import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quasikam.torus_model import (GOLDEN, DyadicCube, ShiftSystem, ThetaField, TorusPoint,
                                  amplitude, check_div, check_upa, cube_index, cube_indices,
                                  derive_seed, eval_hull, hull_values, hull_values_exact, n_hat,
                                  orbit, separated_at_level, shift_action, torus_distance,
                                  truncation_error_bound, tn_of_L)


def test_torus_distance_examples():
    assert torus_distance(TorusPoint((0.1,)), TorusPoint((0.1,))) == 0.0
    assert torus_distance(TorusPoint((0.0,)), TorusPoint((0.9,))) == pytest.approx(0.1, abs=1e-15)
    assert torus_distance(TorusPoint((0.2, 0.5)), TorusPoint((0.7, 0.6))) == pytest.approx(0.5)


def test_torus_point_rejects_outside_unit_interval():
    with pytest.raises(ValueError):
        TorusPoint((1.0,))
    assert TorusPoint.wrap([1.25]).coords == (0.25,)


def test_shift_action_examples():
    sys = ShiftSystem(nu=1, d=1, freqs=((0.25,),))
    w = TorusPoint((0.7,))
    assert shift_action(sys, [0], w) == w
    assert shift_action(sys, [2], w).coords[0] == pytest.approx(0.2, abs=1e-15)


@given(st.integers(-1000, 1000), st.floats(0, 1, exclude_max=True))
def test_shift_inverse(x, w):
    sys = ShiftSystem.golden()
    p = TorusPoint((w,))
    back = shift_action(sys, [x], shift_action(sys, [-x], p))
    assert torus_distance(back, p) <= 1e-12


def test_upa_examples():
    assert not check_upa(ShiftSystem(nu=1, d=1, freqs=((0.5,),)), TorusPoint((0.0,)), 2).passed
    golden = check_upa(ShiftSystem.golden(2, 4), TorusPoint((0.0,)), 8)
    assert golden.passed
    # brute-force minimum of ||k alpha|| * 4 k^2 over 1 <= k <= 16
    brute = min(min(k * GOLDEN % 1, 1 - k * GOLDEN % 1) * 4 * k * k for k in range(1, 17))
    assert golden.min_ratio == pytest.approx(brute, rel=1e-12)
    assert check_upa(ShiftSystem(nu=1, d=1, freqs=((math.sqrt(2) - 1,),)),
                     TorusPoint((0.3,)), 1).min_ratio > 0


def test_div_is_trivial_for_shifts():
    pts = [TorusPoint((0.1,)), TorusPoint((0.35,))]
    rep = check_div(ShiftSystem.golden(), pts, 5)
    assert rep.passed
    assert rep.max_expansion == pytest.approx(1.0, abs=1e-12)


def test_cube_index_examples():
    assert cube_index(0, TorusPoint((0.7, 0.2))).index == (0, 0)
    assert cube_index(2, TorusPoint((0.3,))).index == (1,)
    assert cube_index(3, TorusPoint((0.99, 0.0))).index == (7, 0)
    with pytest.raises(ValueError):
        DyadicCube(2, (4,))


@given(st.floats(0, 1, exclude_max=True), st.integers(0, 30))
def test_partition_refinement(w, n):
    p = TorusPoint((w,))
    parent, child = cube_index(n, p), cube_index(n + 1, p)
    assert child.index[0] // 2 == parent.index[0]
    assert child.contains(p) and parent.contains(p)


def test_cube_indices_matches_scalar():
    coords = np.array([[0.1, 0.9], [0.5, 0.25], [0.999, 0.0]])
    for n in range(6):
        flat = cube_indices(n, coords)
        for row, k in zip(coords, flat):
            assert cube_index(n, TorusPoint(tuple(row))).flat == k


def test_eval_hull_examples():
    zero = ThetaField(1, 8, constant=0.0)
    assert eval_hull(zero, TorusPoint((0.3,)), 8) == 0.0
    single = ThetaField(1, 0).with_override(0, 0, 0.5)
    assert eval_hull(single, TorusPoint((0.3,)), 0) == 0.5


def test_hull_truncation_difference():
    theta = ThetaField(7, 12)
    coords = np.random.default_rng(0).random((50, 1))
    d = np.abs(hull_values(theta, coords, 6) - hull_values(theta, coords, 5))
    assert np.all(d <= amplitude(6, 1.0) * (1 + 1e-12))


def test_truncation_error_bound():
    # partial-sum oracle: sum_{n>=4} e^{-2n^2} = e^{-32} (1 + e^{-18} + ...)
    assert truncation_error_bound(1.0, 3) == pytest.approx(math.exp(-32), rel=1e-7)
    vals = [truncation_error_bound(1.0, n) for n in range(8)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    theta = ThetaField(3, 12)
    coords = np.random.default_rng(1).random((100, 1))
    for N in (2, 3, 4):
        gap = np.abs(hull_values(theta, coords, 12) - hull_values(theta, coords, N))
        assert np.all(gap <= truncation_error_bound(theta, N) + 1e-16)


def test_tn_of_L_examples():
    assert tn_of_L(4) == 2
    assert tn_of_L(10) == 6
    assert tn_of_L(3) == 2


def test_separation_at_scale_level():
    # all orbit points with |x| <= L^2 fall in distinct level-n cubes once
    # 2^-n < (1/2) C_A^-1 L^-2A (direct enumeration for L = 2, 3)
    sys = ShiftSystem.golden(2, 4)
    for L in (2, 3):
        R = L * L
        assert check_upa(sys, TorusPoint((0.0,)), R).passed
        n = n_hat(R, sys)
        coords = orbit(sys, np.arange(-R, R + 1)[:, None], TorusPoint((0.0,)))
        assert separated_at_level(n, coords)


def test_n_hat():
    sys = ShiftSystem.golden(2, 4)
    assert n_hat(8, sys) == 9       # 2^9 = 512 = 2 * 4 * 64
    assert n_hat(16, sys) == 11


def test_theta_reproducible_and_order_independent():
    a, b = ThetaField(99, 10), ThetaField(99, 10)
    ks = np.array([5, 1, 900, 3])
    assert np.array_equal(a.values(7, ks), b.values(7, ks[::-1])[::-1])
    assert a.value(7, 900) == b.values(7, np.arange(1024))[900]
    assert np.all((a.values(3, np.arange(8)) >= 0) & (a.values(3, np.arange(8)) < 1))


def test_hull_locality():
    theta = ThetaField(5, 10)
    w = TorusPoint((0.3,))
    base = eval_hull(theta, w, 10)
    k_own = cube_index(4, w).flat
    other = theta.with_override(4, (k_own + 3) % 16, 0.123)
    assert eval_hull(other, w, 10) == base
    own = theta.with_override(4, k_own, 0.123)
    assert eval_hull(own, w, 10) != base


def test_exact_hull_keeps_deep_levels():
    theta = ThetaField(5, 12)
    coords = np.array([[0.30], [0.30 + 2.0 ** -12]])
    exact = hull_values_exact(theta, coords, 12)
    floats = hull_values(theta, coords, 12)
    assert exact[0] != exact[1]
    assert abs(float(exact[0]) - floats[0]) <= 2e-16


def test_derive_seed_is_deterministic_and_tagged():
    assert derive_seed(42, "a", 1) == derive_seed(42, "a", 1)
    assert derive_seed(42, "a", 1) != derive_seed(42, "b", 1)
    assert derive_seed(42, "a", 1) != derive_seed(42, "a", 2)

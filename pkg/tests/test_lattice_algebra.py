import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quasikam.lattice_algebra import (BandedMatrix, NotContraction, SimpleRegion, WeightedNorms,
                                      band_product, band_sum, build_hamiltonian, build_laplacian,
                                      column_m_norms, diagonal, hamiltonian_from_potential,
                                      identity, m_norm_matrix, m_norm_vector, neumann_inverse)
from quasikam.torus_model import ShiftSystem, ThetaField, TorusPoint


def random_banded(rng, region, spread, scale=1.0):
    data = rng.normal(size=(region.size, region.size)) * scale
    return BandedMatrix.from_dense(region, data, spread)


def test_region_enumeration_and_halfspace():
    r = SimpleRegion((0, 0), (2, 2))
    assert r.size == 9 and r.index((1, 2)) == 5 and r.site(5) == (1, 2)
    half = SimpleRegion((0, 0), (3, 3), halfspaces=[(0, 1, 1)])   # x_0 >= 1
    assert half.size == 12 and not half.contains((0, 0))
    with pytest.raises(ValueError):
        SimpleRegion((0, 0), (3, 0), halfspaces=[(0, 1, 1), (0, -1, 2), (0, -1, -9)])
    assert SimpleRegion((0, 0), (3, 3), metric="l1").diameter == 6


def test_laplacian_examples():
    assert np.all(build_laplacian(SimpleRegion.segment(0, 0)).data == 0)
    L3 = build_laplacian(SimpleRegion.segment(0, 2)).data
    assert np.array_equal(L3, [[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    L22 = build_laplacian(SimpleRegion.box((0, 0), (1, 1))).data
    assert np.all(L22.sum(axis=0) == 2)


def test_hamiltonian_examples():
    region = SimpleRegion.segment(0, 1)
    sys, w = ShiftSystem.golden(), TorusPoint((0.1,))
    zero = ThetaField(1, 4, constant=0.0)
    H = build_hamiltonian(0.01, region, sys, w, zero, 4)
    assert np.array_equal(H.data, [[0, 0.01], [0.01, 0]])
    assert np.allclose(np.linalg.eigvalsh(H.data), [-0.01, 0.01], atol=1e-16)
    theta = ThetaField(3, 6)
    H0 = build_hamiltonian(0.0, SimpleRegion.segment(-3, 3), sys, w, theta, 6)
    assert H0.spread == 0 and np.count_nonzero(H0.data - np.diag(np.diag(H0.data))) == 0
    Ht = build_hamiltonian(0.0, SimpleRegion.segment(-3, 3), sys, w, theta, 6, shift=0.37)
    assert all(b - a == Fraction(0.37) for a, b in zip(H0.exact_diagonal, Ht.exact_diagonal))
    assert np.array_equal(H0.shifted(0.37).data, Ht.data)


def test_m_norm_vector_examples():
    region = SimpleRegion.segment(0, 4)
    n1 = WeightedNorms(1.0)
    assert m_norm_vector(np.eye(5)[2], n1, (2,), region) == 1.0
    assert m_norm_vector(np.eye(5)[4], n1, (2,), region) == pytest.approx(math.e ** 2)
    assert m_norm_vector(np.zeros(5), n1, (2,), region) == 0.0


def test_m_norm_matrix_examples():
    region = SimpleRegion.segment(0, 9)
    m, eps = 1.7, 1e-3
    norms = WeightedNorms(m)
    assert m_norm_matrix(identity(region), norms) == 1.0
    assert m_norm_matrix(diagonal(region, np.zeros(10)), norms) == 0.0
    lap = build_laplacian(region).scaled(eps)
    assert m_norm_matrix(lap, norms) == pytest.approx(2 * math.exp(m) * eps, rel=1e-14)
    # boundary columns carry one neighbour only
    assert column_m_norms(lap, norms)[0] == pytest.approx(math.exp(m) * eps, rel=1e-14)


def test_m_zero_is_l1():
    region = SimpleRegion.segment(0, 3)
    f = np.array([1.0, -2.0, 0.5, 0.0])
    assert m_norm_vector(f, WeightedNorms(0.0), (0,), region) == 3.5


def test_band_product_examples():
    rng = np.random.default_rng(0)
    region = SimpleRegion.segment(0, 9)
    A, B = random_banded(rng, region, 1), random_banded(rng, region, 1)
    assert np.array_equal((A @ identity(region)).data, A.data)
    P = A @ B
    assert P.spread <= 2 and P.true_spread() <= 2
    assert np.max(np.abs(P.data - A.data @ B.data)) <= 1e-13


def test_spread_validation():
    region = SimpleRegion.segment(0, 4)
    data = np.zeros((5, 5))
    data[0, 3] = 1.0
    with pytest.raises(ValueError):
        BandedMatrix(region, data, 2)
    assert BandedMatrix.from_dense(region, data, 2).true_spread() == 0


def test_exact_diagonal_must_round_to_float():
    region = SimpleRegion.segment(0, 1)
    with pytest.raises(ValueError):
        BandedMatrix(region, np.eye(2), 0, (Fraction(1), Fraction(2)))


def test_neumann_examples():
    region = SimpleRegion.segment(0, 0)
    norms = WeightedNorms(1.0)
    assert np.array_equal(neumann_inverse(identity(region), norms).data, [[1.0]])
    inv = neumann_inverse(diagonal(region, [1.5]), norms, tol=1e-15)
    assert inv.data[0, 0] == pytest.approx(1 / 1.5, rel=1e-14)
    big = SimpleRegion.segment(0, 9)
    with pytest.raises(NotContraction):
        neumann_inverse(identity(big) + build_laplacian(big), norms)


def test_neumann_residual_random():
    rng = np.random.default_rng(5)
    region = SimpleRegion.segment(0, 19)
    norms = WeightedNorms(1.0)
    D = random_banded(rng, region, 2)
    D = D.scaled(0.2 / m_norm_matrix(D, norms))
    A = identity(region) + D
    X = neumann_inverse(A, norms, tol=1e-12)
    assert m_norm_matrix((A @ X) - identity(region), norms) <= 1.25e-12


regions = st.sampled_from([SimpleRegion.segment(0, 11), SimpleRegion.box((0, 0), (4, 3)),
                           SimpleRegion((0, 0), (5, 5), halfspaces=[(1, -1, 3)])])


@settings(max_examples=60, deadline=None)
@given(regions, st.integers(0, 3), st.integers(0, 3), st.integers(0, 2 ** 32 - 1))
def test_spread_arithmetic_and_dense_equivalence(region, sa, sb, seed):
    rng = np.random.default_rng(seed)
    A, B = random_banded(rng, region, sa), random_banded(rng, region, sb)
    S, P = A + B, A @ B
    assert S.true_spread() <= max(A.spread, B.spread)
    assert P.true_spread() <= A.spread + B.spread
    assert np.max(np.abs(S.data - (A.data + B.data))) <= 1e-12
    assert np.max(np.abs(P.data - A.data @ B.data)) <= 1e-12
    norms = WeightedNorms(0.7)
    assert m_norm_matrix(P, norms) <= m_norm_matrix(A, norms) * m_norm_matrix(B, norms) * (1 + 1e-12)

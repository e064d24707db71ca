"""Tests for the 3x3 helpers.

scipy.linalg.expm serves as the independent oracle for the matrix
exponential; the remaining expected values are analytic.
"""

import numpy as np
import pytest
import scipy.linalg

from thermokin import linalg3


def _rng(seed=0):
    return np.random.default_rng(seed)


class TestExpm:
    def test_zero_matrix(self):
        assert np.array_equal(linalg3.expm(np.zeros((3, 3))), np.eye(3))

    def test_diagonal(self):
        d = np.diag([0.3, -1.2, 2.0])
        expected = np.diag(np.exp([0.3, -1.2, 2.0]))
        assert np.allclose(linalg3.expm(d), expected, rtol=1e-13, atol=1e-15)

    def test_nilpotent_shear(self):
        # exp of the elementary shear has a closed form: I + N.
        n = np.zeros((3, 3))
        n[0, 1] = 0.7
        assert np.allclose(linalg3.expm(n), np.eye(3) + n, rtol=0, atol=1e-15)

    def test_against_scipy(self):
        rng = _rng(7)
        for _ in range(200):
            m = rng.uniform(-2.0, 2.0, size=(3, 3))
            ours = linalg3.expm(m)
            ref = scipy.linalg.expm(m)
            assert np.allclose(ours, ref, rtol=1e-12, atol=1e-13)

    def test_group_property_inverse(self):
        rng = _rng(11)
        for _ in range(50):
            m = rng.uniform(-1.0, 1.0, size=(3, 3))
            prod = linalg3.expm(m) @ linalg3.expm(-m)
            assert np.allclose(prod, np.eye(3), rtol=0, atol=1e-11)

    def test_det_is_exp_trace(self):
        rng = _rng(13)
        for _ in range(50):
            m = rng.uniform(-1.5, 1.5, size=(3, 3))
            assert np.isclose(
                np.linalg.det(linalg3.expm(m)), np.exp(np.trace(m)),
                rtol=1e-11, atol=0,
            )


class TestPhi1:
    def test_zero_matrix_gives_identity(self):
        assert np.allclose(linalg3.phi1(np.zeros((3, 3))), np.eye(3), atol=1e-16)

    def test_matches_direct_formula_when_invertible(self):
        rng = _rng(3)
        for _ in range(100):
            m = rng.uniform(-1.0, 1.0, size=(3, 3))
            if abs(np.linalg.det(m)) < 1e-3:
                continue
            direct = np.linalg.solve(m, scipy.linalg.expm(m) - np.eye(3))
            assert np.allclose(linalg3.phi1(m), direct, rtol=1e-11, atol=1e-12)

    def test_near_singular_argument(self):
        # phi1 must stay accurate where the direct formula loses all digits.
        m = 1e-9 * np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        out = linalg3.phi1(m)
        expected = np.eye(3) + 0.5 * m
        assert np.allclose(out, expected, rtol=0, atol=1e-18)


class TestInvert3:
    def test_roundtrip(self):
        rng = _rng(5)
        count = 0
        while count < 50:
            m = rng.uniform(-1.0, 1.0, size=(3, 3))
            if abs(np.linalg.det(m)) < 1e-2:
                continue
            inv = linalg3.invert3(m)
            assert np.allclose(m @ inv, np.eye(3), rtol=0, atol=1e-11)
            count += 1

    def test_singular_raises(self):
        m = np.ones((3, 3))
        with pytest.raises(ValueError):
            linalg3.invert3(m)


class TestDetBound:
    """eta^3 |det(phi1(eta*alpha*M))| >= eta^3 / 8 on the admissible range."""

    def test_random_matrices(self):
        rng = _rng(17)
        alpha = 0.05
        for _ in range(500):
            m_bar = rng.uniform(-1.0, 1.0, size=(3, 3))
            for eta in (0.1, 1.0 / 3.0):
                rep = linalg3.det_bound_check(m_bar, alpha, eta)
                assert rep["ok"], rep
                assert rep["lhs"] >= rep["rhs"]

    def test_eta_limit_recovers_volume(self):
        # As eta -> 0 the scaled determinant tends to eta^3 exactly.
        m_bar = np.array([[0.0, 1.0, 0.0], [0.2, 0.0, 0.0], [0.0, 0.0, -0.1]])
        rep = linalg3.det_bound_check(m_bar, 0.05, 1e-8)
        assert np.isclose(rep["lhs"] / rep["eta"] ** 3, 1.0, rtol=1e-6, atol=0)

    def test_precondition_violations_raise(self):
        m_bar = np.eye(3)
        with pytest.raises(ValueError):
            linalg3.det_bound_check(m_bar, 0.05, 0.5)     # eta > 1/3
        with pytest.raises(ValueError):
            linalg3.det_bound_check(m_bar, 0.05, 0.0)     # eta must be positive
        with pytest.raises(ValueError):
            linalg3.det_bound_check(m_bar, 5.0, 0.1)      # alpha*|M| too large


class TestImageBound:
    def test_random_cases(self):
        rng = _rng(19)
        alpha = 0.05
        for _ in range(500):
            m_bar = rng.uniform(-1.0, 1.0, size=(3, 3))
            v = rng.uniform(-3.0, 3.0, size=3)
            for eta in (0.1, 1.0 / 3.0):
                rep = linalg3.image_bound_check(m_bar, alpha, eta, v)
                assert rep["ok"], rep

    def test_eta_zero_edge(self):
        rep = linalg3.image_bound_check(np.eye(3), 0.05, 0.0, np.array([1.0, 0.0, 0.0]))
        assert rep["ok"]
        assert rep["lhs"] == 0.0

    def test_explicit_radius(self):
        v = np.array([1.0, 2.0, -1.0])
        rep = linalg3.image_bound_check(np.eye(3), 0.05, 0.2, v, m_radius=5.0)
        assert rep["ok"]
        with pytest.raises(ValueError):
            linalg3.image_bound_check(np.eye(3), 0.05, 0.2, v, m_radius=1.0)

    def test_scalar_case_matches_closed_form(self):
        # For m_bar = I the map is scalar: lhs = ((e^{alpha*eta} - 1)/alpha)|v|.
        alpha, eta = 0.1, 1.0 / 3.0
        v = np.array([0.0, 3.0, 4.0])
        rep = linalg3.image_bound_check(np.eye(3), alpha, eta, v)
        expected = (np.expm1(alpha * eta) / alpha) * 5.0
        assert np.isclose(rep["lhs"], expected, rtol=1e-12)
        assert rep["ok"]

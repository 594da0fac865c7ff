import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import special_ortho_group

from flmgof.fdata import GramFactor
from flmgof.oracle import mc_pcvm, mc_wedge_area
from flmgof.pcvm import (
    AdotMatrix,
    adot,
    lemma3_constant,
    pcvm_scalar_response,
    pcvm_statistic,
    pcvm_statistic_general,
    pcvm_statistic_many,
    sphere_area,
    statistic_constant,
    tie_tolerance,
    wedge_angle,
)

PI = math.pi


def area_factor(p):
    # angle -> surface area on S^{p-1}
    return PI ** (p / 2 - 1) / math.gamma(p / 2)


class TestWedgeAngle:
    def test_triple_coincidence(self):
        assert wedge_angle((0.3, -1), (0.3, -1), (0.3, -1)) == 2 * PI

    def test_orthogonal(self):
        assert wedge_angle((1, 0), (0, 1), (0, 0)) == pytest.approx(PI / 2, abs=1e-15)

    def test_opposite(self):
        assert wedge_angle((1, 0), (-1, 0), (0, 0)) == pytest.approx(0.0, abs=1e-15)

    def test_equal_pair_off_reference(self):
        assert wedge_angle((1, 0), (1, 0), (0, 0)) == pytest.approx(PI, abs=1e-15)

    @pytest.mark.parametrize("xi,xj", [((0, 0), (2, 1)), ((2, 1), (0, 0))])
    def test_one_coincidence(self, xi, xj):
        assert wedge_angle(xi, xj, (0, 0)) == PI

    def test_clamped_cosine(self):
        # nearly parallel differences whose cosine rounds above one
        a = np.array([1e8, 1.0])
        assert wedge_angle(a, a * (1 + 1e-16), (0, 0)) == pytest.approx(PI)

    @settings(max_examples=200)
    @given(st.lists(st.floats(-10, 10), min_size=9, max_size=9))
    def test_range_and_symmetry(self, v):
        xi, xj, xr = np.reshape(v, (3, 3))
        a = wedge_angle(xi, xj, xr)
        assert 0.0 <= a <= 2 * PI
        assert a == wedge_angle(xj, xi, xr)

    def test_limit_of_coincidence(self):
        # xj -> xi (both away from xr) approaches the xi = xj value pi
        xi = np.array([1.0, 2.0])
        for eps in (1e-3, 1e-6, 1e-9):
            xj = xi + eps * np.array([0.6, -0.8])
            assert wedge_angle(xi, xj, (0, 0)) == pytest.approx(PI, abs=10 * eps)


class TestAdot:
    def test_single_row(self):
        A = adot(np.array([[0.4, -2.0]]))
        np.testing.assert_array_equal(A.A, [[2 * PI]])
        assert A.A[0, 0] * area_factor(2) == pytest.approx(2 * PI ** (2 / 2) / math.gamma(1))

    @pytest.mark.parametrize("X", [[[0.0], [1.0]], [[0.0, 0.0], [1.0, 3.0]], [[1, 2, 3], [0, 0, 0]]])
    def test_two_rows_by_hand(self, X):
        # (i, j, r) enumeration: A_iii = 2pi, A_ii,r!=i = pi, A_ij,r in {i, j} = pi
        A = adot(np.asarray(X, float)).A
        np.testing.assert_allclose(A, [[3 * PI, 2 * PI], [2 * PI, 3 * PI]], atol=1e-14)

    def test_matches_loop(self, rng):
        X = rng.standard_normal((7, 3))
        X[4] = X[1]  # a duplicate row exercises the coincidence cases
        tol = tie_tolerance(X)
        loop = np.array([
            [sum(wedge_angle(X[i], X[j], X[r], tol) for r in range(7)) for j in range(7)]
            for i in range(7)
        ])
        np.testing.assert_allclose(adot(X).A, loop, atol=1e-12)

    def test_symmetric_and_bounded(self, rng):
        X = rng.standard_normal((30, 2))
        A = adot(X).A
        np.testing.assert_array_equal(A, A.T)
        assert A.min() >= 0 and A.max() <= 2 * PI * 30

    @pytest.mark.parametrize("p", [2, 3, 5])
    def test_rotation_translation_invariance(self, rng, p):
        X = rng.standard_normal((25, p))
        R = special_ortho_group.rvs(p, random_state=rng)
        c = rng.standard_normal(p) * 5
        assert np.max(np.abs(adot(X @ R + c).A - adot(X).A)) <= 1e-8

    @pytest.mark.parametrize("scale", [1e-3, 0.5, 40.0])
    def test_scale_invariance(self, rng, scale):
        X = rng.standard_normal((20, 3))
        assert np.max(np.abs(adot(scale * X).A - adot(X).A)) <= 1e-8

    def test_positive_definite(self):
        r = np.random.default_rng(2024)
        worst = np.inf
        for k in range(200):
            n = int(r.integers(2, 51))
            p = (1, 2, 5)[k % 3]
            X = r.standard_normal((n, p))
            worst = min(worst, np.linalg.eigvalsh(adot(X).A)[0])
        assert worst > 0

    def test_threads_do_not_change_result(self, rng):
        X = rng.standard_normal((120, 2))
        np.testing.assert_array_equal(adot(X, threads=1).A, adot(X, threads=3).A)

    @pytest.mark.parametrize("p", [1, 2, 3])
    def test_against_sphere_areas(self, p):
        r = np.random.default_rng(p)
        X = r.standard_normal((6, p))
        tol = tie_tolerance(X)
        for i, j, k in [(0, 1, 2), (3, 3, 1), (0, 4, 4), (5, 2, 0), (1, 1, 1)]:
            est = mc_wedge_area(X[i], X[j], X[k], 400_000, r)
            exact = wedge_angle(X[i], X[j], X[k], tol) * area_factor(p)
            assert abs(est.estimate - exact) <= 5e-3 * sphere_area(p) + 4 * est.se

    def test_empty(self):
        with pytest.raises(ValueError):
            adot(np.zeros((0, 2)))


class TestConstants:
    @pytest.mark.parametrize("q,value", [(1, 2.0), (2, PI), (3, 4 * PI / 3)])
    def test_lemma3(self, q, value):
        assert lemma3_constant(q) == pytest.approx(value, rel=1e-14)

    @pytest.mark.parametrize("d,value", [(1, 2.0), (2, 2 * PI), (3, 4 * PI)])
    def test_sphere_area(self, d, value):
        assert sphere_area(d) == pytest.approx(value, rel=1e-14)

    def test_statistic_constant_small(self):
        assert statistic_constant(1, 1) == pytest.approx(2 / PI, rel=1e-14)
        assert statistic_constant(2, 2) == pytest.approx(PI, rel=1e-14)

    @pytest.mark.parametrize("p,q", [(3, 2), (360, 2), (2, 360)])
    def test_recursion_past_gamma_overflow(self, p, q):
        # c(p + 2, q) / c(p, q) = pi / (p / 2), while Gamma(180) overflows
        c = statistic_constant(p, q)
        assert np.isfinite(c) and c > 0
        assert statistic_constant(p + 2, q) / c == pytest.approx(PI / (p / 2), rel=1e-10)

    def test_bad_dimension(self):
        with pytest.raises(ValueError):
            lemma3_constant(0)
        with pytest.raises(ValueError):
            statistic_constant(0, 1)


class TestStatistic:
    def test_zero_residuals(self, rng):
        A = adot(rng.standard_normal((8, 2)))
        assert pcvm_statistic(np.zeros((8, 3)), A).value == 0.0

    @pytest.mark.parametrize("e", [0.5, -1.3, 2.0])
    def test_single_observation(self, e):
        v = pcvm_statistic(np.array([[e]]), adot(np.array([[0.7]]))).value
        assert v == pytest.approx(4 * e * e, rel=1e-14)
        assert mc_pcvm(np.array([[e]]), np.array([[0.7]]), 0, None).estimate == pytest.approx(4 * e * e)

    def test_two_observations_by_hand(self):
        X = np.array([[0.0], [1.0]])
        E = np.array([[1.0], [-1.0]])
        assert pcvm_statistic(E, adot(X)).value == pytest.approx(1.0, rel=1e-14)

    def test_quadratic_in_residuals(self, rng):
        A = adot(rng.standard_normal((15, 3)))
        E = rng.standard_normal((15, 2))
        base = pcvm_statistic(E, A).value
        for c in (-2.0, 0.1, 7.0):
            assert pcvm_statistic(c * E, A).value == pytest.approx(c * c * base, rel=1e-12)

    def test_sum_over_response_columns(self, rng):
        A = adot(rng.standard_normal((12, 2)))
        E = rng.standard_normal((12, 3))
        per_column = sum(
            pcvm_statistic(E[:, [k]], A).value / statistic_constant(2, 1) for k in range(3)
        )
        assert pcvm_statistic(E, A).value == pytest.approx(
            statistic_constant(2, 3) * per_column, rel=1e-12
        )

    @pytest.mark.parametrize("p", [1, 2, 4])
    def test_scalar_response_path(self, rng, p):
        X = rng.standard_normal((9, p))
        e = rng.standard_normal(9)
        assert pcvm_statistic(e, adot(X)).value == pytest.approx(
            pcvm_scalar_response(e, X), rel=1e-10
        )

    def test_many_matches_single(self, rng):
        A = adot(rng.standard_normal((10, 2)))
        Es = rng.standard_normal((5, 10, 3))
        many = pcvm_statistic_many(Es, A)
        np.testing.assert_allclose(many, [pcvm_statistic(E, A).value for E in Es], rtol=1e-12)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            pcvm_statistic(np.zeros((4, 1)), adot(rng.standard_normal((5, 1))))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 4), st.integers(1, 3))
    def test_nonnegative(self, seed, n, p, q):
        r = np.random.default_rng(seed)
        X = np.round(r.standard_normal((n, p)), 1)  # rounding forces ties
        assert pcvm_statistic(r.standard_normal((n, q)), adot(X)).value >= 0

    @pytest.mark.parametrize("p,q", [(1, 2), (2, 1), (2, 2), (3, 2)])
    def test_against_triple_integral(self, p, q):
        r = np.random.default_rng(10 * p + q)
        X = r.standard_normal((10, p))
        E = r.standard_normal((10, q))
        est = mc_pcvm(E, X, 200_000, r)
        assert est.agrees(pcvm_statistic(E, adot(X)).value, k=4)


class TestGeneralBasis:
    def test_identity_factors(self, rng):
        X = rng.standard_normal((10, 3))
        E = rng.standard_normal((10, 2))
        A = adot(X)
        g = pcvm_statistic_general(E, GramFactor.identity(2), GramFactor.identity(3), A)
        assert g.value == pytest.approx(pcvm_statistic(E, A).value, rel=1e-14)

    @pytest.mark.parametrize("q", [1, 2])
    def test_rescaled_basis(self, rng, q):
        # basis functions doubled: scores halve, Gram matrices become 4 I
        X = rng.standard_normal((12, 2))
        E = rng.standard_normal((12, q))
        P = GramFactor(4 * np.eye(2), 2 * np.eye(2), 2 * math.log(2))
        Q = GramFactor(4 * np.eye(q), 2 * np.eye(q), q * math.log(2))
        Xs, Es = X / 2, E / 2
        A = adot(Xs @ P.cholesky.T)
        general = pcvm_statistic_general(Es, Q, P, A).value
        ortho = pcvm_statistic(E, adot(X)).value
        # the general form carries the 1/|P||Q| normalisation
        assert general * math.exp(P.logdet + Q.logdet) == pytest.approx(ortho, rel=1e-8)

    def test_against_oracle_nonorthonormal(self):
        r = np.random.default_rng(77)
        X = r.standard_normal((8, 2))
        E = r.standard_normal((8, 2))
        Lx = np.array([[1.0, 0.0], [0.6, 0.8]])
        Ly = np.array([[1.5, 0.0], [-0.3, 0.7]])
        gx, gy = Lx @ Lx.T, Ly @ Ly.T
        P = GramFactor(gx, np.linalg.cholesky(gx).T, float(np.log(np.linalg.det(gx)) / 2))
        Q = GramFactor(gy, np.linalg.cholesky(gy).T, float(np.log(np.linalg.det(gy)) / 2))
        stat = pcvm_statistic_general(E, Q, P, adot(X @ P.cholesky.T)).value
        est = mc_pcvm(E, X, 200_000, r, gram_x=gx, gram_y=gy)
        assert est.agrees(P.det * Q.det * stat, k=4)

    def test_wrong_factor_shape(self, rng):
        A = adot(rng.standard_normal((5, 2)))
        with pytest.raises(ValueError):
            pcvm_statistic_general(np.zeros((5, 2)), GramFactor.identity(3), GramFactor.identity(2), A)

    def test_singular_factor(self, rng):
        A = adot(rng.standard_normal((5, 2)))
        bad = GramFactor(np.zeros((2, 2)), np.zeros((2, 2)), -np.inf)
        with pytest.raises(np.linalg.LinAlgError):
            pcvm_statistic_general(np.zeros((5, 1)), GramFactor.identity(1), bad, A)


def test_adot_matrix_is_plain_record():
    A = AdotMatrix(np.eye(2), 2, 1)
    assert A.n == 2 and A.p == 1

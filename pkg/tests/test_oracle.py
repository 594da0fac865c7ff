import math

import numpy as np
import pytest

from flmgof.oracle import McEstimate, SphereSampler, mc_lemma3, mc_pcvm, mc_wedge_area, within
from flmgof.pcvm import lemma3_constant


class TestSphereSampler:
    @pytest.mark.parametrize("d", [2, 3, 7])
    def test_unit_norm_and_mean(self, d):
        s = SphereSampler(d, np.random.default_rng(d))
        z = s.draw(50_000)
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-12)
        assert np.max(np.abs(z.mean(axis=0))) < 0.02
        # second moments of a uniform direction are I / d
        np.testing.assert_allclose(z.T @ z / len(z), np.eye(d) / d, atol=0.01)

    def test_s0(self):
        s = SphereSampler(1, np.random.default_rng(0))
        assert s.exhaustive and s.area == 2.0
        np.testing.assert_array_equal(s.points().ravel(), [-1, 1])

    @pytest.mark.parametrize("d,area", [(2, 2 * math.pi), (3, 4 * math.pi), (4, 2 * math.pi**2)])
    def test_area(self, d, area):
        assert SphereSampler(d, None).area == pytest.approx(area)

    def test_bad_dimension(self):
        with pytest.raises(ValueError):
            SphereSampler(0, None)


class TestMcEstimate:
    def test_within(self):
        e = McEstimate(1.0, 0.1, 100)
        assert within(e, 1.29) and not within(e, 1.31)
        assert e.agrees(1.39, k=4)

    def test_exact_estimate_needs_equality(self):
        e = McEstimate(2.0, 0.0, 2)
        assert e.agrees(2.0) and not e.agrees(2.001)


class TestWedgeArea:
    def test_half_plane(self):
        # one zero difference: a single half-space, half the circle
        est = mc_wedge_area((1.0, 0.0), (0.0, 0.0), (0.0, 0.0), 100_000, np.random.default_rng(1))
        assert est.agrees(math.pi, k=4)

    def test_quarter(self):
        est = mc_wedge_area((1.0, 0.0), (0.0, 1.0), (0.0, 0.0), 100_000, np.random.default_rng(2))
        assert est.agrees(math.pi / 2, k=4)

    def test_s0_exact(self):
        est = mc_wedge_area([2.0], [3.0], [1.0], 0, None)
        assert est.estimate == 1.0 and est.se == 0.0

    def test_too_few_draws(self):
        with pytest.raises(ValueError):
            mc_wedge_area((1.0, 0.0), (0.0, 1.0), (0.0, 0.0), 100, np.random.default_rng(0))

    def test_se_shrinks_with_draws(self):
        r = np.random.default_rng(3)
        a = mc_wedge_area((1.0, 0.2), (0.3, 1.0), (0.0, 0.0), 10_000, r)
        b = mc_wedge_area((1.0, 0.2), (0.3, 1.0), (0.0, 0.0), 1_000_000, r)
        assert b.se == pytest.approx(a.se / 10, rel=0.1)


class TestLemma3:
    @pytest.mark.parametrize("q", [1, 2, 3, 5])
    def test_inner_product_identity(self, q):
        r = np.random.default_rng(q)
        x, y = r.standard_normal((2, q))
        est = mc_lemma3(x, y, 400_000, r)
        assert est.agrees(lemma3_constant(q) * float(x @ y), k=4, atol=1e-10)

    def test_circle(self):
        est = mc_lemma3([1.0, 0.0], [1.0, 0.0], 400_000, np.random.default_rng(0))
        assert est.agrees(math.pi, k=4)

    def test_too_few_draws(self):
        with pytest.raises(ValueError):
            mc_lemma3([1.0, 0.0], [1.0, 0.0], 10_000, np.random.default_rng(0))


class TestMcPcvm:
    def test_sorted_equals_direct(self):
        r = np.random.default_rng(5)
        X = np.round(r.standard_normal((9, 2)), 1)
        X[3] = X[0]  # tie in every projection
        E = r.standard_normal((9, 2))
        a = mc_pcvm(E, X, 20_000, np.random.default_rng(9), method="sorted")
        b = mc_pcvm(E, X, 20_000, np.random.default_rng(9), method="direct")
        assert a.estimate == pytest.approx(b.estimate, rel=1e-12)

    def test_fully_exhaustive_when_p_q_one(self):
        X = np.array([[0.0], [1.0]])
        E = np.array([[1.0], [-1.0]])
        est = mc_pcvm(E, X, 0, None)
        assert est.se == 0 and est.estimate == pytest.approx(1.0)

    def test_zero_residuals(self):
        r = np.random.default_rng(0)
        est = mc_pcvm(np.zeros((5, 2)), r.standard_normal((5, 2)), 20_000, r)
        assert est.estimate == 0.0

    def test_converges(self):
        r = np.random.default_rng(11)
        X, E = r.standard_normal((6, 2)), r.standard_normal((6, 2))
        small = mc_pcvm(E, X, 20_000, r)
        big = mc_pcvm(E, X, 320_000, r)
        assert big.se < small.se / 3
        assert abs(small.estimate - big.estimate) <= 4 * math.hypot(small.se, big.se)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            mc_pcvm(np.zeros((2, 1)), np.zeros((2, 1)), 0, None, method="fast")

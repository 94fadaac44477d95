import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from stablemix import stable_noise as sn
from stablemix.stable_noise import (SpectralMeasure, empirical_cf, ou_scale, sample_ou_marginal,
                                    sample_spectral_increment, sample_standard_stable, stable_abs_moment)

from conftest import ks_statistic, stable_abs_moment_quad, stable_cdf, stable_cf

N = 100_000
TOL = 3 / math.sqrt(N)


class TestStandardSampler:
    def test_cauchy_median(self, rng):
        x = sample_standard_stable(1.0, rng, N)
        assert abs(np.mean(np.abs(x) <= 1) - 0.5) < 0.01

    def test_cf_at_one(self, rng):
        x = sample_standard_stable(1.5, rng, N)
        assert abs(np.cos(x).mean() - math.exp(-1)) < 0.01

    @pytest.mark.parametrize("alpha", [0.5, 0.8, 1.0, 1.2, 1.5, 1.9])
    def test_cf_grid(self, rng, alpha):
        x = sample_standard_stable(alpha, rng, N)
        lams = [0.25, 0.5, 1.0, 2.0, 4.0]
        assert np.all(np.abs(empirical_cf(x, lams) - stable_cf(lams, alpha)) < TOL)

    @pytest.mark.parametrize("alpha", [0.7, 1.3, 1.8])
    def test_ks_against_scipy(self, rng, alpha):
        x = sample_standard_stable(alpha, rng, N)
        D = ks_statistic(x, lambda s: stable_cdf(s, alpha))
        assert D < 1.63 / math.sqrt(N)

    @pytest.mark.parametrize("alpha", [0.0, -1.0, 2.0, 2.5, float("nan")])
    def test_rejects_bad_index(self, rng, alpha):
        with pytest.raises(ValueError, match="index out of range"):
            sample_standard_stable(alpha, rng)

    def test_scalar_and_shapes(self, rng):
        assert isinstance(sample_standard_stable(1.5, rng), float)
        assert sample_standard_stable(1.5, rng, (3, 4)).shape == (3, 4)

    @pytest.mark.parametrize("alpha", [0.6, 1.5])
    def test_symmetry(self, rng, alpha):
        x = sample_standard_stable(alpha, rng, N)
        for lam in (0.5, 1.0, 2.0):
            assert abs(np.sin(lam * x).mean()) < TOL

    def test_overflow_guard_counts(self, rng):
        sn.reset_resample_count()
        x = sample_standard_stable(0.05, rng, 2000)
        assert np.all(np.abs(x) <= sn.OVERFLOW_LIMIT)
        assert sn.resample_count() > 0

    def test_deterministic(self):
        a = sample_standard_stable(1.3, np.random.default_rng(7), 100)
        b = sample_standard_stable(1.3, np.random.default_rng(7), 100)
        assert np.array_equal(a, b)


class TestMoments:
    @pytest.mark.parametrize("alpha,p", [(0.8, 0.4), (1.2, 0.6), (1.5, 0.75), (1.9, 1.2)])
    def test_closed_form_vs_quadrature(self, alpha, p):
        assert stable_abs_moment(alpha, p) == pytest.approx(stable_abs_moment_quad(alpha, p), rel=1e-5)

    def test_cauchy_half_moment(self):
        # E|C|^(1/2) = 1 / cos(pi/4) for standard Cauchy
        assert stable_abs_moment(1.0, 0.5) == pytest.approx(math.sqrt(2), rel=1e-12)

    def test_p_at_alpha_rejected(self):
        with pytest.raises(ValueError, match="moment may be infinite"):
            stable_abs_moment(1.5, 1.5)

    def test_empirical_moment(self, rng):
        x = sample_standard_stable(1.5, rng, 10**6)
        assert np.mean(np.abs(x) ** 0.75) == pytest.approx(stable_abs_moment(1.5, 0.75), rel=0.02)

    def test_divergence_above_alpha(self, rng):
        alpha, p = 1.2, 1.7
        meds = []
        for n in (10**3, 10**4, 10**5, 10**6):
            reps = [np.mean(np.abs(sample_standard_stable(alpha, rng, n)) ** p) for _ in range(20 if n < 10**6 else 8)]
            meds.append(np.median(reps))
        assert all(b > a for a, b in zip(meds, meds[1:]))


class TestSpectralMeasure:
    def test_symmetrized(self):
        mu = SpectralMeasure.from_atoms([([1.0, 0.0], 0.3), ([0.0, 1.0], 0.7)])
        assert len(mu.weights) == 4
        for a, w in zip(mu.directions, mu.weights):
            j = [i for i, b in enumerate(mu.directions) if np.allclose(b, -a)]
            assert j and mu.weights[j[0]] == w

    def test_existing_mirror_kept(self):
        mu = SpectralMeasure.from_atoms([([1.0], 0.5), ([-1.0], 0.5)])
        assert len(mu.weights) == 2

    def test_unequal_mirror_rejected(self):
        with pytest.raises(ValueError, match="mirror"):
            SpectralMeasure.from_atoms([([1.0], 0.5), ([-1.0], 0.2)])

    def test_degenerate(self):
        with pytest.raises(ValueError, match="degenerate spectral measure"):
            SpectralMeasure.from_atoms([([1.0, 0.0], 1.0), ([-1.0, 0.0], 1.0)])

    def test_non_unit(self):
        with pytest.raises(ValueError, match="unit"):
            SpectralMeasure.from_atoms([([1.0, 1.0], 1.0), ([0.0, 1.0], 1.0)])

    def test_nonpositive_weight(self):
        with pytest.raises(ValueError):
            SpectralMeasure.from_atoms([([1.0], 0.0)])

    def test_nondegeneracy_axes(self):
        # psi(u) = 2 w (|u1|^a + |u2|^a) has minimum on the sphere at the axes
        mu = SpectralMeasure.axes(2, 0.5)
        for a in (1.2, 1.5):
            assert mu.nondegeneracy_constant(a) == pytest.approx(1.0, rel=1e-6)

    def test_nondegeneracy_bound_holds(self, rng):
        mu = SpectralMeasure.from_atoms([([1.0, 0.0, 0.0], 0.4), ([0.0, 0.6, 0.8], 0.3),
                                         ([0.0, 0.0, 1.0], 0.2), ([0.6, 0.0, 0.8], 0.5)])
        C = mu.nondegeneracy_constant(1.5)
        u = rng.standard_normal((5000, 3))
        assert C > 0
        assert np.all(mu.psi(u, 1.5) >= C * np.linalg.norm(u, axis=1) ** 1.5 * (1 - 1e-6))


class TestSpectralIncrement:
    def test_1d_collapses_to_standard(self, rng):
        mu = SpectralMeasure.from_atoms([([1.0], 0.5), ([-1.0], 0.5)])
        z = sample_spectral_increment(mu, 1.5, 1.0, rng, N)[:, 0]
        assert ks_statistic(z, lambda s: stable_cdf(s, 1.5)) < 1.63 / math.sqrt(N)

    def test_cf_matches_psi(self, rng):
        mu = SpectralMeasure.from_atoms([([1.0, 0.0], 0.5), ([2**-0.5, 2**-0.5], 0.5)])
        z = sample_spectral_increment(mu, 1.5, 0.7, rng, N)
        for u in ([1.0, 0.0], [0.3, -1.1], [0.8, 0.8]):
            emp = np.cos(z @ np.array(u)).mean()
            assert abs(emp - math.exp(-0.7 * mu.psi(np.array(u), 1.5))) < TOL

    def test_dt_doubling(self, rng):
        mu = SpectralMeasure.axes(2)
        z1 = sample_spectral_increment(mu, 1.3, 1.0, rng, N)
        z2 = sample_spectral_increment(mu, 1.3, 2.0, rng, N)
        for u in ([0.5, 0.0], [0.4, 0.7]):
            cf1 = np.cos(z1 @ np.array(u)).mean()
            cf2 = np.cos(z2 @ np.array(u)).mean()
            assert abs(cf2 - cf1**2) < 2 * TOL + TOL

    def test_self_similarity(self, rng):
        mu = SpectralMeasure.axes(2)
        dt, a = 0.3, 1.7
        z = sample_spectral_increment(mu, a, dt, rng, N)[:, 0]
        w = dt ** (1 / a) * sample_spectral_increment(mu, a, 1.0, rng, N)[:, 0]
        assert stats.ks_2samp(z, w).pvalue > 1e-3

    def test_bad_dt(self, rng):
        with pytest.raises(ValueError):
            sample_spectral_increment(SpectralMeasure.axes(1), 1.5, 0.0, rng)

    def test_shapes(self, rng):
        mu = SpectralMeasure.axes(3)
        assert sample_spectral_increment(mu, 1.5, 1.0, rng).shape == (3,)
        assert sample_spectral_increment(mu, 1.5, 1.0, rng, 5).shape == (5, 3)


class TestOU:
    def test_cauchy_value(self):
        assert ou_scale(1.0, 1.0, 1.0, math.log(2)) == pytest.approx(0.5, rel=1e-14)

    def test_t_zero(self):
        assert ou_scale(2.0, 3.0, 1.5, 0.0) == 0.0

    def test_stationary_limit(self):
        assert ou_scale(1.0, 1.0, 1.5, math.inf) == pytest.approx((1 / 1.5) ** (2 / 3), rel=1e-14)
        assert ou_scale(1.0, 1.0, 1.5, math.inf) == pytest.approx(0.76314, abs=5e-6)

    @given(st.floats(0.01, 50), st.floats(0.01, 10), st.floats(0.1, 1.99), st.floats(0, 10), st.floats(0, 10))
    @settings(max_examples=200, deadline=None)
    def test_monotone_in_t(self, g, b, a, t1, t2):
        lo, hi = sorted((t1, t2))
        assert ou_scale(g, b, a, lo) <= ou_scale(g, b, a, hi) <= ou_scale(g, b, a, math.inf) * (1 + 1e-12)

    def test_vectorised(self):
        out = ou_scale(np.array([1.0, 4.0]), np.array([1.0, 2.0]), 1.5, 1.0)
        assert out.shape == (2,)
        assert out[1] == pytest.approx(ou_scale(4.0, 2.0, 1.5, 1.0))

    def test_invalid(self):
        for args in ((0.0, 1.0, 1.5, 1.0), (1.0, -1.0, 1.5, 1.0), (1.0, 1.0, 1.5, -1.0)):
            with pytest.raises(ValueError):
                ou_scale(*args)

    def test_marginal_cf(self, rng):
        c = ou_scale(1.0, 1.0, 1.5, 1.0)
        x = sample_ou_marginal(1.0, 1.0, 1.5, 1.0, rng, N)
        for lam in (0.5, 1.0, 2.0):
            assert abs(np.cos(lam * x).mean() - math.exp(-abs(lam * c) ** 1.5)) < TOL

    def test_marginal_t0(self, rng):
        assert sample_ou_marginal(1.0, 1.0, 1.5, 0.0, rng) == 0.0

    def test_homothety(self, rng):
        x1 = sample_ou_marginal(3.0, 1.0, 1.4, 0.5, rng, N)
        x2 = sample_ou_marginal(3.0, 2.0, 1.4, 0.5, rng, N)
        assert stats.ks_2samp(2 * x1, x2).pvalue > 1e-3


def test_noise_selftest_rows(rng):
    rows = sn.noise_selftest(1.2, [0.5, 1.0, 2.0], N, rng)
    assert [r[0] for r in rows] == [0.5, 1.0, 2.0]
    for lam, emp, ana in rows:
        assert ana == math.exp(-abs(lam) ** 1.2)
        assert abs(emp - ana) < TOL

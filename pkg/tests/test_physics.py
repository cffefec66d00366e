import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ngtrack.physics import (PhysicsConfig, heterodyne_mc_oracle, heterodyne_qnl_error,
                             log_pnr_pmf, mean_photon_number, pnr_pmf, sample_detection)

IDEAL = PhysicsConfig(visibility=1.0)
OPERATING = PhysicsConfig()


def poisson_brute(nbar, m):
    """Direct Poisson sums in pure Python, tail by complement."""
    head = [math.exp(-nbar) * nbar ** d / math.factorial(d) for d in range(m)]
    return head + [1.0 - math.fsum(head)]


class TestMeanPhotonNumber:
    def test_perfect_nulling(self):
        assert mean_photon_number(5, 5, 0.0, IDEAL) == 0.0

    def test_constructive(self):
        assert mean_photon_number(5, 5, math.pi, IDEAL) == pytest.approx(20.0, abs=1e-12)

    def test_finite_visibility_residual(self):
        assert mean_photon_number(5, 5, 0.0, OPERATING) == pytest.approx(0.03, abs=1e-12)

    def test_efficiency_and_dark_counts(self):
        phys = PhysicsConfig(visibility=1.0, efficiency=0.5, dark_rate=0.1)
        assert mean_photon_number(5, 5, math.pi, phys) == pytest.approx(10.1)

    @pytest.mark.parametrize("A,B", [(-1, 1), (1, -0.5)])
    def test_negative_intensity_rejected(self, A, B):
        with pytest.raises(ValueError):
            mean_photon_number(A, B, 0.0, OPERATING)

    @given(st.floats(0, 30), st.floats(0, 30), st.floats(-10, 10))
    def test_symmetric_and_even(self, A, B, delta):
        v = mean_photon_number(A, B, delta, OPERATING)
        assert mean_photon_number(B, A, delta, OPERATING) == pytest.approx(v, rel=1e-12, abs=1e-12)
        assert mean_photon_number(A, B, -delta, OPERATING) == pytest.approx(v, rel=1e-12, abs=1e-12)

    @pytest.mark.parametrize("xi", [1.0, 0.997, 0.9])
    @pytest.mark.parametrize("A", [0.5, 5.0])
    def test_minimum_over_phase(self, xi, A):
        phases = np.linspace(-math.pi, math.pi, 4001)
        nbar = mean_photon_number(A, A, phases, PhysicsConfig(visibility=xi))
        assert nbar.min() == pytest.approx(2 * A * (1 - xi), abs=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PhysicsConfig(visibility=0.0)
        with pytest.raises(ValueError):
            PhysicsConfig(pnr=0)
        with pytest.raises(ValueError):
            PhysicsConfig(dark_rate=-1)


class TestPnrPmf:
    def test_vacuum(self):
        p = pnr_pmf(0.0, 10)
        assert p.shape == (11,)
        assert p[0] == 1.0 and np.all(p[1:] == 0)

    def test_p0_small_mean(self):
        assert pnr_pmf(0.03, 10)[0] == pytest.approx(0.9704455335485082, rel=1e-14)

    @pytest.mark.parametrize("nbar", [0, 0.01, 1, 5, 20, 100])
    @pytest.mark.parametrize("m", [1, 5, 10])
    def test_normalized(self, nbar, m):
        assert abs(pnr_pmf(nbar, m).sum() - 1.0) < 1e-12

    @pytest.mark.parametrize("nbar", [0.03, 0.7, 2.0, 9.5])
    def test_matches_direct_sums(self, nbar):
        np.testing.assert_allclose(pnr_pmf(nbar, 10), poisson_brute(nbar, 10), rtol=1e-10, atol=1e-15)

    def test_tail_lumping_large_mean(self):
        p = pnr_pmf(20.0, 10)
        assert p[-1] == pytest.approx(1 - sum(poisson_brute(20.0, 10)[:-1]), rel=1e-10)

    def test_negative_mean_rejected(self):
        with pytest.raises(ValueError):
            pnr_pmf(-0.1, 10)

    def test_log_pmf_consistent(self):
        nbar = np.array([0.0, 0.2, 3.0, 15.0])
        d = np.arange(11)
        with np.errstate(divide="ignore"):
            expected = np.log(pnr_pmf(nbar, 10))
        np.testing.assert_allclose(log_pnr_pmf(nbar[:, None], d[None, :], 10), expected,
                                   rtol=1e-10)


class TestSampleDetection:
    def test_vacuum_never_clicks(self):
        rng = np.random.default_rng(0)
        assert np.all(sample_detection(np.zeros(1000), 10, rng) == 0)
        assert sample_detection(0.0, 10, rng) == 0

    def test_saturates_at_cutoff(self):
        rng = np.random.default_rng(1)
        assert np.all(sample_detection(np.full(10_000, 100.0), 10, rng) == 10)

    def test_deterministic_given_seed(self):
        a = sample_detection(np.full(100, 2.0), 10, np.random.default_rng(5))
        b = sample_detection(np.full(100, 2.0), 10, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    @pytest.mark.slow
    def test_histogram_chi_square(self):
        rng = np.random.default_rng(2)
        n = 1_000_000
        draws = sample_detection(np.full(n, 2.0), 10, rng)
        observed = np.bincount(draws, minlength=11)
        expected = n * pnr_pmf(2.0, 10)
        keep = expected > 5
        chi2 = np.sum((observed[keep] - expected[keep]) ** 2 / expected[keep])
        dof = keep.sum() - 1
        # 3-sigma band of the chi-square distribution
        assert chi2 < dof + 3 * math.sqrt(2 * dof)


class TestHeterodyne:
    def test_zero_intensity_is_random_guess(self):
        assert heterodyne_qnl_error(0.0) == pytest.approx(0.75)

    def test_operating_point(self):
        assert heterodyne_qnl_error(5.0) == pytest.approx(0.0252, abs=5e-5)

    def test_monotone(self):
        n = np.linspace(0, 30, 301)
        assert np.all(np.diff(heterodyne_qnl_error(n)) < 0)

    def test_oracle_at_zero(self):
        p = heterodyne_mc_oracle(0.0, 200_000, np.random.default_rng(3))
        assert abs(p - 0.75) < 3 * math.sqrt(0.75 * 0.25 / 200_000)

    def test_oracle_large_intensity(self):
        assert heterodyne_mc_oracle(60.0, 100_000, np.random.default_rng(4)) == 0.0

    @pytest.mark.parametrize("nbar", [1, 2, 5, 10])
    def test_closed_form_matches_oracle(self, nbar):
        trials = 1_000_000
        p = heterodyne_qnl_error(nbar)
        est = heterodyne_mc_oracle(nbar, trials, np.random.default_rng(10 + nbar))
        assert abs(est - p) < 3 * math.sqrt(p * (1 - p) / trials)

    def test_oracle_rejects_no_trials(self):
        with pytest.raises(ValueError):
            heterodyne_mc_oracle(1.0, 0, np.random.default_rng(0))

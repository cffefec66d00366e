import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ngtrack.noise import (ConfigError, NoiseRealization, OUParams, PhaseNoiseParams,
                           generate_realization, generate_realizations, ou_step, phase_step)


class TestPhaseNoise:
    def test_step_variance_values(self):
        assert PhaseNoiseParams(2e3).step_variance == pytest.approx(1.2566e-4, rel=1e-4)
        assert PhaseNoiseParams(5e3).step_variance == pytest.approx(3.1416e-4, rel=1e-4)
        assert PhaseNoiseParams(5e3, dt=20e-9).step_variance == pytest.approx(6.2832e-4, rel=1e-4)

    def test_negative_bandwidth_rejected(self):
        with pytest.raises(ConfigError):
            PhaseNoiseParams(-1.0)
        with pytest.raises(ConfigError):
            PhaseNoiseParams(1.0, dt=0.0)

    def test_zero_bandwidth_is_constant(self):
        r = generate_realization(PhaseNoiseParams(0.0), OUParams(0, 0, 5.0), 1000, 3)
        assert np.all(r.phases == 0.0)
        assert np.all(r.intensities == 5.0)

    def test_variance_grows_linearly(self):
        params = PhaseNoiseParams(5e3)
        reals = generate_realizations(params, OUParams(0, 0, 5.0), 2001, range(2000))
        phases = np.array([r.phases for r in reals])
        t = np.arange(0, 2001, 100)
        var = phases[:, t].var(axis=0)
        slope = np.polyfit(t, var, 1)[0]
        assert slope == pytest.approx(params.step_variance, rel=0.05)

    def test_phase_step_increment(self):
        params = PhaseNoiseParams(5e3)
        rng = np.random.default_rng(0)
        incs = np.array([phase_step(0.0, params, rng) for _ in range(20_000)])
        assert incs.var() == pytest.approx(params.step_variance, rel=0.05)


class TestOU:
    def test_long_time_variance_roundtrip(self):
        ou = OUParams.from_long_time_variance(25e3, 1.5, 5.0)
        assert ou.sigma ** 2 == pytest.approx(2 * 25e3 * 1.5)
        assert ou.long_time_variance == pytest.approx(1.5)

    def test_unstable_step_rejected(self):
        ou = OUParams.from_long_time_variance(1e8, 1.0, 5.0)
        with pytest.raises(ConfigError):
            generate_realization(PhaseNoiseParams(0.0), ou, 10, 0)
        with pytest.raises(ConfigError):
            ou_step(5.0, ou, 10e-9, np.random.default_rng(0))

    def test_invalid_params(self):
        with pytest.raises(ConfigError):
            OUParams(gamma=-1.0)
        with pytest.raises(ConfigError):
            OUParams.from_long_time_variance(1.0, -0.1, 5.0)

    def test_single_step_by_hand(self):
        ou = OUParams(gamma=1e5, sigma=1e3, n0=5.0)
        dt = 1e-8
        z = np.random.default_rng(42).standard_normal()
        expected = 4.0 + 1e5 * (5.0 - 4.0) * dt + 1e3 * math.sqrt(dt) * z
        assert ou_step(4.0, ou, dt, np.random.default_rng(42)) == pytest.approx(expected, rel=1e-14)

    def test_step_clamps_at_zero(self):
        ou = OUParams(gamma=0.0, sigma=1e6, n0=0.0)
        out = ou_step(np.zeros(1000), ou, 1e-8, np.random.default_rng(1))
        assert np.all(out >= 0) and np.any(out == 0)

    def test_stationary_statistics(self):
        gamma, s2, dt = 25e3, 1.5, 10e-9
        ou = OUParams.from_long_time_variance(gamma, s2, 5.0)
        reals = generate_realizations(PhaseNoiseParams(0.0), ou, 60_000, range(300))
        A = np.array([r.intensities for r in reals])[:, 20_000:]
        assert A.mean() == pytest.approx(5.0, abs=0.05)
        assert A.var() == pytest.approx(s2, rel=0.05)
        lag = int(round(1 / (gamma * dt)))  # one correlation time
        x = A - A.mean()
        acov = np.mean(x[:, :-lag] * x[:, lag:])
        assert acov / A.var() == pytest.approx(math.exp(-1), abs=0.05)

    def test_clamp_rate_small(self):
        ou = OUParams.from_long_time_variance(25e3, 1.5, 5.0)
        reals = generate_realizations(PhaseNoiseParams(0.0), ou, 20_000, range(50))
        clamps = sum(r.clamp_events for r in reals)
        assert clamps / (50 * 20_000) < 0.01
        assert all(np.all(r.intensities >= 0) for r in reals)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0.0, 1e6), st.floats(0.0, 5.0), st.integers(0, 2 ** 32 - 1))
    def test_intensities_never_negative(self, gamma, s2, seed):
        ou = OUParams.from_long_time_variance(gamma, s2, 1.0)
        r = generate_realization(PhaseNoiseParams(1e3), ou, 500, seed)
        assert r.intensities[0] == 1.0 and r.phases[0] == 0.0
        assert np.all(r.intensities >= 0)


class TestRealizations:
    def test_deterministic_per_seed(self):
        ou = OUParams.from_long_time_variance(25e3, 1.0, 5.0)
        a = generate_realization(PhaseNoiseParams(5e3), ou, 500, 11)
        b = generate_realizations(PhaseNoiseParams(5e3), ou, 500, [3, 11])[1]
        np.testing.assert_array_equal(a.phases, b.phases)
        np.testing.assert_array_equal(a.intensities, b.intensities)

    def test_seed_sequence_accepted(self):
        ss = np.random.SeedSequence(5, spawn_key=(2, 0))
        r = generate_realization(PhaseNoiseParams(5e3), OUParams(0, 0, 5.0), 10, ss)
        assert len(r) == 10

    def test_csv_round_trip(self, tmp_path):
        ou = OUParams.from_long_time_variance(25e3, 1.0, 5.0)
        r = generate_realization(PhaseNoiseParams(5e3), ou, 200, 1)
        path = tmp_path / "noise.csv"
        r.to_csv(path)
        assert path.read_text().splitlines()[0] == "step,phase_rad,intensity"
        back = NoiseRealization.from_csv(path)
        np.testing.assert_array_equal(back.phases, r.phases)
        np.testing.assert_array_equal(back.intensities, r.intensities)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            NoiseRealization(np.zeros(3), np.zeros(4))

    def test_zero_steps_rejected(self):
        with pytest.raises(ValueError):
            generate_realization(PhaseNoiseParams(0.0), OUParams(), 0, 0)

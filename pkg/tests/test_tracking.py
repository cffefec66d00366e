import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ngtrack.estimators import MLPModel
from ngtrack.kalman import CalibrationTable, PowerLawFit
from ngtrack.noise import NoiseRealization, OUParams, PhaseNoiseParams, generate_realizations
from ngtrack.physics import heterodyne_qnl_error
from ngtrack.receiver import ReceiverConfig, simulate_symbols
from ngtrack.tracking import (Estimator, TrackerConfig, heterodyne_baseline, realization_seeds,
                              run_realizations, run_tracking, run_tracking_batch, wrap_phase)


def constant_net(phi=0.0, A=5.0):
    model = MLPModel.zeros((45, 2))
    model.biases[0][:] = [phi, A]
    return Estimator("nn", model=model)


def flat_calibration(var_A=0.5, var_phi=4e-3):
    fits = lambda v: [PowerLawFit(v, 0.0)] * 3
    return CalibrationTable("test", [2.0, 5.0, 10.0], fits(var_phi), fits(var_A))


class RecordingEstimator(Estimator):
    """Returns the LO settings unchanged and keeps every detection matrix."""

    def __init__(self):
        super().__init__("nn", model=MLPModel.zeros((45, 2)))
        self.seen = []

    def __call__(self, counts, B, receiver):
        self.seen.append(counts.copy())
        return np.asarray(B, dtype=float), np.zeros(len(B))


def realizations(cfg, n, master=0):
    seeds = [realization_seeds(master, i) for i in range(n)]
    reals = generate_realizations(cfg.phase, cfg.ou, cfg.symbols, [a for a, _ in seeds])
    return reals, [b for _, b in seeds]


def tracker(**kw):
    base = dict(n0=5.0, N=10, estimator="perfect", symbols=2000, phase=PhaseNoiseParams(0.0),
                ou=OUParams(0.0, 0.0, 5.0))
    base.update(kw)
    return TrackerConfig(**base)


class TestWrap:
    def test_values(self):
        assert wrap_phase(math.pi) == pytest.approx(math.pi)
        assert wrap_phase(-math.pi) == pytest.approx(math.pi)
        assert wrap_phase(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
        assert wrap_phase(0.3) == 0.3

    @given(st.floats(-1e3, 1e3))
    def test_range_and_congruence(self, x):
        w = float(wrap_phase(x))
        assert -math.pi < w <= math.pi + 1e-12
        assert math.cos(w) == pytest.approx(math.cos(x), abs=1e-9)
        assert math.sin(w) == pytest.approx(math.sin(x), abs=1e-9)


class TestPerfect:
    def test_lo_follows_channel(self):
        cfg = tracker(phase=PhaseNoiseParams(20e3), ou=OUParams.from_long_time_variance(25e3, 1.5, 5.0))
        reals, ms = realizations(cfg, 3)
        res = run_tracking_batch(cfg, reals, ms)
        for i, r in enumerate(reals):
            np.testing.assert_array_equal(res.B[i], r.intensities[:2000:10])
            np.testing.assert_array_equal(res.delta[i], r.phases[:2000:10])

    def test_phase_noise_is_removed_exactly(self):
        quiet = tracker()
        noisy = tracker(phase=PhaseNoiseParams(50e3))
        reals_q, ms = realizations(quiet, 4)
        reals_n, _ = realizations(noisy, 4)
        a = run_tracking_batch(quiet, reals_q, ms)
        b = run_tracking_batch(noisy, reals_n, ms)
        np.testing.assert_array_equal(a.errors, b.errors)

    def test_noiseless_error_rate(self):
        cfg = tracker(symbols=20_000)
        reals, ms = realizations(cfg, 10)
        rate = run_tracking_batch(cfg, reals, ms).errors.mean()
        # independent reference from the bare receiver
        rng = np.random.default_rng(99)
        n = 1_000_000
        k = rng.integers(0, 4, n)
        _, _, g = simulate_symbols(5.0, 0.0, 5.0, k, rng.random((n, 10)), ReceiverConfig())
        ref = np.mean(g != k)
        assert abs(rate - ref) < 4 * math.sqrt(ref / 200_000)

    def test_independent_of_period(self):
        cfg10, cfg7 = tracker(N=10), tracker(N=7)
        reals, ms = realizations(cfg10, 2)
        a = run_tracking_batch(cfg10, reals, ms)
        b = run_tracking_batch(cfg7, reals, ms)
        np.testing.assert_array_equal(a.errors, b.errors)


def test_untracked_phase_tends_to_random_guessing():
    cfg = tracker(estimator="none", symbols=20_000, phase=PhaseNoiseParams(1e6))
    reals, ms = realizations(cfg, 5)
    res = run_tracking_batch(cfg, reals, ms)
    assert np.all(res.B == 5.0) and np.all(res.delta == 0.0)
    assert res.errors[:, 10_000:].mean() == pytest.approx(0.75, abs=0.05)


class TestClosedLoop:
    def test_detection_matrix_lifecycle(self):
        cfg = tracker(estimator="nn", N=10, symbols=95, use_kalman=False)
        est = RecordingEstimator()
        reals, ms = realizations(cfg, 2)
        res = run_tracking_batch(cfg, reals, ms, est)
        assert len(est.seen) == 9  # the trailing partial period is not estimated
        for counts in est.seen:
            assert np.all(counts.sum(axis=(1, 2)) == 10 * 10)
        assert np.isnan(res.raw_A[:, 9]).all() and not np.isnan(res.raw_A[:, :9]).any()

    def test_correction_accumulates_without_filter(self):
        cfg = tracker(estimator="nn", N=10, symbols=300, use_kalman=False)
        reals, ms = realizations(cfg, 1)
        res = run_tracking_batch(cfg, reals, ms, constant_net(phi=0.1, A=4.0))
        np.testing.assert_allclose(res.delta[0], wrap_phase(0.1 * np.arange(30)), atol=1e-12)
        assert res.B[0, 0] == 5.0 and np.all(res.B[0, 1:] == 4.0)

    def test_correction_uses_filtered_estimate(self):
        cfg = tracker(estimator="nn", N=10, symbols=100, phase=PhaseNoiseParams(5e3),
                      ou=OUParams.from_long_time_variance(25e3, 1.0, 5.0))
        est = constant_net(phi=0.2, A=6.0)
        est.calibration = flat_calibration()
        reals, ms = realizations(cfg, 1)
        res = run_tracking_batch(cfg, reals, ms, est)
        np.testing.assert_allclose(res.delta[0, 1:], np.cumsum(res.filtered_phi[0, :-1]), atol=1e-12)
        np.testing.assert_array_equal(res.B[0, 1:], res.filtered_A[0, :-1])
        # first period: prior variance is N * step variance
        s = 10 * cfg.phase.step_variance
        assert res.filtered_phi[0, 0] == pytest.approx(0.2 * s / (s + 4e-3))

    def test_missing_estimator_or_calibration(self):
        reals, ms = realizations(tracker(), 1)
        with pytest.raises(ValueError):
            run_tracking_batch(tracker(estimator="nn"), reals, ms)
        with pytest.raises(ValueError):
            run_tracking_batch(tracker(estimator="nn"), reals, ms, constant_net())

    def test_short_realization_rejected(self):
        cfg = tracker(symbols=100)
        r = NoiseRealization(np.zeros(50), np.full(50, 5.0))
        with pytest.raises(ValueError):
            run_tracking(cfg, r, 0)

    def test_config_syncs_mean_intensity(self):
        cfg = tracker(n0=2.0, ou=OUParams(25e3, 10.0, 5.0))
        assert cfg.ou.n0 == 2.0


class TestBaselines:
    def test_constant_intensity(self):
        r = NoiseRealization(np.zeros(100), np.full(100, 5.0))
        assert heterodyne_baseline(r) == pytest.approx(float(heterodyne_qnl_error(5.0)), rel=1e-12)

    def test_amplitude_noise_raises_baseline(self):
        cfg = tracker(symbols=50_000, ou=OUParams.from_long_time_variance(25e3, 1.5, 5.0))
        reals, _ = realizations(cfg, 10)
        het = np.mean([heterodyne_baseline(r) for r in reals])
        assert het > heterodyne_qnl_error(5.0)

    def test_ordering(self):
        cfg = tracker(symbols=20_000, phase=PhaseNoiseParams(5e3),
                      ou=OUParams.from_long_time_variance(25e3, 1.5, 5.0))
        perfect, het = run_realizations(cfg, 5, 0)
        none, _ = run_realizations(TrackerConfig(**{**cfg.__dict__, "estimator": "none"}), 5, 0)
        assert perfect.mean() < het.mean() < none.mean()


class TestDeterminism:
    def test_batch_and_worker_invariance(self):
        cfg = tracker(estimator="nn", symbols=500, phase=PhaseNoiseParams(5e3),
                      ou=OUParams.from_long_time_variance(25e3, 1.0, 5.0))
        est = constant_net(phi=0.01, A=5.0)
        est.calibration = flat_calibration()
        a = run_realizations(cfg, 5, 3, est, batch=5)
        b = run_realizations(cfg, 5, 3, est, batch=2)
        c = run_realizations(cfg, 5, 3, est, workers=2, batch=1)
        for x, y in ((a, b), (a, c)):
            np.testing.assert_array_equal(x[0], y[0])
            np.testing.assert_array_equal(x[1], y[1])

    def test_seed_changes_results(self):
        cfg = tracker(symbols=5000)
        a, _ = run_realizations(cfg, 3, 0)
        b, _ = run_realizations(cfg, 3, 1)
        assert not np.array_equal(a, b)

    def test_baselines_only(self):
        rates, het = run_realizations(tracker(symbols=100), 3, 0, track=False)
        assert rates.size == 0 and het.size == 3


def test_trajectory_csv(tmp_path):
    cfg = tracker(estimator="nn", N=10, symbols=50, use_kalman=False)
    reals, ms = realizations(cfg, 1)
    res = run_tracking(cfg, reals[0], ms[0], constant_net(phi=0.05))
    path = tmp_path / "traj.csv"
    res.write_trajectory(path, reals[0])
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["tau", "true_phase", "true_intensity", "delta", "B", "raw_A", "raw_phi",
                       "filtered_A", "filtered_phi", "error_flag"]
    assert len(rows) == 51
    assert rows[1][5] == "nan" and float(rows[11][6]) == pytest.approx(0.05)
    assert float(rows[11][3]) == pytest.approx(0.05)

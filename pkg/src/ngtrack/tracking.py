"""Closed-loop noise tracking.

Every symbol is discriminated against the current LO settings ``(B, delta)``
and its (relative phase, count) pairs are binned into a detection matrix.
After every ``N`` symbols the matrix is turned into raw estimates, filtered,
and fed forward: ``B <- A_filtered`` and ``delta <- delta + phi_filtered``.

Many realizations are simulated side by side. Each one owns its random
streams, so its trajectory does not depend on how realizations are batched
or distributed across workers.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimators import MIN_INTENSITY, BayesGrid, MLPModel, bayes_estimate_batch, nn_estimate_batch
from .kalman import CalibrationTable, KalmanState, kalman_filter
from .noise import NoiseRealization, OUParams, PhaseNoiseParams, generate_realizations
from .physics import heterodyne_qnl_error
from .receiver import ReceiverConfig, bin_counts, simulate_symbols

__all__ = [
    "ESTIMATORS",
    "TrackerConfig",
    "TrackingResult",
    "Estimator",
    "realization_seeds",
    "run_tracking",
    "run_tracking_batch",
    "run_realizations",
    "heterodyne_baseline",
    "wrap_phase",
]

ESTIMATORS = ("nn", "bayes", "perfect", "none")
_BLOCK_SYMBOLS = 2048


@dataclass(frozen=True)
class TrackerConfig:
    n0: float = 5.0
    N: int = 10
    estimator: str = "nn"
    symbols: int = 20_000
    phase: PhaseNoiseParams = field(default_factory=PhaseNoiseParams)
    ou: OUParams = field(default_factory=OUParams)
    receiver: ReceiverConfig = field(default_factory=ReceiverConfig)
    use_kalman: bool = True

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}; choose from {ESTIMATORS}")
        if self.symbols < 1:
            raise ValueError("symbols must be >= 1")
        if self.ou.n0 != self.n0:
            object.__setattr__(self, "ou", OUParams(self.ou.gamma, self.ou.sigma, self.n0))


@dataclass
class Estimator:
    """Raw-estimate source plus the variances the Kalman filter needs.

    ``kind`` is ``"nn"`` (needs ``model``) or ``"bayes"`` (uses ``grid``).
    """

    kind: str
    model: MLPModel | None = None
    grid: BayesGrid | None = None
    calibration: CalibrationTable | None = None

    def __post_init__(self):
        if self.kind == "nn" and self.model is None:
            raise ValueError("network estimator needs a model")
        if self.kind == "bayes" and self.grid is None:
            self.grid = BayesGrid()
        if self.kind not in ("nn", "bayes"):
            raise ValueError(f"{self.kind!r} is not a data-driven estimator")

    def __call__(self, counts, B, receiver: ReceiverConfig):
        if self.kind == "nn":
            return nn_estimate_batch(self.model, counts, B)
        A_hat, phi_hat, _ = bayes_estimate_batch(counts, B, self.grid, receiver)
        return A_hat, phi_hat


@dataclass
class TrackingResult:
    """Per-realization outputs; period arrays have shape ``(R, periods)``."""

    errors: np.ndarray                # (R, symbols) bool
    B: np.ndarray                     # LO intensity in force during each period
    delta: np.ndarray                 # LO phase correction during each period
    raw_A: np.ndarray
    raw_phi: np.ndarray
    filtered_A: np.ndarray
    filtered_phi: np.ndarray
    period_length: int

    @property
    def error_rates(self) -> np.ndarray:
        return self.errors.mean(axis=1)

    def realization(self, i: int) -> "TrackingResult":
        sl = slice(i, i + 1)
        return TrackingResult(self.errors[sl], self.B[sl], self.delta[sl], self.raw_A[sl],
                              self.raw_phi[sl], self.filtered_A[sl], self.filtered_phi[sl],
                              self.period_length)

    def write_trajectory(self, path, realization: NoiseRealization, index: int = 0):
        """Per-symbol CSV: LO settings in force and the latest estimates."""
        S = self.errors.shape[1]
        period = np.arange(S) // self.period_length
        last = period - 1  # estimates available while running this period
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tau", "true_phase", "true_intensity", "delta", "B", "raw_A", "raw_phi",
                        "filtered_A", "filtered_phi", "error_flag"])
            for t in range(S):
                p, q = period[t], last[t]
                est = ([self.raw_A[index, q], self.raw_phi[index, q], self.filtered_A[index, q],
                        self.filtered_phi[index, q]] if q >= 0 else [math.nan] * 4)
                w.writerow([t, repr(float(realization.phases[t])),
                            repr(float(realization.intensities[t])),
                            repr(float(self.delta[index, p])), repr(float(self.B[index, p]))]
                           + [repr(float(x)) for x in est] + [int(self.errors[index, t])])


def wrap_phase(x):
    """Map to (-pi, pi]; values already in range are returned unchanged."""
    x = np.asarray(x, dtype=float)
    inside = (x > -np.pi) & (x <= np.pi)
    return np.where(inside, x, np.pi - np.mod(np.pi - x, 2.0 * np.pi))[()]


def realization_seeds(master_seed: int, index: int):
    """``(noise_seed, measurement_seed)`` for realization ``index``."""
    return (np.random.SeedSequence(master_seed, spawn_key=(index, 0)),
            np.random.SeedSequence(master_seed, spawn_key=(index, 1)))


class _Uniforms:
    """Per-realization uniform streams, served in symbol order."""

    def __init__(self, seeds, width: int, block: int):
        self.rngs = [np.random.default_rng(s) for s in seeds]
        self.width = width
        self.block = block
        self.buf = np.empty((len(self.rngs), 0, width))
        self.start = 0

    def take(self, s0: int, s1: int) -> np.ndarray:
        while self.start + self.buf.shape[1] < s1:
            keep = self.buf[:, s0 - self.start:]
            new = np.stack([r.random((self.block, self.width)) for r in self.rngs])
            self.start = s0
            self.buf = np.concatenate([keep, new], axis=1)
        return self.buf[:, s0 - self.start:s1 - self.start]


def run_tracking_batch(cfg: TrackerConfig, realizations, measurement_seeds,
                       estimator: Estimator | None = None) -> TrackingResult:
    """Run the tracking loop over several noise realizations at once."""
    rc = cfg.receiver
    M, L, N, S = rc.M, rc.L, cfg.N, cfg.symbols
    R = len(realizations)
    if len(measurement_seeds) != R:
        raise ValueError("one measurement seed per realization required")
    for r in realizations:
        if len(r) < S:
            raise ValueError(f"realization has {len(r)} steps, need {S}")
    data_driven = cfg.estimator in ("nn", "bayes")
    if data_driven:
        if estimator is None or estimator.kind != cfg.estimator:
            raise ValueError(f"estimator {cfg.estimator!r} requested but not supplied")
        if cfg.use_kalman and estimator.calibration is None:
            raise ValueError("Kalman filtering needs a calibration table")
    A_true = np.stack([r.intensities[:S] for r in realizations])
    phi_true = np.stack([r.phases[:S] for r in realizations])

    n_periods = -(-S // N)
    B = np.full(R, float(cfg.n0))
    delta = np.zeros(R)
    state = KalmanState(B=B, sigma2_phi=np.zeros(R), sigma2_A=np.zeros(R))
    if data_driven and cfg.use_kalman:
        var_A, var_phi = estimator.calibration.variances(cfg.n0, N)
    step_var = cfg.phase.step_variance

    out = {k: np.full((R, n_periods), np.nan) for k in
           ("B", "delta", "raw_A", "raw_phi", "filtered_A", "filtered_phi")}
    errors = np.zeros((R, S), dtype=bool)
    rows = np.arange(R)
    block = N * max(1, _BLOCK_SYMBOLS // N)
    uniforms = _Uniforms(measurement_seeds, L + 1, block)

    for p in range(n_periods):
        s0, s1 = p * N, min((p + 1) * N, S)
        u = uniforms.take(s0, s1)
        k = np.minimum((u[..., L] * M).astype(np.int64), M - 1)
        A_p, phi_p = A_true[:, s0:s1], phi_true[:, s0:s1]
        if cfg.estimator == "perfect":
            B_sym, d_sym = A_p, phi_p
            out["B"][:, p] = A_p[:, 0]
            out["delta"][:, p] = phi_p[:, 0]
        else:
            B_sym, d_sym = B[:, None], delta[:, None]
            out["B"][:, p] = B
            out["delta"][:, p] = delta
        lo, d, g = simulate_symbols(A_p, phi_p - d_sym, B_sym, k, u[..., :L], rc)
        errors[:, s0:s1] = g != k

        if not data_driven or s1 - s0 < N:
            continue
        owner = np.broadcast_to(rows[:, None], g.shape)
        counts = bin_counts(lo, d, g, rc, groups=owner, n_groups=R)
        raw_A, raw_phi = estimator(counts, B, rc)
        if cfg.use_kalman:
            state.B = B
            f_A, f_phi = kalman_filter(state, raw_A, raw_phi, N, step_var, cfg.ou,
                                       cfg.phase.dt, var_A, var_phi)
        else:
            f_A, f_phi = np.maximum(raw_A, MIN_INTENSITY), raw_phi
        out["raw_A"][:, p], out["raw_phi"][:, p] = raw_A, raw_phi
        out["filtered_A"][:, p], out["filtered_phi"][:, p] = f_A, f_phi
        B = np.asarray(f_A, dtype=float)
        delta = wrap_phase(delta + f_phi)

    return TrackingResult(errors=errors, period_length=N, **out)


def run_tracking(cfg: TrackerConfig, realization: NoiseRealization, rng_seed,
                 estimator: Estimator | None = None) -> TrackingResult:
    """Single-realization convenience wrapper around :func:`run_tracking_batch`."""
    return run_tracking_batch(cfg, [realization], [rng_seed], estimator)


def heterodyne_baseline(realization: NoiseRealization, symbols: int | None = None) -> float:
    """Average ideal-heterodyne error over the instantaneous intensities,
    assuming the phase is tracked perfectly."""
    A = realization.intensities if symbols is None else realization.intensities[:symbols]
    return float(np.mean(heterodyne_qnl_error(A)))


def _run_chunk(args):
    cfg, master_seed, indices, estimator, batch, track = args
    rates, het = [], []
    for s in range(0, len(indices), batch):
        idx = indices[s:s + batch]
        seeds = [realization_seeds(master_seed, i) for i in idx]
        reals = generate_realizations(cfg.phase, cfg.ou, cfg.symbols, [a for a, _ in seeds])
        het.extend(heterodyne_baseline(r, cfg.symbols) for r in reals)
        if track:
            res = run_tracking_batch(cfg, reals, [b for _, b in seeds], estimator)
            rates.extend(res.error_rates.tolist())
    return rates, het


def run_realizations(cfg: TrackerConfig, realizations: int, master_seed: int,
                     estimator: Estimator | None = None, workers: int = 1,
                     batch: int = 100, track: bool = True):
    """Error rate of every realization ``0..realizations-1`` plus the matching
    heterodyne baselines, as two arrays in realization order.

    Results do not depend on ``workers`` or ``batch``. With ``track=False``
    only the baselines are computed and the rate array is empty.
    """
    indices = list(range(realizations))
    if workers <= 1:
        rates, het = _run_chunk((cfg, master_seed, indices, estimator, batch, track))
    else:
        size = -(-realizations // workers)
        jobs = [(cfg, master_seed, indices[i:i + size], estimator, batch, track)
                for i in range(0, realizations, size)]
        rates, het = [], []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for r, h in pool.map(_run_chunk, jobs):
                rates.extend(r)
                het.extend(h)
    return np.array(rates), np.array(het)

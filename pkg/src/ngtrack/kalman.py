"""Scalar Kalman filtering of the raw phase and intensity estimates, plus the
empirical estimator-variance calibration the filter needs.

All predict/update functions are plain arithmetic and broadcast over numpy
arrays, so one call can filter many independent trackers at once.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimators import MIN_INTENSITY
from .noise import ConfigError, OUParams
from .receiver import ReceiverConfig, bin_counts, simulate_symbols

__all__ = [
    "KalmanState",
    "predict_phase",
    "update_phase",
    "predict_intensity",
    "update_intensity",
    "kalman_filter",
    "PowerLawFit",
    "CalibrationTable",
    "fit_power_law",
    "simulate_detection_matrices",
    "calibrate_variance",
]


@dataclass
class KalmanState:
    B: float | np.ndarray
    sigma2_phi: float | np.ndarray = 0.0
    sigma2_A: float | np.ndarray = 0.0
    delta: float | np.ndarray = 0.0


def predict_phase(sigma2_phi, n: int, step_variance: float):
    """Random-walk prediction over ``n`` symbols: mean 0, variance grows by
    ``n * step_variance``."""
    return np.zeros_like(np.asarray(sigma2_phi, dtype=float))[()], sigma2_phi + n * step_variance


def update_phase(raw_phi, predicted_mean, predicted_var, estimator_var):
    """Returns ``(filtered_phi, posterior_var, gain)``."""
    if np.any(np.asarray(estimator_var) <= 0):
        raise ValueError("estimator variance must be > 0")
    gain = predicted_var / (predicted_var + estimator_var)
    return gain * raw_phi + (1.0 - gain) * predicted_mean, (1.0 - gain) * predicted_var, gain


def predict_intensity(sigma2_A, B, n: int, ou: OUParams, dt: float):
    """Propagate mean and variance of the Euler OU recursion over ``n`` steps,
    starting from the LO intensity ``B`` used in the last period."""
    ou.check_stable(dt)
    q = 1.0 - ou.gamma * dt
    k = np.arange(n)
    mean = q ** n * np.asarray(B, dtype=float) + ou.gamma * ou.n0 * dt * np.sum(q ** k)
    var = q ** (2 * n) * np.asarray(sigma2_A, dtype=float) + ou.sigma ** 2 * dt * np.sum(q ** (2 * k))
    return mean[()], var[()]


def update_intensity(raw_A, predicted_mean, predicted_var, estimator_var):
    """Returns ``(filtered_A, posterior_var, gain)``; ``filtered_A`` is
    clamped to the minimum LO intensity."""
    if np.any(np.asarray(estimator_var) <= 0):
        raise ValueError("estimator variance must be > 0")
    gain = predicted_var / (predicted_var + estimator_var)
    filtered = np.maximum(gain * raw_A + (1.0 - gain) * predicted_mean, MIN_INTENSITY)
    return filtered[()], (1.0 - gain) * predicted_var, gain


def kalman_filter(state: KalmanState, raw_A, raw_phi, n: int, phase_step_variance: float,
                  ou: OUParams, dt: float, var_A, var_phi):
    """One filtering cycle; updates ``state`` variances in place and returns
    ``(filtered_A, filtered_phi)``. LO settings are left to the caller."""
    y_phi, s_phi = predict_phase(state.sigma2_phi, n, phase_step_variance)
    y_A, s_A = predict_intensity(state.sigma2_A, state.B, n, ou, dt)
    phi, state.sigma2_phi, _ = update_phase(raw_phi, y_phi, s_phi, var_phi)
    A, state.sigma2_A, _ = update_intensity(raw_A, y_A, s_A, var_A)
    return A, phi


@dataclass(frozen=True)
class PowerLawFit:
    coeff: float
    exponent: float

    def __call__(self, n):
        return self.coeff * np.asarray(n, dtype=float) ** self.exponent


def fit_power_law(n_values, variances) -> PowerLawFit:
    """Least squares of ``log var = log c + p log N``."""
    n_values = np.asarray(n_values, dtype=float)
    variances = np.asarray(variances, dtype=float)
    if np.any(variances <= 0) or not np.all(np.isfinite(variances)):
        raise ValueError("power-law fit needs strictly positive finite variances")
    if len(np.unique(n_values)) < 2:
        raise ValueError("power-law fit needs at least two distinct N")
    p, logc = np.polyfit(np.log(n_values), np.log(variances), 1)
    return PowerLawFit(float(math.exp(logc)), float(p))


@dataclass
class CalibrationTable:
    """Estimator variances as power laws in N, one pair per anchor intensity.

    Queries at intensities between anchors interpolate linearly; outside the
    anchor range the nearest anchor is used.
    """

    estimator: str
    anchors: list
    phase_fits: list
    intensity_fits: list
    measurements: dict = field(default_factory=dict)

    def variances(self, n0: float, n: int):
        """``(var_A, var_phi)`` for mean intensity ``n0`` and period ``n``."""
        va = [f(n) for f in self.intensity_fits]
        vp = [f(n) for f in self.phase_fits]
        return float(np.interp(n0, self.anchors, va)), float(np.interp(n0, self.anchors, vp))

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "anchors": list(map(float, self.anchors)),
            "phase_fits": [[f.coeff, f.exponent] for f in self.phase_fits],
            "intensity_fits": [[f.coeff, f.exponent] for f in self.intensity_fits],
            "measurements": self.measurements,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CalibrationTable":
        try:
            return cls(
                estimator=str(doc["estimator"]),
                anchors=[float(a) for a in doc["anchors"]],
                phase_fits=[PowerLawFit(float(c), float(p)) for c, p in doc["phase_fits"]],
                intensity_fits=[PowerLawFit(float(c), float(p)) for c, p in doc["intensity_fits"]],
                measurements=doc.get("measurements", {}),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid calibration table: {exc}") from exc

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CalibrationTable":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed calibration file at offset {exc.pos}") from exc
        return cls.from_dict(doc)


def simulate_detection_matrices(A: float, B: float, phi: float, n: int, trials: int,
                                cfg: ReceiverConfig, rng: np.random.Generator,
                                max_symbols: int = 400_000):
    """``trials`` independent detection matrices of ``n`` symbols each, all at
    fixed input ``(A, phi)`` and LO ``(B, 0)``."""
    out = np.empty((trials, cfg.M, cfg.m + 1), dtype=np.int64)
    per = max(1, max_symbols // n)
    for s in range(0, trials, per):
        t = min(per, trials - s)
        k = rng.integers(0, cfg.M, (t, n))
        u = rng.random((t, n, cfg.L))
        lo, d, g = simulate_symbols(A, phi, B, k, u, cfg)
        owner = np.broadcast_to(np.arange(t)[:, None], (t, n))
        out[s:s + t] = bin_counts(lo, d, g, cfg, groups=owner, n_groups=t)
    return out


def calibrate_variance(estimate, cfg: ReceiverConfig, rng: np.random.Generator,
                       anchors=(2.0, 5.0, 10.0), n_values=(2, 5, 10, 20, 50, 100, 200),
                       trials: int = 10_000, name: str = "estimator") -> CalibrationTable:
    """Measure raw-estimate variances at ``A = B = anchor``, ``phi = 0`` for
    each ``N`` and fit power laws.

    ``estimate(counts, B) -> (A_hat, phi_hat)`` maps a stack of detection
    matrices to raw estimates.
    """
    phase_fits, intensity_fits, meas = [], [], {}
    for a in anchors:
        va, vp = [], []
        for n in n_values:
            counts = simulate_detection_matrices(a, a, 0.0, int(n), trials, cfg, rng)
            A_hat, phi_hat = estimate(counts, np.full(trials, float(a)))
            va.append(float(np.var(A_hat)))
            vp.append(float(np.var(phi_hat)))
        try:
            intensity_fits.append(fit_power_law(n_values, va))
            phase_fits.append(fit_power_law(n_values, vp))
        except ValueError as exc:
            raise ValueError(f"degenerate calibration at anchor {a}: {exc}") from exc
        meas[repr(float(a))] = {"n": [int(n) for n in n_values], "var_A": va, "var_phi": vp}
    return CalibrationTable(name, [float(a) for a in anchors], phase_fits, intensity_fits, meas)

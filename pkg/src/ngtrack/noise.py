"""Channel noise: Gaussian phase random walk and Ornstein-Uhlenbeck intensity.

Both processes advance once per symbol period ``dt``. The intensity update
is the plain Euler-Maruyama difference form, clamped at zero.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DEFAULT_DT",
    "PhaseNoiseParams",
    "OUParams",
    "NoiseRealization",
    "phase_step",
    "ou_step",
    "generate_realization",
    "generate_realizations",
]

log = logging.getLogger(__name__)

DEFAULT_DT = 10e-9  # 100 MHz repetition rate


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PhaseNoiseParams:
    bandwidth: float = 0.0  # Hz
    dt: float = DEFAULT_DT

    def __post_init__(self):
        if self.bandwidth < 0:
            raise ConfigError("phase-noise bandwidth must be >= 0")
        if self.dt <= 0:
            raise ConfigError("symbol period must be > 0")

    @property
    def step_variance(self) -> float:
        return 2.0 * math.pi * self.bandwidth * self.dt


@dataclass(frozen=True)
class OUParams:
    """Intensity noise ``dA = gamma (n0 - A) dt + sigma sqrt(dt) dW``."""

    gamma: float = 0.0  # Hz
    sigma: float = 0.0  # intensity / sqrt(s)
    n0: float = 5.0

    def __post_init__(self):
        if self.gamma < 0 or self.sigma < 0:
            raise ConfigError("gamma and sigma must be >= 0")
        if self.n0 < 0:
            raise ConfigError("mean intensity must be >= 0")

    @classmethod
    def from_long_time_variance(cls, gamma: float, sigma_inf2: float, n0: float) -> "OUParams":
        """Build from the stationary variance ``sigma**2 / (2 gamma)``."""
        if sigma_inf2 < 0:
            raise ConfigError("long-time variance must be >= 0")
        return cls(gamma=gamma, sigma=math.sqrt(2.0 * gamma * sigma_inf2), n0=n0)

    @property
    def long_time_variance(self) -> float:
        if self.gamma == 0:
            return math.inf if self.sigma > 0 else 0.0
        return self.sigma ** 2 / (2.0 * self.gamma)

    def check_stable(self, dt: float):
        if self.gamma * dt >= 1.0:
            raise ConfigError(f"gamma*dt = {self.gamma * dt:g} >= 1: discretization unstable")


@dataclass
class NoiseRealization:
    phases: np.ndarray
    intensities: np.ndarray
    seed: object = None
    clamp_events: int = 0

    def __post_init__(self):
        if len(self.phases) != len(self.intensities):
            raise ValueError("phase and intensity series differ in length")

    def __len__(self):
        return len(self.phases)

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "phase_rad", "intensity"])
            for i, (p, a) in enumerate(zip(self.phases, self.intensities)):
                w.writerow([i, repr(float(p)), repr(float(a))])

    @classmethod
    def from_csv(cls, path) -> "NoiseRealization":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(phases=data[:, 1].copy(), intensities=data[:, 2].copy())


def phase_step(phi: float, params: PhaseNoiseParams, rng: np.random.Generator) -> float:
    return phi + rng.normal(0.0, math.sqrt(params.step_variance))


def ou_step(A, params: OUParams, dt: float, rng: np.random.Generator):
    """One Euler-Maruyama step of the intensity process, clamped at 0."""
    params.check_stable(dt)
    A = np.asarray(A, dtype=float)
    if np.any(A < 0):
        raise ValueError("intensity must be non-negative")
    dW = rng.standard_normal(A.shape)
    new = A + params.gamma * (params.n0 - A) * dt + params.sigma * math.sqrt(dt) * dW
    new = np.maximum(new, 0.0)
    return new if new.ndim else float(new)


def _ou_path(n0, params, dt, dW):
    """Vectorized-over-rows clamped Euler recursion; ``dW`` is (R, steps-1)."""
    R, n = dW.shape
    out = np.empty((R, n + 1))
    out[:, 0] = n0
    decay = 1.0 - params.gamma * dt
    drive = params.gamma * params.n0 * dt
    kick = params.sigma * math.sqrt(dt) * dW
    a = out[:, 0].copy()
    clamps = 0
    for t in range(n):
        a = decay * a + drive + kick[:, t]
        neg = a < 0
        if neg.any():
            clamps += int(neg.sum())
            a[neg] = 0.0
        out[:, t + 1] = a
    return out, clamps


def generate_realizations(phase_params: PhaseNoiseParams, ou_params: OUParams, steps: int,
                          seeds) -> list:
    """Generate one realization per seed.

    Each realization draws from its own generator (phase increments first,
    then intensity increments), so realization ``i`` depends only on
    ``seeds[i]``. Seeds may be ints or :class:`numpy.random.SeedSequence`.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    dt = phase_params.dt
    ou_params.check_stable(dt)
    seeds = list(seeds)
    sd = math.sqrt(phase_params.step_variance)
    phase_inc = np.empty((len(seeds), steps - 1))
    dW = np.empty((len(seeds), steps - 1))
    for i, s in enumerate(seeds):
        rng = np.random.default_rng(s)
        phase_inc[i] = rng.standard_normal(steps - 1)
        dW[i] = rng.standard_normal(steps - 1)
    phases = np.zeros((len(seeds), steps))
    if sd > 0:
        np.cumsum(phase_inc * sd, axis=1, out=phases[:, 1:])
    if ou_params.sigma == 0 and ou_params.gamma == 0:
        intensities = np.full((len(seeds), steps), float(ou_params.n0))
        clamps = 0
    else:
        intensities, clamps = _ou_path(ou_params.n0, ou_params, dt, dW)
    if clamps:
        log.info("intensity clamped at 0 in %d of %d steps", clamps, intensities.size)
    out = []
    for i, s in enumerate(seeds):
        n_clamp = int(np.count_nonzero(intensities[i, 1:] == 0.0)) if clamps else 0
        out.append(NoiseRealization(phases[i], intensities[i], seed=s, clamp_events=n_clamp))
    return out


def generate_realization(phase_params: PhaseNoiseParams, ou_params: OUParams, steps: int,
                         seed) -> NoiseRealization:
    """Phase and intensity series with ``phi(0) = 0`` and ``A(0) = n0``."""
    return generate_realizations(phase_params, ou_params, steps, [seed])[0]

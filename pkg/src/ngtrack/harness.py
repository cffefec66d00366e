"""Experiment configuration, seeded sweeps and CSV result emission.

A sweep is the Cartesian product of intensities, phase-noise bandwidths,
amplitude-noise bandwidths, long-time variances and estimation periods.
Every grid point runs the same seeded noise realizations for each
estimator, and one CSV row per (grid point, estimator) is appended as soon
as the point completes.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .estimators import BayesGrid
from .kalman import CalibrationTable, calibrate_variance
from .noise import DEFAULT_DT, ConfigError, OUParams, PhaseNoiseParams
from .physics import PhysicsConfig
from .receiver import ReceiverConfig
from .tracking import Estimator, TrackerConfig, run_realizations
from .training import load_model

__all__ = [
    "EXPERIMENTS",
    "RESULT_COLUMNS",
    "SweepConfig",
    "ConfigError",
    "load_config",
    "config_from_dict",
    "build_estimators",
    "run_sweep",
    "emit_results",
    "ResultWriter",
]

log = logging.getLogger(__name__)

EXPERIMENTS = ("fig1b", "single_run", "phase_bw_sweep", "amp_bw_sweep", "sigma_inf_sweep",
               "n_tradeoff")
ALL_ESTIMATORS = ("nn", "bayes", "perfect", "none", "heterodyne")
RESULT_COLUMNS = ("experiment", "n0", "phase_bandwidth_hz", "amp_bandwidth_hz", "sigma_inf2",
                  "N", "estimator", "mean_error", "std_error", "realizations", "symbols", "seed")

# grid defaults per experiment; anything in the config file wins
PRESETS = {
    "fig1b": dict(phase_bandwidths=[2e3], amp_bandwidths=[25e3], sigma_inf2=[1.5],
                  estimators=["perfect", "none", "heterodyne"]),
    "single_run": dict(phase_bandwidths=[2e3], amp_bandwidths=[25e3], sigma_inf2=[1.5]),
    "phase_bw_sweep": dict(phase_bandwidths=[0.0, 1e3, 2e3, 5e3, 10e3, 20e3, 50e3],
                           amp_bandwidths=[25e3], sigma_inf2=[1.5], realizations=50),
    "amp_bw_sweep": dict(phase_bandwidths=[5e3], amp_bandwidths=[1e2, 1e3, 1e4, 1e5, 1e6, 1e7],
                         sigma_inf2=[1.5], realizations=50),
    "sigma_inf_sweep": dict(phase_bandwidths=[5e3], amp_bandwidths=[25e3],
                            sigma_inf2=[0.0, 0.25, 0.5, 1.0, 1.5, 2.0], realizations=50),
    "n_tradeoff": dict(phase_bandwidths=[5e3], amp_bandwidths=[25e3], sigma_inf2=[0.5],
                       periods=[2, 3, 5, 10, 20, 40, 80], estimators=["nn"], realizations=50),
}


@dataclass
class SweepConfig:
    experiment: str = "single_run"
    intensities: list = field(default_factory=lambda: [5.0])
    phase_bandwidths: list = field(default_factory=lambda: [0.0])
    amp_bandwidths: list = field(default_factory=lambda: [0.0])
    sigma_inf2: list = field(default_factory=lambda: [0.0])
    periods: list = field(default_factory=lambda: [10])
    estimators: list = field(default_factory=lambda: list(ALL_ESTIMATORS))
    realizations: int = 100
    symbols: int = 20_000
    seed: int = 0
    output: str | None = None
    trajectory: str | None = None
    workers: int = 1
    batch: int = 100
    dt: float = DEFAULT_DT
    M: int = 4
    L: int = 10
    pnr: int = 10
    visibility: float = 0.997
    efficiency: float = 1.0
    dark_rate: float = 0.0
    use_kalman: bool = True
    model: str | None = None
    calibration: dict = field(default_factory=dict)
    calibration_trials: int = 10_000
    calibration_n_values: list = field(default_factory=lambda: [2, 5, 10, 20, 50, 100, 200])
    bayes_phi_range: list = field(default_factory=lambda: [-0.75, 0.75])
    bayes_A_range: list = field(default_factory=lambda: [0.05, 25.0])
    bayes_points: list = field(default_factory=lambda: [100, 100])

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment: unknown id {self.experiment!r}")
        for name in ("intensities", "phase_bandwidths", "amp_bandwidths", "sigma_inf2",
                     "periods", "estimators"):
            value = getattr(self, name)
            if not isinstance(value, (list, tuple)) or not value:
                raise ConfigError(f"{name}: must be a non-empty list")
        for e in self.estimators:
            if e not in ALL_ESTIMATORS:
                raise ConfigError(f"estimators: unknown estimator {e!r}")
        if self.realizations < 1:
            raise ConfigError("realizations: must be >= 1")
        if self.symbols < 1:
            raise ConfigError("symbols: must be >= 1")
        if any(int(n) != n or n < 1 for n in self.periods):
            raise ConfigError("periods: entries must be integers >= 1")
        if self.dt <= 0:
            raise ConfigError("dt: must be > 0")
        try:
            self.receiver
        except ValueError as exc:
            raise ConfigError(f"physics: {exc}") from exc

    @property
    def receiver(self) -> ReceiverConfig:
        return ReceiverConfig(M=self.M, L=self.L, physics=PhysicsConfig(
            self.visibility, self.pnr, self.efficiency, self.dark_rate))

    @property
    def grid(self) -> BayesGrid:
        return BayesGrid.uniform(tuple(self.bayes_phi_range), tuple(self.bayes_A_range),
                                 n_phi=int(self.bayes_points[0]), n_A=int(self.bayes_points[1]))

    def points(self):
        """Grid points as ``(n0, phase_bw, amp_bw, sigma_inf2, N)`` tuples."""
        return list(itertools.product(self.intensities, self.phase_bandwidths,
                                      self.amp_bandwidths, self.sigma_inf2, self.periods))

    def tracker(self, n0, phase_bw, amp_bw, sigma_inf2, N, estimator="perfect") -> TrackerConfig:
        ou = (OUParams.from_long_time_variance(amp_bw, sigma_inf2, n0) if amp_bw > 0
              else OUParams(0.0, 0.0, n0))
        if amp_bw == 0 and sigma_inf2 > 0:
            log.warning("sigma_inf2=%g ignored at zero amplitude bandwidth", sigma_inf2)
        return TrackerConfig(n0=float(n0), N=int(N), estimator=estimator, symbols=self.symbols,
                             phase=PhaseNoiseParams(float(phase_bw), self.dt), ou=ou,
                             receiver=self.receiver, use_kalman=self.use_kalman)


def config_from_dict(doc: dict) -> SweepConfig:
    if not isinstance(doc, dict) or not doc:
        raise ConfigError("config is empty")
    known = {f.name for f in fields(SweepConfig)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
    experiment = doc.get("experiment", "single_run")
    if experiment not in PRESETS:
        raise ConfigError(f"experiment: unknown id {experiment!r}")
    merged = dict(PRESETS[experiment])
    merged.update(doc)
    try:
        return SweepConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> SweepConfig:
    """Read a JSON sweep config; see README for the schema."""
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        raise ConfigError(f"{path}: config file is empty")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at offset {exc.pos}: {exc.msg}") from exc
    return config_from_dict(doc)


def _seed_for(seed: int, tag: int):
    return np.random.SeedSequence(seed, spawn_key=(1 << 30, tag))


def build_estimators(cfg: SweepConfig) -> dict:
    """Load or calibrate the data-driven estimators the sweep needs.

    Fails early when the network estimator has no usable model file.
    """
    wanted = [e for e in cfg.estimators if e in ("nn", "bayes")]
    out = {}
    rc = cfg.receiver
    if "nn" in wanted:
        if not cfg.model:
            raise ConfigError("model: the nn estimator needs a model file")
        if not Path(cfg.model).is_file():
            raise ConfigError(f"model: file not found: {cfg.model}")
        out["nn"] = Estimator("nn", model=load_model(cfg.model, expected_inputs=rc.input_size + 1))
    if "bayes" in wanted:
        out["bayes"] = Estimator("bayes", grid=cfg.grid)
    if not cfg.use_kalman:
        return out
    n_values = sorted(set(int(n) for n in cfg.calibration_n_values) | set(int(n) for n in cfg.periods))
    for i, (kind, est) in enumerate(sorted(out.items())):
        path = cfg.calibration.get(kind)
        if path:
            est.calibration = CalibrationTable.load(path)
            continue
        log.info("calibrating %s estimator (%d trials per point)", kind, cfg.calibration_trials)
        est.calibration = calibrate_variance(
            lambda c, b, e=est: e(c, b, rc), rc, np.random.default_rng(_seed_for(cfg.seed, i)),
            n_values=n_values, trials=cfg.calibration_trials, name=kind)
    return out


class ResultWriter:
    """Appends rows to a CSV with a fixed header (LF endings, UTF-8)."""

    def __init__(self, path, columns=RESULT_COLUMNS):
        self.path = Path(path)
        self.columns = tuple(columns)
        with self.path.open("w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow(self.columns)

    def write(self, rows):
        with self.path.open("a", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in rows:
                w.writerow([_fmt(row[c]) for c in self.columns])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def emit_results(rows, path, columns=RESULT_COLUMNS):
    writer = ResultWriter(path, columns)
    writer.write(rows)
    return writer.path


def _row(cfg, point, estimator, values):
    n0, pbw, abw, s2, N = point
    values = np.asarray(values, dtype=float)
    std = float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
    return {"experiment": cfg.experiment, "n0": float(n0), "phase_bandwidth_hz": float(pbw),
            "amp_bandwidth_hz": float(abw), "sigma_inf2": float(s2), "N": int(N),
            "estimator": estimator, "mean_error": float(values.mean()), "std_error": std,
            "realizations": len(values), "symbols": cfg.symbols, "seed": cfg.seed}


def run_sweep(cfg: SweepConfig, estimators: dict | None = None, writer: ResultWriter | None = None):
    """Run every grid point and estimator; returns the list of result rows.

    ``estimators`` defaults to :func:`build_estimators`. Rows are appended
    to ``writer`` (or ``cfg.output``) as each grid point completes.
    """
    if estimators is None:
        estimators = build_estimators(cfg)
    if writer is None and cfg.output:
        writer = ResultWriter(cfg.output)
    rows = []
    for point in cfg.points():
        point_rows = []
        het = None
        for est in cfg.estimators:
            if est == "heterodyne":
                continue
            tcfg = cfg.tracker(*point, estimator=est)
            rates, het = run_realizations(tcfg, cfg.realizations, cfg.seed, estimators.get(est),
                                          workers=cfg.workers, batch=cfg.batch)
            point_rows.append(_row(cfg, point, est, rates))
        if "heterodyne" in cfg.estimators:
            if het is None:
                _, het = run_realizations(cfg.tracker(*point), cfg.realizations, cfg.seed,
                                          workers=cfg.workers, batch=cfg.batch, track=False)
            point_rows.append(_row(cfg, point, "heterodyne", het))
        log.info("point %s done", point)
        if writer is not None:
            writer.write(point_rows)
        rows.extend(point_rows)
    return rows


def config_to_dict(cfg: SweepConfig) -> dict:
    return asdict(cfg)

"""Command-line entry point: ``ngtrack <command> CONFIG [--seed] [--out] [--threads]``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .estimators import BayesGrid
from .harness import (ConfigError, ResultWriter, build_estimators, load_config,
                      run_sweep)
from .kalman import calibrate_variance
from .noise import generate_realizations
from .physics import PhysicsConfig, heterodyne_qnl_error
from .receiver import ReceiverConfig, simulate_symbols
from .tracking import Estimator, realization_seeds, run_tracking_batch
from .training import (Dataset, ModelFormatError, TrainConfig, generate_dataset, load_model,
                       save_model, train)

log = logging.getLogger("ngtrack")


def _read_json(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        raise ConfigError(f"{path}: config file is empty")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at offset {exc.pos}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc


def _receiver_from(doc: dict) -> ReceiverConfig:
    phys = PhysicsConfig(doc.pop("visibility", 0.997), doc.pop("pnr", 10),
                         doc.pop("efficiency", 1.0), doc.pop("dark_rate", 0.0))
    return ReceiverConfig(M=doc.pop("M", 4), L=doc.pop("L", 10), physics=phys)


def cmd_train(args):
    doc = _read_json(args.config)
    rc = _receiver_from(doc)
    cache = doc.pop("dataset_cache", None)
    known = {f.name for f in fields(TrainConfig)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
    cfg = TrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()})
    seed = args.seed if args.seed is not None else 0
    data_rng, train_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    if cache and Path(cache).is_file():
        dataset = Dataset.load(cache)
    else:
        t0 = time.time()
        dataset = generate_dataset(cfg.dataset_size, rc, data_rng, cfg)
        log.info("generated %d samples in %.1fs", len(dataset), time.time() - t0)
        if cache:
            dataset.save(cache)

    def progress(epoch, tr, val):
        if epoch % 10 == 0 or epoch == cfg.epochs - 1:
            log.info("epoch %d train %.5f val %.5f", epoch + 1, tr, val)

    model, history = train(dataset, cfg, train_rng, progress=progress)
    model.metadata["seed"] = seed
    out = args.out or "model.json"
    save_model(model, out)
    print(f"model written to {out}; final train loss {history.train_loss[-1]:.5f}")


def cmd_calibrate(args):
    doc = _read_json(args.config)
    rc = _receiver_from(doc)
    kind = doc.pop("estimator", "nn")
    model_path = doc.pop("model", None)
    anchors = doc.pop("anchors", [2.0, 5.0, 10.0])
    n_values = doc.pop("n_values", [2, 5, 10, 20, 50, 100, 200])
    trials = doc.pop("trials", 10_000)
    if doc:
        raise ConfigError(f"unknown config key {next(iter(doc))!r}")
    if kind == "nn":
        if not model_path:
            raise ConfigError("model: the nn estimator needs a model file")
        est = Estimator("nn", model=load_model(model_path, expected_inputs=rc.input_size + 1))
    elif kind == "bayes":
        est = Estimator("bayes", grid=BayesGrid())
    else:
        raise ConfigError(f"estimator: unknown estimator {kind!r}")
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    table = calibrate_variance(lambda c, b: est(c, b, rc), rc, rng, anchors=anchors,
                               n_values=n_values, trials=trials, name=kind)
    out = args.out or f"calibration_{kind}.json"
    table.save(out)
    for a in table.anchors:
        va, vp = table.variances(a, 10)
        print(f"{kind} n0={a:g} N=10: var_A={va:.4g} var_phi={vp:.4g}")
    print(f"calibration written to {out}")


def cmd_discriminate(args):
    doc = _read_json(args.config)
    rc = _receiver_from(doc)
    intensities = doc.pop("intensities", [5.0])
    symbols = int(doc.pop("symbols", 1_000_000))
    if doc:
        raise ConfigError(f"unknown config key {next(iter(doc))!r}")
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    rows = []
    for n0 in intensities:
        errors, done = 0, 0
        while done < symbols:
            n = min(200_000, symbols - done)
            k = rng.integers(0, rc.M, n)
            _, _, g = simulate_symbols(n0, 0.0, n0, k, rng.random((n, rc.L)), rc)
            errors += int(np.count_nonzero(g != k))
            done += n
        p = errors / symbols
        qnl = heterodyne_qnl_error(n0)
        ratio = qnl / p if p > 0 else math.inf
        print(f"n0={n0:g}: P_E={p:.4g} QNL={qnl:.4g} QNL/P_E={ratio:.3g}")
        rows.append({"n0": n0, "error": p, "std_error": math.sqrt(p * (1 - p) / symbols),
                     "qnl": qnl, "symbols": symbols})
    if args.out:
        w = ResultWriter(args.out, ("n0", "error", "std_error", "qnl", "symbols"))
        w.write(rows)


def _sweep_config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out:
        cfg = replace(cfg, output=args.out)
    if args.threads:
        cfg = replace(cfg, workers=args.threads)
    return cfg


def cmd_sweep(args):
    cfg = _sweep_config(args)
    rows = run_sweep(cfg)
    _print_rows(rows)


def cmd_track(args):
    cfg = _sweep_config(args)
    estimators = build_estimators(cfg)
    rows = run_sweep(cfg, estimators)
    _print_rows(rows)
    if cfg.trajectory:
        point = cfg.points()[0]
        est = next((e for e in cfg.estimators if e != "heterodyne"), None)
        if est is not None:
            tcfg = cfg.tracker(*point, estimator=est)
            noise_seed, meas_seed = realization_seeds(cfg.seed, 0)
            real = generate_realizations(tcfg.phase, tcfg.ou, tcfg.symbols, [noise_seed])[0]
            res = run_tracking_batch(tcfg, [real], [meas_seed], estimators.get(est))
            res.write_trajectory(cfg.trajectory, real)
            print(f"trajectory ({est}, realization 0) written to {cfg.trajectory}")


def cmd_baseline(args):
    cfg = _sweep_config(args)
    cfg = replace(cfg, estimators=["heterodyne"])
    _print_rows(run_sweep(cfg, estimators={}))


def _print_rows(rows):
    for r in rows:
        print(f"n0={r['n0']:g} dnu={r['phase_bandwidth_hz']:g} gamma={r['amp_bandwidth_hz']:g} "
              f"s2={r['sigma_inf2']:g} N={r['N']} {r['estimator']:>10}: "
              f"{r['mean_error']:.4g} +- {r['std_error']:.2g}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ngtrack", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func, help_ in [
        ("train", cmd_train, "train the network estimator"),
        ("calibrate", cmd_calibrate, "measure estimator variances for the Kalman filter"),
        ("discriminate", cmd_discriminate, "noiseless discrimination error vs the QNL"),
        ("track", cmd_track, "closed-loop tracking at one parameter point"),
        ("sweep", cmd_sweep, "parameter sweep, CSV output"),
        ("baseline", cmd_baseline, "ideal-heterodyne baseline over noise realizations"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--threads", type=int, default=None)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, ModelFormatError, FileNotFoundError, ValueError) as exc:
        print(f"ngtrack: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

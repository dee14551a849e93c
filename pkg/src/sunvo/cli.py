"""Command-line entry point: ``sunvo <command> [--config FILE] [flags]``.

Every command optionally reads a YAML config; flags override config keys
(``--pixel-noise`` overrides ``pixel_noise``). Relative output paths are
resolved under ``$SUNVO_OUTPUT_ROOT`` when it is set.

Exit codes: 0 success, 1 usage or config error, 2 completed with warnings,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import yaml

from . import __version__
from .dataset import (
    DataFileError,
    ParseError,
    read_dataset,
    read_poses,
    read_sun,
    read_trajectory,
    write_dataset,
    write_json,
    write_sun,
    write_trajectory,
)
from .dropout_net import DropoutNetwork, MCConfig, TASK_SEED, make_shadow_task, mc_measurements, train_toy_network, TrainingHistory
from .ephemeris import GeodeticAnchor, enu_to_azzen, solar_position
from .errors import ConfigInvalid, DimensionMismatch, LengthMismatch, SunVOError
from .evaluation import compare_runs, sun_errors, trajectory_errors, write_long_csv, write_report_json
from .frontend import RansacConfig, SyntheticSceneConfig, generate_scene
from .pipeline import PipelineConfig, run_pipeline, select_sun
from .sun_sensing import DEFAULT_TAU_INV, ground_truth_sun, simulate_sun_measurements
from .window_ba import SolverSettings

logger = logging.getLogger("sunvo")

OUTPUT_ROOT_ENV = "SUNVO_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_WARN, EXIT_FAIL = 0, 1, 2, 3
ANEES_BAND = (0.5, 2.0)
DEFAULT_ANCHOR = {"latitude": 49.011, "longitude": 8.4164, "utc": "2011-09-26T11:00:00Z"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- config handling ----------------------------------------------------------------


def load_config(path) -> Dict[str, Any]:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise DataFileError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = (mark.line + 1) if mark else 0
        raise ConfigInvalid(f"{p}:{line}: {getattr(exc, 'problem', exc)}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{p}: top level must be a mapping")
    return data


def _merged(args, config: dict, defaults: dict) -> dict:
    """defaults < config < explicitly passed flags."""
    out = dict(defaults)
    for k, v in config.items():
        out[k.replace("-", "_")] = v
    for k, v in vars(args).items():
        if v is not None and k not in ("command", "config", "func"):
            out[k] = v
    return out


def _output_path(value) -> Path:
    p = Path(value)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _ensure_dir(p: Path) -> Path:
    if not p.parent.exists():
        raise DataFileError(f"parent directory does not exist: {p.parent}")
    p.mkdir(exist_ok=True)
    return p


def _anchor(cfg: dict) -> GeodeticAnchor:
    a = dict(DEFAULT_ANCHOR)
    a.update(cfg.get("anchor") or {})
    for key in ("latitude", "longitude", "utc"):
        if cfg.get(key) is not None:
            a[key] = cfg[key]
    try:
        return GeodeticAnchor.from_dict(a)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigInvalid(f"invalid anchor: {exc}") from None


def _int(cfg, key):
    try:
        return int(cfg[key])
    except (TypeError, ValueError):
        raise ConfigInvalid(f"{key} must be an integer, got {cfg[key]!r}") from None


def _float(cfg, key):
    try:
        return float(cfg[key])
    except (TypeError, ValueError):
        raise ConfigInvalid(f"{key} must be a number, got {cfg[key]!r}") from None


# -- commands -------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _merged(args, load_config(args.config), {"out": "dataset", "seed": 0})
    scene = dict(cfg.get("scene") or {})
    traj = dict(scene.get("trajectory") or {})
    for key in ("pixel_noise", "outlier_fraction", "yaw_rate_bias", "n_landmarks"):
        if cfg.get(key) is not None:
            scene[key] = cfg[key]
    if cfg.get("n_frames") is not None:
        traj["n_frames"] = _int(cfg, "n_frames")
    scene["trajectory"] = traj
    scene["seed"] = _int(cfg, "seed")
    sc = SyntheticSceneConfig.from_dict(scene)
    ds = generate_scene(sc, _anchor(cfg))
    out = write_dataset(_output_path(cfg["out"]), ds)
    write_json(out / "scene.json", sc.to_dict())
    print(json.dumps({"dataset": str(out), "frames": ds.n_frames, "observations": len(ds.tracks)}, sort_keys=True))
    return EXIT_OK


def cmd_sun_sim(args) -> int:
    cfg = _merged(args, load_config(args.config), {"target_deg": [0.0], "every_n": 10, "seed": 0, "tau_inv": DEFAULT_TAU_INV})
    if cfg.get("dataset") is None:
        raise ConfigInvalid("sun-sim needs --dataset")
    ds = read_dataset(cfg["dataset"])
    targets = cfg["target_deg"]
    targets = [float(t) for t in (targets if isinstance(targets, (list, tuple)) else [targets])]
    out_dir = _output_path(cfg.get("out") or cfg["dataset"])
    _ensure_dir(out_dir)
    summary = []
    for x in targets:
        sun = simulate_sun_measurements(
            ds.gt_poses, ds.anchor, x, _int(cfg, "every_n"), _int(cfg, "seed"), ds.timestamps, _float(cfg, "tau_inv")
        )
        name = f"sun_gt{x:g}.csv"
        write_sun(out_dir / name, sun)
        truth = ground_truth_sun(ds.gt_poses, ds.anchor, ds.timestamps)
        rep = sun_errors(sun, [truth[m.frame_id] for m in sun])
        summary.append({"target_deg": x, "file": name, "rows": len(sun), "mean_vector_error_deg": rep.summary["vector"]["mean"]})
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_sun_train(args) -> int:
    defaults = {
        "out": "sun_model", "seed": 0, "n_train": 4000, "n_test": 1000, "epochs": 100, "lr": 0.02,
        "weight_decay": 1e-5, "batch_size": 64, "dropout": 0.05, "hidden": [64, 64], "mc_samples": 25,
        "tau_inv": DEFAULT_TAU_INV, "feature_noise": 0.42, "feature_dim": 8,
    }
    cfg = _merged(args, load_config(args.config), defaults)
    seed = _int(cfg, "seed")
    dim = _int(cfg, "feature_dim")
    X, S = make_shadow_task(_int(cfg, "n_train"), seed, _float(cfg, "feature_noise"), dim)
    Xt, St = make_shadow_task(_int(cfg, "n_test"), seed + TASK_SEED, _float(cfg, "feature_noise"), dim)
    input_dim = int(cfg.get("input_dim", dim))
    if X.shape[1] != input_dim:
        raise DimensionMismatch(f"task features have width {X.shape[1]} but the network expects {input_dim}")
    sizes = [input_dim] + [int(h) for h in cfg["hidden"]] + [3]
    net = DropoutNetwork.create(sizes, dropout=_float(cfg, "dropout"), seed=seed)
    hist = TrainingHistory()
    net = train_toy_network(
        X, S, net, _int(cfg, "epochs"), _float(cfg, "lr"), _float(cfg, "weight_decay"), _int(cfg, "batch_size"),
        seed=seed, history=hist,
    )
    meas = mc_measurements(net, Xt, MCConfig(_int(cfg, "mc_samples"), seed), _float(cfg, "tau_inv"))
    rep = sun_errors(meas, St)
    lo, hi = ANEES_BAND
    flag = None
    if not (lo <= rep.anees <= hi):
        flag = "uncertainty underestimated" if rep.anees > hi else "uncertainty overestimated"
    out = _ensure_dir(_output_path(cfg["out"]))
    net.save(out / "weights.json")
    write_sun(out / "test_measurements.csv", meas)
    report = {
        "n_train": len(X), "n_test": len(Xt), "mc_samples": _int(cfg, "mc_samples"), "dropout": _float(cfg, "dropout"),
        "tau_inv": _float(cfg, "tau_inv"), "final_train_loss": hist.epoch_loss[-1], "initial_train_loss": hist.epoch_loss[0],
        "errors": rep.to_dict(), "anees_band": list(ANEES_BAND), "anees_flag": flag,
    }
    write_report_json(out / "report.json", report)
    write_long_csv(out / "test_errors.csv", rep)
    print(json.dumps({"median_vector_error_deg": rep.summary["vector"]["median"], "anees": rep.anees, "flag": flag}, sort_keys=True))
    if flag:
        logger.warning("ANEES %.3f outside %s: %s", rep.anees, ANEES_BAND, flag)
        return EXIT_WARN
    return EXIT_OK


def cmd_ephemeris(args) -> int:
    cfg = _merged(args, load_config(args.config), {})
    for key in ("lat", "lon", "utc"):
        if cfg.get(key) is None:
            raise ConfigInvalid(f"ephemeris needs --{key}")
    try:
        anchor = GeodeticAnchor(_float(cfg, "lat"), _float(cfg, "lon"), cfg["utc"])
    except ValueError as exc:
        raise ConfigInvalid(str(exc)) from None
    sp = solar_position(anchor)
    zen, az = enu_to_azzen(sp.enu)
    print(json.dumps({
        "utc": anchor.to_dict()["utc"], "latitude": anchor.latitude, "longitude": anchor.longitude,
        "enu": [float(x) for x in sp.enu], "zenith_deg": math.degrees(zen), "azimuth_deg": math.degrees(az),
        "declination_deg": math.degrees(sp.declination), "hour_angle_deg": math.degrees(sp.hour_angle),
    }, sort_keys=True))
    return EXIT_OK


def cmd_vo(args) -> int:
    defaults = {
        "out": "vo", "sun": ["none"], "sun_target_deg": 0.0, "sun_every_n": 10, "sun_seed": 0,
        "window_size": 2, "huber_delta": 0.5, "max_landmarks": None, "ransac_iterations": 400,
        "ransac_threshold": None, "ransac_seed": 0, "sun_policy": "all", "max_iterations": 50,
    }
    cfg = _merged(args, load_config(args.config), defaults)
    if cfg.get("dataset") is None:
        raise ConfigInvalid("vo needs --dataset")
    sun_arg = cfg["sun"] if isinstance(cfg["sun"], (list, tuple)) else [cfg["sun"]]
    mode = str(sun_arg[0])
    sun_file = cfg.get("sun_file")
    if mode == "file":
        if len(sun_arg) > 1:
            sun_file = sun_arg[1]
        if sun_file is None:
            raise ConfigInvalid("--sun file needs a path")
    elif len(sun_arg) > 1:
        raise ConfigInvalid(f"--sun {mode} takes no path")
    ds = read_dataset(cfg["dataset"], sun_file=sun_file if mode == "file" else None)
    sun = select_sun(ds, mode, _float(cfg, "sun_target_deg"), _int(cfg, "sun_every_n"), _int(cfg, "sun_seed"))

    if cfg.get("ransac_threshold") is None:
        ransac = RansacConfig.for_noise(ds.observation_noise, iterations=_int(cfg, "ransac_iterations"), seed=_int(cfg, "ransac_seed"))
    else:
        ransac = RansacConfig(iterations=_int(cfg, "ransac_iterations"), threshold=_float(cfg, "ransac_threshold"), seed=_int(cfg, "ransac_seed"))
    pc = PipelineConfig(
        window_size=_int(cfg, "window_size"),
        ransac=ransac,
        settings=SolverSettings(max_iterations=_int(cfg, "max_iterations")),
        huber_delta=_float(cfg, "huber_delta"),
        sun_policy=str(cfg["sun_policy"]),
        max_landmarks=None if cfg.get("max_landmarks") is None else _int(cfg, "max_landmarks"),
    )
    res = run_pipeline(ds, sun, pc)
    out = _ensure_dir(_output_path(cfg["out"]))
    write_trajectory(out / "trajectory.csv", range(len(res.poses)), res.poses)
    report = res.report()
    report["sun_source"] = mode
    report["sun_measurements"] = 0 if sun is None else len(sun)
    write_report_json(out / "report.json", report)
    print(json.dumps({k: report[k] for k in ("n_frames", "all_converged", "sun_terms", "total_iterations")}, sort_keys=True))
    if res.warnings or not res.all_converged:
        for w in res.warnings:
            logger.warning(w)
        return EXIT_WARN
    return EXIT_OK


def _read_estimate(path):
    try:
        return read_trajectory(path)
    except ParseError:
        return read_poses(path)


def cmd_eval(args) -> int:
    cfg = _merged(args, load_config(args.config), {"out": "eval", "compare": False})
    est_paths = cfg.get("est") or []
    if isinstance(est_paths, str):
        est_paths = [est_paths]
    if cfg.get("gt") is None or (not est_paths and not cfg.get("sun")):
        raise ConfigInvalid("eval needs --gt and at least one --est or --sun")
    gt_path = Path(cfg["gt"])
    ds = None
    if gt_path.is_dir():
        ds = read_dataset(gt_path)
        gt_ids, gt = list(range(ds.n_frames)), ds.gt_poses
    else:
        gt_ids, gt = read_poses(gt_path)
    report: Dict[str, Any] = {"runs": []}
    reports = []
    for p in est_paths:
        ids, est = _read_estimate(p)
        if ids != gt_ids:
            raise LengthMismatch(f"{p}: {len(ids)} frames vs {len(gt_ids)} in ground truth (ids must match)")
        rep = trajectory_errors(est, gt, ids)
        reports.append(rep)
        report["runs"].append({"est": str(p), **rep.to_dict()})
    if cfg.get("compare"):
        if len(reports) < 2:
            raise ConfigInvalid("--compare needs at least two --est runs")
        report["improvement_pct"] = [
            {"baseline": str(est_paths[0]), "run": str(p), **compare_runs(reports[0], r)} for p, r in zip(est_paths[1:], reports[1:])
        ]
    extra = []
    if cfg.get("sun"):
        if ds is None:
            raise ConfigInvalid("sun evaluation needs --gt pointing at a dataset directory")
        meas = read_sun(cfg["sun"])
        truth = ground_truth_sun(ds.gt_poses, ds.anchor, ds.timestamps)
        srep = sun_errors(meas, [truth[m.frame_id] for m in meas])
        report["sun"] = srep.to_dict()
        extra.append(srep)
    out = _ensure_dir(_output_path(cfg["out"]))
    write_report_json(out / "eval.json", report)
    write_long_csv(out / "eval.csv", *reports, *extra)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sunvo", description="Sun-aided stereo visual odometry experiments.")
    p.add_argument("--version", action="version", version=f"sunvo {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="YAML config; flags override its keys")
        sp.set_defaults(func=func)
        return sp

    s = command("simulate", cmd_simulate, "generate a synthetic stereo dataset")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--n-frames", type=int)
    s.add_argument("--n-landmarks", type=int)
    s.add_argument("--pixel-noise", type=float)
    s.add_argument("--outlier-fraction", type=float)
    s.add_argument("--yaw-rate-bias", type=float)
    s.add_argument("--latitude", type=float)
    s.add_argument("--longitude", type=float)
    s.add_argument("--utc")

    s = command("sun-sim", cmd_sun_sim, "simulate GT-Sun-X measurements for a dataset")
    s.add_argument("--dataset")
    s.add_argument("--target-deg", type=float, nargs="+")
    s.add_argument("--every-n", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--tau-inv", type=float)
    s.add_argument("--out", help="output directory (default: the dataset directory)")

    s = command("sun-train", cmd_sun_train, "train the toy dropout sun regressor")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-test", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--weight-decay", type=float)
    s.add_argument("--dropout", type=float)
    s.add_argument("--mc-samples", type=int)
    s.add_argument("--tau-inv", type=float)
    s.add_argument("--input-dim", type=int)

    s = command("ephemeris", cmd_ephemeris, "print the solar direction for a place and time")
    s.add_argument("--lat", type=float)
    s.add_argument("--lon", type=float)
    s.add_argument("--utc")

    s = command("vo", cmd_vo, "run the sliding-window estimator on a dataset")
    s.add_argument("--dataset")
    s.add_argument("--out")
    s.add_argument("--sun", nargs="+", metavar="MODE", help="none | simulated | file PATH")
    s.add_argument("--sun-target-deg", type=float)
    s.add_argument("--sun-every-n", type=int)
    s.add_argument("--sun-seed", type=int)
    s.add_argument("--sun-policy", choices=["once", "all"])
    s.add_argument("--window-size", type=int)
    s.add_argument("--huber-delta", type=float)
    s.add_argument("--max-landmarks", type=int)
    s.add_argument("--max-iterations", type=int)
    s.add_argument("--ransac-iterations", type=int)
    s.add_argument("--ransac-threshold", type=float)
    s.add_argument("--ransac-seed", type=int)

    s = command("eval", cmd_eval, "trajectory and sun error reports")
    s.add_argument("--est", action="append", help="trajectory CSV (repeatable)")
    s.add_argument("--gt", help="dataset directory or gt_poses.csv")
    s.add_argument("--sun", help="sun measurement CSV to score (needs a dataset --gt)")
    s.add_argument("--compare", action="store_true", default=None)
    s.add_argument("--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"sunvo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    del args.verbose
    try:
        return args.func(args)
    except (ConfigInvalid, UsageError) as exc:
        print(f"sunvo: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFileError, ParseError) as exc:
        print(f"sunvo: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except SunVOError as exc:
        print(f"sunvo: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

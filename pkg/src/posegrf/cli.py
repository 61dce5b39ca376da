"""Command-line entry point: ``posegrf <command>`` with INI configs and reproducible run directories."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .baselines import ExemplarBaseline, NewtonBaseline
from .config import ConfigError, RunConfig
from .data import TrialSchemaError, load_trial, mean_mass, save_trial
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .plot import CurveFormatError, plot_sources, write_curves
from .synth import generate_dataset
from .training import (LeakageError, ModelPredictor, TrainingDivergedError, evaluate, split_trials, train,
                       zero_shot_eval)
from .triangulation import TriangulationError, fill_poses_3d

logger = logging.getLogger("posegrf")

COMMANDS = ("synth", "triangulate", "train", "eval", "zeroshot", "baseline", "sweep", "plot")
SWEEP_AXES = ("receptive_field", "gate_T")
# failures reported as a clean error line and exit status 1 instead of a traceback
EXPECTED_ERRORS = (ConfigError, TrialSchemaError, CheckpointError, CurveFormatError, TriangulationError,
                   TrainingDivergedError, LeakageError, ValueError, KeyError, FileNotFoundError)


class RunFailed(Exception):
    """Some of the requested work failed; details were already logged."""


# -- argument parsing ------------------------------------------------------------------

def _global_options():
    # defaults are suppressed so the flags may appear before or after the subcommand
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", default=argparse.SUPPRESS, help="INI file with run settings")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="base random seed")
    g.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker processes for parallel-safe stages")
    g.add_argument("--out", default=argparse.SUPPRESS, help="parent directory of run folders (default: runs)")
    g.add_argument("--trials", type=int, default=argparse.SUPPRESS,
                   help="repeat training with seeds seed, seed+1, ...")
    g.add_argument("--name", default=argparse.SUPPRESS, help="run folder name (default: a timestamp)")
    g.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")
    g.add_argument("--log-level", default=argparse.SUPPRESS, choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    return p


def build_parser():
    common = _global_options()
    parser = argparse.ArgumentParser(prog="posegrf", parents=[common],
                                     description="Ground-reaction force regression from pose keypoints.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text)

    p = command("synth", "generate synthetic trials with exact physics")
    p.add_argument("--subjects", type=int, dest="synth.n_subjects")
    p.add_argument("--movements", dest="synth.movements", help="comma list of jump, squat, standing[:left|right]")
    p.add_argument("--duration", type=float, dest="synth.duration")
    p.add_argument("--cameras", type=int, dest="synth.n_cameras")
    p.add_argument("--noise-px", type=float, dest="synth.noise_px")
    p.add_argument("--with-3d", action="store_const", const=True, dest="synth.include_poses_3d",
                   help="also store the true 3D joints")

    p = command("triangulate", "fill poses_3d of every trial by RANSAC triangulation")
    p.add_argument("--data", dest="data.trials_dir", help="directory of trial JSON files")
    p.add_argument("--iterations", type=int, dest="triangulation.iterations")
    p.add_argument("--threshold", type=float, dest="triangulation.threshold", help="inlier threshold in pixels")
    p.add_argument("--overwrite", action="store_const", const=True, dest="triangulation.overwrite",
                   help="re-triangulate trials that already have 3D poses")

    p = command("train", "train a force model and evaluate it on the validation split")
    p.add_argument("--data", dest="data.trials_dir")
    p.add_argument("--strategy", dest="train.strategy", choices=("scratch", "mtl", "pretrain_finetune"))
    p.add_argument("--f", type=int, dest="model.receptive_field", help="receptive field in frames")
    p.add_argument("--epochs", type=int, dest="train.epochs")
    p.add_argument("--split", dest="split.mode")
    p.add_argument("--held-out", dest="split.held_out")

    p = command("eval", "evaluate a checkpoint")
    p.add_argument("--checkpoint", dest="data.checkpoint")
    p.add_argument("--data", dest="data.eval_dir", help="trials to evaluate (default: validation split)")

    p = command("zeroshot", "leave-one-class-out folds")
    p.add_argument("--data", dest="data.trials_dir")

    p = command("baseline", "evaluate a naive baseline")
    p.add_argument("--kind", dest="baseline.kind", choices=("newton", "exemplar"))
    p.add_argument("--data", dest="data.trials_dir")

    p = command("sweep", "train and evaluate across receptive fields or gate thresholds")
    p.add_argument("--axis", dest="sweep.axis", choices=SWEEP_AXES)
    p.add_argument("--values", dest="sweep.values", help="comma list, e.g. 9,27,43,81")
    p.add_argument("--strategies", dest="sweep.strategies")
    p.add_argument("--data", dest="data.trials_dir")

    p = command("plot", "render curve CSVs (or eval runs) as SVG")
    p.add_argument("inputs", nargs="*", help="curve CSV files, curve directories or run directories")
    p.add_argument("--labels", dest="plot.labels")
    p.add_argument("--groups", dest="plot.groups", help="channel groups to draw (default: net)")
    return parser


def resolve_config(args):
    """Defaults < --config file < --set overrides < command flags < global flags."""
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    cfg.apply_overrides(getattr(args, "set", None))
    for key, value in vars(args).items():
        if "." in key and value is not None:
            cfg.set(*key.split(".", 1), value)
    if getattr(args, "inputs", None):
        cfg.set("plot", "inputs", ",".join(args.inputs))
    for flag in ("seed", "jobs", "trials"):
        if hasattr(args, flag):
            cfg.set("run", flag, getattr(args, flag))
    if hasattr(args, "name"):
        cfg.set("run", "name", args.name)
    if not cfg.get("run", "name"):
        cfg.set("run", "name", time.strftime("%Y%m%d-%H%M%S"))
    if cfg.get("run", "jobs") < 1 or cfg.get("run", "trials") < 1:
        raise ConfigError("--jobs and --trials must be >= 1")
    return cfg


# -- helpers -----------------------------------------------------------------------------

def _split_list(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _load_trials(directory, jobs=1):
    if not directory:
        raise ConfigError("no trial directory configured (use --data or data.trials_dir)")
    paths = sorted(Path(directory).glob("*.json"))
    if not paths:
        raise FileNotFoundError(f"no trial JSON files in {directory}")
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(load_trial, paths))
    return [load_trial(p) for p in paths]


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _metric_kwargs(cfg):
    return {"k_values": cfg.get("metrics", "k"), "min_distance": cfg.get("metrics", "min_distance")}


def aggregate_reports(reports):
    """Mean (and spread) of repeated-trial reports; a single report is returned unchanged."""
    if len(reports) == 1:
        return reports[0]

    def stats(values):
        values = [v for v in values if v is not None]
        if not values:
            return None, None
        return float(np.mean(values)), float(np.std(values))

    first = reports[0]
    out = {"n_trials": len(reports), "mass_kg": first["mass_kg"], "n_videos": first["n_videos"]}
    out["rmse_N"], out["rmse_N_std"] = stats([r["rmse_N"] for r in reports])
    out["kpeaks_N"], out["kpeaks_N_std"] = {}, {}
    for k in first["kpeaks_N"]:
        out["kpeaks_N"][k], out["kpeaks_N_std"][k] = stats([r["kpeaks_N"][k] for r in reports])
    out["per_video"] = {}
    for vid, entry in first["per_video"].items():
        out["per_video"][vid] = {
            "movement": entry["movement"], "subject": entry["subject"],
            "rmse_N": stats([r["per_video"][vid]["rmse_N"] for r in reports])[0],
            "kpeaks_N": {k: stats([r["per_video"][vid]["kpeaks_N"][k] for r in reports])[0]
                         for k in entry["kpeaks_N"]},
        }
    out["trials"] = reports
    return out


def _suffix(t, n):
    return "" if n == 1 or t == 0 else f"_trial{t}"


# -- commands ----------------------------------------------------------------------------

def cmd_synth(cfg, run_dir):
    s = cfg["synth"]
    trials = generate_dataset(n_subjects=s["n_subjects"], movements=tuple(_split_list(s["movements"])),
                              trials_per_movement=s["trials_per_movement"], duration=s["duration"],
                              n_cameras=s["n_cameras"], noise_px=s["noise_px"], seed=cfg.get("run", "seed"),
                              include_poses_3d=s["include_poses_3d"])
    out = run_dir / "trials"
    for trial in trials:
        save_trial(trial, out / f"{trial.trial_id}.json")
    logger.info("wrote %d trials to %s", len(trials), out)


def _triangulate_file(path, out_dir, options, overwrite):
    """Worker: returns (file name, status, message)."""
    path = Path(path)
    try:
        trial = load_trial(path)
        if trial.poses_3d is not None and not overwrite:
            status = "kept"
        else:
            trial = fill_poses_3d(trial, **options)
            status = "triangulated"
        save_trial(trial, Path(out_dir) / path.name)
        return path.name, status, ""
    except (TriangulationError, TrialSchemaError, ValueError) as exc:
        return path.name, "failed", str(exc)


def cmd_triangulate(cfg, run_dir):
    src = cfg.get("data", "trials_dir")
    if not src:
        raise ConfigError("no trial directory configured (use --data or data.trials_dir)")
    paths = sorted(Path(src).glob("*.json"))
    if not paths:
        raise FileNotFoundError(f"no trial JSON files in {src}")
    tri = cfg["triangulation"]
    options = {"iterations": tri["iterations"], "threshold": tri["threshold"],
               "min_confidence": tri["min_confidence"], "seed": cfg.get("run", "seed")}
    out = run_dir / "trials"
    out.mkdir(parents=True, exist_ok=True)
    jobs = cfg.get("run", "jobs")
    args = [(p, out, options, tri["overwrite"]) for p in paths]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_triangulate_file, *zip(*args)))
    else:
        results = [_triangulate_file(*a) for a in args]
    failed = 0
    for name, status, message in results:
        if status == "failed":
            failed += 1
            logger.error("%s: %s", name, message)
        else:
            logger.info("%s: %s", name, status)
    logger.info("%d of %d trials written to %s", len(results) - failed, len(results), out)
    if failed:
        raise RunFailed(f"{failed} trial(s) could not be triangulated")


def _train_and_report(cfg, trials, model_cfg, train_cfg, out_dir, suffix="", write_curves_to=None):
    split = cfg.split_spec()
    params, history = train(trials, split, model_cfg, train_cfg)
    train_trials, val_trials = split_trials(trials, split)
    mass = mean_mass(train_trials)
    extra = {"mass_kg": mass, "train_config": train_cfg.to_dict(),
             "split": {"mode": split.mode, "held_out": list(split.held_out)},
             "train_trials": sorted(history.train_ids)}
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoints" / f"model{suffix}.ckpt", params, model_cfg, extra)
        history.to_csv(out_dir / f"history{suffix}.csv")
        if history.pretrained is not None:
            history.to_csv(out_dir / f"history_pretrain{suffix}.csv", phase="pretrain")
    if not val_trials:
        logger.warning("split %s leaves no validation trials; no report", split.mode)
        return None
    curves = {} if write_curves_to is not None else None
    report = evaluate(ModelPredictor(params, model_cfg), val_trials, mass, curves=curves, **_metric_kwargs(cfg))
    if curves is not None:
        write_curves(write_curves_to, curves)
    return report


def cmd_train(cfg, run_dir):
    trials = _load_trials(cfg.get("data", "trials_dir"), cfg.get("run", "jobs"))
    model_cfg = cfg.model_config()
    n = cfg.get("run", "trials")
    reports = []
    for t in range(n):
        report = _train_and_report(cfg, trials, model_cfg, cfg.train_config(seed_offset=t), run_dir, _suffix(t, n),
                                   run_dir / "curves" if t == 0 else None)
        if report is not None:
            reports.append(report)
            logger.info("trial %d: validation RMSE %.3f N", t, report["rmse_N"])
    if reports:
        _write_json(run_dir / "report.json", aggregate_reports(reports))


def cmd_eval(cfg, run_dir):
    ckpt = cfg.get("data", "checkpoint")
    if not ckpt:
        raise ConfigError("no checkpoint configured (use --checkpoint or data.checkpoint)")
    params, model_cfg, extra = load_checkpoint(ckpt)
    jobs = cfg.get("run", "jobs")
    if cfg.get("data", "eval_dir"):
        trials = _load_trials(cfg.get("data", "eval_dir"), jobs)
        train_side = None
    else:
        train_side, trials = split_trials(_load_trials(cfg.get("data", "trials_dir"), jobs), cfg.split_spec())
        if not trials:
            raise ConfigError("the configured split has no validation trials; set data.eval_dir")
    if "mass_kg" in extra:
        mass = float(extra["mass_kg"])
    elif train_side:
        mass = mean_mass(train_side)
    else:
        raise ConfigError("checkpoint carries no training-mean mass and no training split is configured")
    curves = {}
    report = evaluate(ModelPredictor(params, model_cfg), trials, mass, curves=curves, **_metric_kwargs(cfg))
    write_curves(run_dir / "curves", curves)
    _write_json(run_dir / "report.json", report)
    logger.info("RMSE %.3f N over %d videos", report["rmse_N"], report["n_videos"])


def cmd_zeroshot(cfg, run_dir):
    trials = _load_trials(cfg.get("data", "trials_dir"), cfg.get("run", "jobs"))
    folds = zero_shot_eval(trials, cfg.model_config(), cfg.train_config(), **_metric_kwargs(cfg))
    (run_dir / "reports").mkdir(exist_ok=True)
    for cls, report in folds.items():
        _write_json(run_dir / "reports" / f"{cls}.json", report)
    summary = {"n_folds": len(folds),
               "classes": {cls: {"rmse_N": r["rmse_N"], "kpeaks_N": r["kpeaks_N"], "audit": r["audit"]}
                           for cls, r in folds.items()}}
    _write_json(run_dir / "report.json", summary)
    for cls, r in folds.items():
        logger.info("held out %s: RMSE %.3f N", cls, r["rmse_N"])


def cmd_baseline(cfg, run_dir):
    b = cfg["baseline"]
    trials = _load_trials(cfg.get("data", "trials_dir"), cfg.get("run", "jobs"))
    train_trials, val_trials = split_trials(trials, cfg.split_spec())
    if not val_trials:
        val_trials = train_trials
    if b["kind"] == "newton":
        model = NewtonBaseline(smoothing=b["smoothing"], proxy=b["proxy"]).fit()
    elif b["kind"] == "exemplar":
        model = ExemplarBaseline(n_samples=b["n_samples"]).fit(train_trials)
    else:
        raise ConfigError(f"unknown baseline kind {b['kind']!r}")
    curves = {}
    report = evaluate(model, val_trials, mean_mass(train_trials), curves=curves, **_metric_kwargs(cfg))
    report["baseline"] = b["kind"]
    write_curves(run_dir / "curves", curves)
    _write_json(run_dir / "report.json", report)
    logger.info("%s baseline RMSE %.3f N", b["kind"], report["rmse_N"])


def sweep_values(axis, values):
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    if axis == "gate_T" and 1 not in values:
        values = [1] + values  # plain MSE is always the reference row
    return values


def cmd_sweep(cfg, run_dir):
    s = cfg["sweep"]
    axis = s["axis"]
    values = sweep_values(axis, s["values"])
    strategies = _split_list(s["strategies"])
    trials = _load_trials(cfg.get("data", "trials_dir"), cfg.get("run", "jobs"))
    n = cfg.get("run", "trials")
    k_cols = [f"kpeaks_{k}_N" for k in cfg.get("metrics", "k")]
    rows = []
    for strategy in strategies:
        for value in values:
            model_cfg = cfg.model_config()
            if axis == "receptive_field":
                model_cfg = replace(model_cfg, receptive_field=value)
            reports = []
            for t in range(n):
                train_cfg = replace(cfg.train_config(seed_offset=t), strategy=strategy)
                if axis == "gate_T":
                    train_cfg = replace(train_cfg, gate_T=value)
                report = _train_and_report(cfg, trials, model_cfg, train_cfg, None)
                if report is None:
                    raise ConfigError("a sweep needs a split with validation trials")
                reports.append(report)
            agg = aggregate_reports(reports)
            row = {"strategy": strategy, axis: value, "rmse_N": agg["rmse_N"],
                   "rmse_N_std": agg.get("rmse_N_std", 0.0), "n_trials": n}
            for k, col in zip(cfg.get("metrics", "k"), k_cols):
                row[col] = agg["kpeaks_N"][str(k)]
            rows.append(row)
            logger.info("%s %s=%s: RMSE %.3f N", strategy, axis, value, row["rmse_N"])
    columns = ["strategy", axis, "rmse_N", "rmse_N_std", *k_cols, "n_trials"]
    with open(run_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for row in rows:
            w.writerow({c: "" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                        for c in columns})


def cmd_plot(cfg, run_dir):
    p = cfg["plot"]
    inputs = _split_list(p["inputs"])
    if not inputs:
        raise ConfigError("plot needs at least one input (curve CSV or run directory)")
    labels = _split_list(p["labels"]) or [Path(i).name for i in inputs]
    if len(labels) != len(inputs):
        raise ConfigError(f"{len(labels)} labels for {len(inputs)} inputs")
    written = plot_sources(inputs, labels, run_dir / "plots", groups=tuple(_split_list(p["groups"])),
                           min_distance=cfg.get("metrics", "min_distance"))
    logger.info("wrote %d plots to %s", len(written), run_dir / "plots")


HANDLERS = {"synth": cmd_synth, "triangulate": cmd_triangulate, "train": cmd_train, "eval": cmd_eval,
            "zeroshot": cmd_zeroshot, "baseline": cmd_baseline, "sweep": cmd_sweep, "plot": cmd_plot}


def _configure_logging(level):
    # a fresh handler per call so it writes to the current sys.stderr
    for handler in list(logger.handlers):
        if getattr(handler, "_posegrf_cli", False):
            logger.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    handler._posegrf_cli = True
    logger.addHandler(handler)
    logger.setLevel(level)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(getattr(args, "log_level", "INFO"))
    try:
        cfg = resolve_config(args)
    except (ConfigError, ValueError) as exc:
        logger.error("%s", exc)
        return 2
    run_dir = Path(getattr(args, "out", "runs")) / cfg.get("run", "name")
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(run_dir / "config.ini")
    sys.stdout.write(f"# resolved configuration ({run_dir / 'config.ini'})\n{cfg.dumps()}")
    sys.stdout.flush()
    try:
        HANDLERS[args.command](cfg, run_dir)
    except RunFailed as exc:
        logger.error("%s", exc)
        return 1
    except EXPECTED_ERRORS as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return 1
    logger.info("run directory: %s", run_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())

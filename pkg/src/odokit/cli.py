"""Command-line entry point: gen, train-ppnet, predict, refine, eval."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics, ppnet, supervision, synth
from . import trajectory as trj

SCHEMA_VERSION = 1
LOG_ENV_VAR = "ODOKIT_LOG"

log = logging.getLogger("odokit")


class ConfigError(ValueError):
    """Bad run configuration: unknown keys or invalid combinations."""


# Hyperparameters shared across subcommands; flags win over config-file values.
_COMMON_FIELDS = {
    "window": int,
    "gamma": float,
    "k": float,
    "mlra_lambda": float,
    "mlra_period": int,
    "tau_percentile": float,
    "alpha": float,
    "scale_min": float,
    "scale_max": float,
    "align": str,
    "seed": int,
    "no_motion": bool,
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "steps": int,
    "segment_length": int,
}

_DEFAULTS = {
    "window": trj.DEFAULT_WINDOW,
    "gamma": 0.1,
    "k": 0.5,
    "mlra_lambda": 1.0,
    "mlra_period": 1250,
    "tau_percentile": 90.0,
    "alpha": 1.0,
    "scale_min": 0.02,
    "scale_max": 1.5,
    "align": "sim3",
    "seed": 0,
    "no_motion": False,
    "epochs": 200,
    "batch_size": 64,
    "learning_rate": None,  # per-command default if unset
    "steps": 250,
    "segment_length": 25,
}


def _add_common_flags(parser):
    parser.add_argument("--config", type=Path, help="JSON config file; explicit flags win")
    parser.add_argument("--window", type=int)
    parser.add_argument("--gamma", type=float)
    parser.add_argument("--k", type=float)
    parser.add_argument("--lambda", dest="mlra_lambda", type=float)
    parser.add_argument("--mlra-period", type=int)
    parser.add_argument("--tau-percentile", type=float)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--scale-min", type=float)
    parser.add_argument("--scale-max", type=float)
    parser.add_argument("--align", choices=("sim3", "se3"))
    parser.add_argument("--seed", type=int)
    parser.add_argument("--no-motion", action="store_const", const=True, default=None)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--learning-rate", type=float)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--segment-length", type=int)


def _resolve_config(args):
    """Merge defaults <- config file <- explicit flags, rejecting unknown keys."""
    merged = dict(_DEFAULTS)
    if args.config is not None:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(file_cfg) - set(_COMMON_FIELDS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, value in file_cfg.items():
            merged[key] = _COMMON_FIELDS[key](value)
    for key in _COMMON_FIELDS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _json_header(cfg):
    return {"schema_version": SCHEMA_VERSION, "seed": cfg["seed"]}


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def _load_trajectory(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read trajectory {path}: {exc}") from exc
    return trj.parse_kitti_poses(text)


def _load_model(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read model {path}: {exc}") from exc
    return ppnet.load_model(data)


def cmd_gen(args):
    cfg = _resolve_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = dict(_json_header(cfg), fixtures=[], kind=args.kind)
    if args.kind == "suite":
        for fixture in synth.standard_suite():
            gt, noisy = fixture.build()
            gt_path = out_dir / f"{fixture.name}_gt.txt"
            noisy_path = out_dir / f"{fixture.name}_noisy.txt"
            gt_path.write_text(trj.write_kitti_poses(gt))
            noisy_path.write_text(trj.write_kitti_poses(noisy))
            cfg_path = out_dir / f"{fixture.name}_fixture.json"
            _write_json(cfg_path, dict(_json_header(cfg), fixture=fixture.to_dict()))
            manifest["fixtures"].append(
                {"name": fixture.name, "gt": gt_path.name, "noisy": noisy_path.name,
                 "config": cfg_path.name, "frames": len(gt)}
            )
        log.info("wrote %d fixture pairs to %s", len(manifest["fixtures"]), out_dir)
    else:  # training pose sequences for the motion model
        for i, traj in enumerate(
            synth.training_trajectories(count=args.count, seed=cfg["seed"] + 1000)
        ):
            path = out_dir / f"train_{i:02d}.txt"
            path.write_text(trj.write_kitti_poses(traj))
            manifest["fixtures"].append({"name": path.stem, "poses": path.name, "frames": len(traj)})
        log.info("wrote %d training trajectories to %s", args.count, out_dir)
    _write_json(out_dir / "manifest.json", manifest)
    return 0


def cmd_train_ppnet(args):
    cfg = _resolve_config(args)
    dataset = [_load_trajectory(p) for p in args.data]
    config = ppnet.TrainConfig(
        learning_rate=cfg["learning_rate"] if cfg["learning_rate"] is not None else 1e-3,
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        gamma=cfg["gamma"],
        k=cfg["k"],
        seed=cfg["seed"],
        scale_min=cfg["scale_min"],
        scale_max=cfg["scale_max"],
        window=cfg["window"],
    )
    result = ppnet.train(dataset, config)
    Path(args.out).write_bytes(ppnet.save_model(result.params))
    if args.log:
        _write_json(
            args.log,
            dict(
                _json_header(cfg),
                best_epoch=result.best_epoch,
                best_val_nll=result.best_val_nll,
                history=result.history,
            ),
        )
    for row in result.history:
        log.info("epoch %s train_nll=%s val_nll=%s", row["epoch"], row["train_nll"], row["val_nll"])
    print(f"best_epoch={result.best_epoch} best_val_nll={result.best_val_nll:.6f}")
    return 0


def cmd_predict(args):
    cfg = _resolve_config(args)
    model = _load_model(args.model)
    traj = _load_trajectory(args.poses)
    if len(traj) < cfg["window"] + 1:
        raise ConfigError(f"trajectory has {len(traj)} poses; need more than window {cfg['window']}")
    labels = supervision.pseudo_labels_for_trajectory(model, traj.poses, None, cfg["window"])
    rows = [
        {
            "frame": int(f),
            "predicted_pose": [float(v) for v in p],
            "total_uncertainty": float(u),
        }
        for f, p, u in zip(labels["frames"], labels["predicted_abs"], labels["total_uncertainty"])
    ]
    _write_json(args.out, dict(_json_header(cfg), window=cfg["window"], rows=rows))
    print(f"wrote {len(rows)} predictions to {args.out}")
    return 0


def cmd_refine(args):
    cfg = _resolve_config(args)
    model = _load_model(args.model)
    noisy = _load_trajectory(args.noisy)
    config = synth.RefineConfig(
        window=cfg["window"],
        segment_length=cfg["segment_length"],
        steps=cfg["steps"],
        learning_rate=cfg["learning_rate"] if cfg["learning_rate"] is not None else 2e-4,
        alpha=cfg["alpha"],
        tau_percentile=cfg["tau_percentile"],
        gate=not args.ungated,
        seed=cfg["seed"],
    )
    if cfg["no_motion"]:
        weights = supervision.LossWeights(w=np.array([1.0, 0.0]), lam=cfg["mlra_lambda"],
                                          period=cfg["mlra_period"], max_updates=0)
    else:
        weights = supervision.LossWeights(lam=cfg["mlra_lambda"], period=cfg["mlra_period"])
    try:
        result = synth.refine(noisy, model, None, weights, config)
    except synth.RefinementDivergedError as exc:
        if args.diagnostics:
            _write_json(args.diagnostics, dict(_json_header(cfg), error=str(exc),
                                               diagnostics=exc.diagnostics))
        raise
    Path(args.out).write_text(trj.write_kitti_poses(result.corrected))
    if args.diagnostics:
        _write_json(args.diagnostics, dict(_json_header(cfg), diagnostics=result.diagnostics))
    if args.ref:
        ref = _load_trajectory(args.ref)
        before = metrics.ate(noisy, ref, with_scale=cfg["align"] == "sim3")
        after = metrics.ate(result.corrected, ref, with_scale=cfg["align"] == "sim3")
        print(f"ate_before={before:.6f} ate_after={after:.6f} "
              f"improvement_pct={100.0 * (before - after) / before if before else 0.0:.2f}")
    else:
        print(f"wrote corrected trajectory to {args.out}")
    return 0


def cmd_eval(args):
    cfg = _resolve_config(args)
    est = _load_trajectory(args.est)
    ref = _load_trajectory(args.ref)
    if len(est) != len(ref):
        raise ConfigError(f"trajectory lengths differ: {len(est)} vs {len(ref)}")
    report = metrics.evaluate(est, ref, with_scale=cfg["align"] == "sim3")
    payload = dict(_json_header(cfg), **report.as_dict())
    if args.out:
        _write_json(args.out, payload)
    print(f"ATE [m]:              {report.ate_m:.6f}")
    print(f"t_err [%]:            {report.t_err_pct:.6f}")
    print(f"r_err [deg/100m]:     {report.r_err_deg_per_100m:.6f}")
    for length, (t_e, r_e, n) in sorted(report.per_length.items()):
        print(f"  {int(length):>4d} m: t_err={t_e:.6f}%  r_err={r_e:.6f} deg/100m  ({n} spans)")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="odokit",
        description="Motion-model supervision and evaluation for odometry trajectories",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the fixture suite or training pose sequences")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--kind", choices=("suite", "training"), default="suite")
    p.add_argument("--count", type=int, default=10, help="training trajectories to emit")
    _add_common_flags(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train-ppnet", help="train the next-pose prediction network")
    p.add_argument("--data", nargs="+", required=True, help="KITTI pose files")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--log", help="JSON training log")
    _add_common_flags(p)
    p.set_defaults(func=cmd_train_ppnet)

    p = sub.add_parser("predict", help="predict next poses and uncertainties along a trajectory")
    p.add_argument("--model", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True)
    _add_common_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("refine", help="refine a noisy trajectory with motion supervision")
    p.add_argument("--model", required=True)
    p.add_argument("--noisy", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostics", help="JSON diagnostics log")
    p.add_argument("--ref", help="optional reference for before/after ATE")
    p.add_argument("--ungated", action="store_true",
                   help="disable the uncertainty gate and fix confidence at 1")
    _add_common_flags(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="evaluate an estimated trajectory against a reference")
    p.add_argument("--est", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", help="JSON report path")
    _add_common_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    level = os.environ.get(LOG_ENV_VAR, "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError, ArithmeticError, RuntimeError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

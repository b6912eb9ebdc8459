"""Command-line entry point: ``abnvar {train,eval,aggregate,export-map,compare}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from .config import MODES, ConfigError, RunConfig, parse_config, parse_config_text
from .envs import NoiseSpec, make_env
from .experiment import (CurveBundle, aggregate_curves, compare_report, export_feature_map,
                         manifest_series, run_experiment)
from .trainer import evaluate, load_checkpoint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_CENSORED = 4


def _seeds(text):
    try:
        if ":" in text:
            lo, hi = text.split(":")
            return list(range(int(lo), int(hi)))
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}; use '0,1,2' or '0:5'") from None


def build_parser():
    p = argparse.ArgumentParser(prog="abnvar", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", help="train every (seed, mode) cell of a config")
    t.add_argument("config", nargs="?", help="YAML run config")
    t.add_argument("--env", help="environment name when no config file is given")
    t.add_argument("--mode", action="append", choices=(*MODES, "both"),
                   help="repeatable; 'both' trains variance and baseline")
    t.add_argument("--sigma2", type=float)
    t.add_argument("--seeds", type=_seeds)
    t.add_argument("--workers", type=int)
    t.add_argument("--steps", type=int, help="total environment steps per cell")
    t.add_argument("--out")
    t.add_argument("--jobs", type=int, default=1, help="cells trained in parallel processes")

    e = sub.add_parser("eval", help="score a checkpoint on noise-free rewards")
    e.add_argument("checkpoint")
    e.add_argument("--config", help="run config (defaults to config.yaml next to the checkpoint)")
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--sample", action="store_true", help="sample actions instead of argmax")

    a = sub.add_parser("aggregate", help="min/mean/max envelopes over seeds")
    a.add_argument("csv", nargs="*", help="metrics or eval CSVs")
    a.add_argument("--run", help="run directory with a manifest")
    a.add_argument("--mode", choices=MODES)
    a.add_argument("--source", choices=("eval", "metrics"), default="eval")
    a.add_argument("--smooth", type=int, default=1)
    a.add_argument("--out", required=True)

    x = sub.add_parser("export-map", help="write a value or variance feature map")
    x.add_argument("checkpoint")
    x.add_argument("--which", choices=("value", "variance"), default="value")
    x.add_argument("--obs", help=".npy observation (C, H, W); default: a reset of the run's env")
    x.add_argument("--config", help="run config used to build the default observation")
    x.add_argument("--env-seed", type=int, default=0)
    x.add_argument("--no-overlay", action="store_true")
    x.add_argument("--out", help="output path prefix")

    c = sub.add_parser("compare", help="steps-to-threshold and final-score summary per mode")
    c.add_argument("--run", help="run directory with a manifest")
    c.add_argument("--bundle", action="append", default=[], metavar="MODE=CSV",
                   help="aggregated CurveBundle CSV per mode (repeatable)")
    c.add_argument("--threshold", type=float)
    c.add_argument("--final-window", type=int, default=5)
    c.add_argument("--out", required=True)
    return p


def _train(args):
    if args.config:
        cfg = parse_config(args.config)
    elif args.env:
        cfg = parse_config_text(f"env: {args.env}\n")
    else:
        raise ConfigError("train needs a config file or --env")
    modes = args.mode or [cfg.mode]
    modes = list(MODES) if "both" in modes else list(dict.fromkeys(modes))
    trainer = cfg.trainer
    if args.workers is not None:
        trainer = dataclasses.replace(trainer, workers=args.workers)
    if args.steps is not None:
        trainer = dataclasses.replace(trainer, total_steps=args.steps)
    try:
        noise = NoiseSpec(args.sigma2) if args.sigma2 is not None else cfg.noise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg = dataclasses.replace(cfg, trainer=trainer, noise=noise, seeds=tuple(args.seeds or cfg.seeds),
                              output_dir=args.out or cfg.output_dir)
    manifest = run_experiment(cfg.for_mode(modes[0]), modes=modes, jobs=args.jobs)
    print(f"wrote {len(manifest['cells'])} cells to {cfg.output_dir} (config hash {manifest['config_hash']})")
    return EXIT_OK


def _sibling_config(path, explicit):
    cfg_path = explicit or os.path.join(os.path.dirname(os.path.abspath(path)), "config.yaml")
    if not os.path.exists(cfg_path):
        raise ConfigError(f"no run config at {cfg_path}; pass --config")
    return parse_config(cfg_path)


def _eval(args):
    cfg = _sibling_config(args.checkpoint, args.config)
    net, meta = load_checkpoint(args.checkpoint)
    env = make_env(cfg.env_name, cfg.env_params, 0.0, seed=[args.seed, 10_000])
    mean, rets = evaluate(net, env, args.episodes, greedy=not args.sample, seed=args.seed)
    print(json.dumps({"global_step": meta["global_step"], "mean_return": mean,
                      "min_return": float(np.min(rets)), "max_return": float(np.max(rets))}))
    return EXIT_OK


def _aggregate(args):
    paths = list(args.csv)
    if args.run:
        if not args.mode:
            raise ConfigError("--run needs --mode")
        paths += manifest_series(args.run, args.mode, args.source)
    if not paths:
        raise ConfigError("no input series")
    bundle = aggregate_curves(paths, smooth=args.smooth)
    bundle.write_csv(args.out)
    print(f"aggregated {bundle.series.shape[0]} series over {bundle.steps.size} steps -> {args.out}")
    return EXIT_OK


def _export(args):
    if args.obs:
        obs = np.load(args.obs)
    else:
        cfg = _sibling_config(args.checkpoint, args.config)
        obs = make_env(cfg.env_name, cfg.env_params, 0.0, seed=args.env_seed).reset()
    m, paths = export_feature_map(args.checkpoint, obs, args.which, base=args.out,
                                  with_overlay=not args.no_overlay)
    print("\n".join(paths))
    return EXIT_OK


def _compare(args):
    bundles = {}
    threshold = args.threshold
    if args.run:
        from .experiment import load_manifest
        manifest = load_manifest(args.run)
        if threshold is None:
            threshold = manifest["config"]["threshold"]
        for mode in manifest["modes"]:
            bundles[mode] = aggregate_curves(manifest_series(args.run, mode, "eval"))
    for spec in args.bundle:
        mode, sep, path = spec.partition("=")
        if not sep:
            raise ConfigError(f"--bundle expects MODE=CSV, got {spec!r}")
        bundles[mode] = CurveBundle.read_csv(path)
    if not bundles:
        raise ConfigError("compare needs --run or --bundle")
    if threshold is None:
        threshold = RunConfig.__dataclass_fields__["threshold"].default
    rows, censored = compare_report(bundles, threshold, args.final_window, path=args.out)
    for r in rows:
        print(json.dumps(r))
    return EXIT_CENSORED if censored else EXIT_OK


_VERBS = {"train": _train, "eval": _eval, "aggregate": _aggregate, "export-map": _export, "compare": _compare}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _VERBS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit code
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

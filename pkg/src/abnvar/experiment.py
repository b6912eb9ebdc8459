"""Multi-seed runs, curve envelopes, comparison summaries and feature-map export."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .config import RunConfig, dump_config
from .envs import make_env
from .trainer import config_hash, init_store, load_checkpoint, save_checkpoint, train

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
CENSORED = "censored"
UNDEFINED = "undefined"


# -- running cells ---------------------------------------------------------------


def cell_dir(root, mode, seed):
    return os.path.join(root, mode, f"seed{seed}")


def run_cell(config: RunConfig, mode: str, seed: int, root: str) -> dict:
    """Train one (seed, mode) cell and write its artifacts.  Returns the manifest entry."""
    cfg = config.for_mode(mode).for_seed(seed)
    out = cell_dir(root, mode, seed)
    os.makedirs(out, exist_ok=True)
    chash = cfg.hash()
    probe = make_env(cfg.env_name, cfg.env_params, 0.0, seed=[seed, 20_000]).reset()
    maps = []

    def dump_maps(step, store):
        net = _net_from_store(cfg, store)
        for which in ("value", "variance") if cfg.network.variance_branch else ("value",):
            base = os.path.join(out, "maps", f"step{step:08d}_{which}")
            maps.extend(write_feature_map(feature_map(net, probe, which), base, obs=probe))

    store = init_store(cfg.network, cfg.trainer)
    hook = _MapHook(cfg.map_period, lambda step: dump_maps(step, store)) if cfg.map_period else None
    result = train(cfg.env_name, cfg.env_params, cfg.noise.sigma2, cfg.network, cfg.trainer,
                   on_event=hook, store=store)
    if cfg.map_period:
        dump_maps(result.store.global_step, result.store)
    files = {
        "metrics": os.path.join(out, "metrics.csv"),
        "eval": os.path.join(out, "eval.csv"),
        "checkpoint": os.path.join(out, "checkpoint.npz"),
        "config": os.path.join(out, "config.yaml"),
    }
    result.metrics.write_csv(files["metrics"])
    result.metrics.write_eval_csv(files["eval"])
    save_checkpoint(files["checkpoint"], result, extra_hash=chash)
    dump_config(cfg, files["config"])
    return {"mode": mode, "seed": seed, "config_hash": chash, "global_step": result.store.global_step,
            "skipped_updates": result.metrics.skipped,
            "files": {k: os.path.relpath(v, root) for k, v in files.items()},
            "maps": [os.path.relpath(p, root) for p in maps]}


class _MapHook:
    """Dumps feature maps from the telemetry consumer every ``period`` steps."""

    def __init__(self, period, dump):
        self.period, self.dump, self.next = period, dump, period

    def __call__(self, kind, row):
        if kind == "update" and row["global_step"] >= self.next:
            while self.next <= row["global_step"]:
                self.next += self.period
            self.dump(row["global_step"])


def _net_from_store(cfg, store):
    from .model import ABNVarianceNet
    net = ABNVarianceNet(cfg.network, cfg.trainer.seed)
    params, _ = store.snapshot()
    net.load_arrays(params, store.buffer_snapshot() or None)
    return net


def run_experiment(config: RunConfig, modes=None, out=None, jobs=1) -> dict:
    """Train every (seed, mode) cell and write ``manifest.json`` under ``out``.

    On a write failure the manifest is still written, marked ``partial``, and
    the error is re-raised.
    """
    root = out or config.output_dir
    modes = list(modes or [config.mode])
    os.makedirs(root, exist_ok=True)
    cells = [(m, s) for s in config.seeds for m in modes]
    manifest = {"config_hash": config.hash(), "config": config.to_dict(), "modes": modes,
                "seeds": list(config.seeds), "cells": [], "partial": False}
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                futures = [ex.submit(run_cell, config, m, s, root) for m, s in cells]
                for f in futures:
                    manifest["cells"].append(f.result())
        else:
            for m, s in cells:
                manifest["cells"].append(run_cell(config, m, s, root))
    except OSError as exc:
        manifest["partial"] = True
        manifest["error"] = repr(exc)
        _write_manifest(root, manifest)
        raise
    _write_manifest(root, manifest)
    return manifest


def _write_manifest(root, manifest):
    with open(os.path.join(root, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_manifest(root, verify=True) -> dict:
    """Read a manifest; with ``verify`` check its hash and that every listed file exists."""
    with open(os.path.join(root, MANIFEST)) as fh:
        manifest = json.load(fh)
    if verify:
        if config_hash(manifest["config"]) != manifest["config_hash"]:
            raise ValueError("manifest config hash does not match its config")
        for cell in manifest["cells"]:
            for rel in list(cell["files"].values()) + cell["maps"]:
                if not os.path.exists(os.path.join(root, rel)):
                    raise FileNotFoundError(f"manifest lists missing artifact {rel}")
    return manifest


def manifest_series(root, mode, which="eval"):
    """Paths of every cell CSV of ``mode`` in a run directory."""
    manifest = load_manifest(root, verify=False)
    return [os.path.join(root, c["files"][which]) for c in manifest["cells"] if c["mode"] == mode]


# -- curves ----------------------------------------------------------------------


@dataclass
class CurveBundle:
    steps: np.ndarray
    series: np.ndarray  # (n_seeds, n_steps), aligned
    labels: list = field(default_factory=list)

    @property
    def mean(self):
        return self.series.mean(axis=0)

    @property
    def min(self):
        return self.series.min(axis=0)

    @property
    def max(self):
        return self.series.max(axis=0)

    def write_csv(self, path):
        labels = list(self.labels) if len(self.labels) == len(self.series) else \
            [f"s{i}" for i in range(len(self.series))]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["global_step", "min", "mean", "max", *labels])
            for i, step in enumerate(self.steps):
                w.writerow([int(step), repr(float(self.min[i])), repr(float(self.mean[i])),
                            repr(float(self.max[i])), *(repr(float(v)) for v in self.series[:, i])])

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        data = np.array([[float(v) for v in r] for r in body]).reshape(len(body), len(header))
        return cls(data[:, 0].astype(np.int64), data[:, 4:].T.copy(), header[4:])


def read_series(path, column=None):
    """(steps, scores) from a metrics or eval CSV.  ``column`` defaults per file kind."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        fields = reader.fieldnames or []
    if column is None:
        column = "mean_return" if "mean_return" in fields else "episode_return"
    if rows and column not in fields:
        raise ValueError(f"{path}: no column {column!r}")
    steps = np.array([int(float(r["global_step"])) for r in rows], dtype=np.int64)
    vals = np.array([float(r[column]) for r in rows], dtype=float)
    order = np.argsort(steps, kind="stable")
    return steps[order], vals[order]


def carry_forward(steps, values, grid):
    """Step-wise last-value-carried-forward of (steps, values) onto ``grid``."""
    idx = np.searchsorted(steps, grid, side="right") - 1
    if np.any(idx < 0):
        raise ValueError("grid starts before the series")
    return values[idx]


def aggregate_curves(series, grid=None, smooth=1, labels=None) -> CurveBundle:
    """Align score series on a common step grid and take pointwise envelopes.

    ``series`` holds CSV paths or (steps, values) pairs.  Empty series are
    skipped with a warning.  The default grid is the union of observed steps
    from the latest series start onward; ``smooth`` > 1 applies a trailing
    moving average per series before alignment.
    """
    loaded, names = [], []
    for i, s in enumerate(series):
        steps, vals = read_series(s) if isinstance(s, (str, os.PathLike)) else map(np.asarray, s)
        name = labels[i] if labels else (os.path.basename(os.path.dirname(s)) if isinstance(s, str) else f"s{i}")
        if steps.size == 0:
            logger.warning("skipping empty series %s", name)
            continue
        if smooth > 1:
            c = np.cumsum(np.insert(vals.astype(float), 0, 0.0))
            lo = np.maximum(np.arange(vals.size) + 1 - smooth, 0)
            vals = (c[1:] - c[lo]) / (np.arange(vals.size) + 1 - lo)
        loaded.append((np.asarray(steps), np.asarray(vals, dtype=float)))
        names.append(name)
    if not loaded:
        raise ValueError("no non-empty series to aggregate")
    start = max(s[0] for s, _ in loaded)
    if grid is None:
        grid = np.unique(np.concatenate([s[s >= start] for s, _ in loaded]))
    grid = np.asarray(grid, dtype=np.int64)
    aligned = np.stack([carry_forward(s, v, grid) for s, v in loaded])
    return CurveBundle(grid, aligned, names)


# -- comparison ------------------------------------------------------------------


def first_crossing(steps, values, threshold):
    hit = np.nonzero(np.asarray(values) >= threshold)[0]
    return (int(steps[hit[0]]), False) if hit.size else (int(steps[-1]), True)


@dataclass
class ModeSummary:
    mode: str
    median_steps: float
    censored_seeds: int
    n_seeds: int
    mean_curve_steps: int
    mean_curve_censored: bool
    final_mean: float
    final_std: float
    final_min: float
    final_max: float
    per_seed_steps: list

    @property
    def final_spread(self):
        return self.final_max - self.final_min

    @property
    def censored(self):
        return self.censored_seeds * 2 > self.n_seeds


def summarize(bundle: CurveBundle, threshold, final_window=5, mode="") -> ModeSummary:
    """Steps-to-threshold per seed (censored at the budget) and final-window score stats."""
    crossings = [first_crossing(bundle.steps, s, threshold) for s in bundle.series]
    steps = [c[0] for c in crossings]
    mean_steps, mean_cens = first_crossing(bundle.steps, bundle.mean, threshold)
    w = max(1, min(final_window, bundle.steps.size))
    final = bundle.series[:, -w:].mean(axis=1)
    return ModeSummary(mode, float(np.median(steps)), sum(c[1] for c in crossings), len(steps),
                       mean_steps, mean_cens, float(final.mean()), float(final.std()),
                       float(final.min()), float(final.max()), steps)


def compare_report(bundles: dict, threshold, final_window=5, path=None):
    """Summary rows per mode plus the speedup of each mode over every other.

    ``speedup`` for mode A against B is median_steps(B) / median_steps(A);
    when the median of either side is censored it is reported as
    ``undefined``.  Returns (rows, any_censored).
    """
    summaries = {m: summarize(b, threshold, final_window, m) for m, b in bundles.items()}
    rows = []
    for m, s in summaries.items():
        row = {"mode": m, "median_steps_to_threshold": s.median_steps,
               "censored_seeds": s.censored_seeds, "n_seeds": s.n_seeds,
               "status": CENSORED if s.censored else "reached",
               "mean_curve_steps": s.mean_curve_steps,
               "mean_curve_status": CENSORED if s.mean_curve_censored else "reached",
               "final_mean": s.final_mean, "final_std": s.final_std,
               "final_min": s.final_min, "final_max": s.final_max, "final_spread": s.final_spread}
        for other, o in summaries.items():
            if other == m:
                continue
            if s.censored or o.censored or s.median_steps == 0:
                row[f"speedup_vs_{other}"] = UNDEFINED
            else:
                row[f"speedup_vs_{other}"] = o.median_steps / s.median_steps
        rows.append(row)
    if path is not None:
        keys = list(dict.fromkeys(k for r in rows for k in r))
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, keys)
            w.writeheader()
            w.writerows(rows)
    return rows, any(s.censored for s in summaries.values())


# -- feature maps ----------------------------------------------------------------


def feature_map(net, obs, which="value") -> np.ndarray:
    """The (H', W') value or variance map for one observation, eval-mode batch norm."""
    obs = np.asarray(obs, dtype=float)
    if obs.ndim == 3:
        obs = obs[None]
    if obs.ndim != 4 or obs.shape[0] != 1:
        raise nn.ContractError(f"expected one observation (C, H, W), got {obs.shape}")
    with nn.no_grad():
        out = net.forward(obs, mode="eval", update_stats=False)
    if which == "value":
        m = out.value_map
    elif which == "variance":
        if out.variance_map is None:
            raise ValueError("network has no variance branch")
        m = out.variance_map
    else:
        raise ValueError(f"which must be 'value' or 'variance', got {which!r}")
    return np.array(m.data[0, 0])


def normalize_map(m) -> np.ndarray:
    """Min-max scale to uint8 [0, 255]; a constant map becomes mid-gray 128."""
    m = np.asarray(m, dtype=float)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.full(m.shape, 128, dtype=np.uint8)
    return np.rint((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, img):
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary graymap")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def write_map_csv(path, m):
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in np.asarray(m)])


def read_map_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def upsample_nearest(img, shape):
    h, w = img.shape
    rows = np.arange(shape[0]) * h // shape[0]
    cols = np.arange(shape[1]) * w // shape[1]
    return img[np.ix_(rows, cols)]


def overlay(map_img, obs, alpha=0.5):
    """Blend the upsampled map over the newest frame of ``obs``."""
    frame = np.asarray(obs)[-1]
    base = normalize_map(frame) if frame.max() > frame.min() else np.zeros(frame.shape, np.uint8)
    up = upsample_nearest(map_img, frame.shape).astype(float)
    return np.rint(alpha * up + (1 - alpha) * base).astype(np.uint8)


def write_feature_map(m, base, obs=None):
    """Write ``base.pgm``, ``base.csv`` and (with ``obs``) ``base_overlay.pgm``."""
    os.makedirs(os.path.dirname(base) or ".", exist_ok=True)
    img = normalize_map(m)
    paths = [base + ".pgm", base + ".csv"]
    write_pgm(paths[0], img)
    write_map_csv(paths[1], m)
    if obs is not None:
        paths.append(base + "_overlay.pgm")
        write_pgm(paths[2], overlay(img, obs))
    return paths


def export_feature_map(checkpoint, obs, which="value", base=None, with_overlay=True, expected_hash=None):
    """Load a checkpoint, compute the selected map for ``obs`` and write it out.

    Returns (raw map, written paths).
    """
    net, _ = load_checkpoint(checkpoint, expected_hash)
    m = feature_map(net, obs, which)
    base = base or os.path.splitext(checkpoint)[0] + f"_{which}"
    return m, write_feature_map(m, base, obs if with_overlay else None)

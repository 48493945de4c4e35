"""Matched fixed-vs-adaptive bin trainings over a list of bin counts."""
from __future__ import annotations

import copy
import json
import time
from pathlib import Path

import numpy as np

from .config import TrainConfig, dump_config
from .train import evaluate_tiles, load_scenes, scenes_to_tiles, train

MODES = ("fixed", "adaptive")


def bimodal_config(base: TrainConfig) -> TrainConfig:
    """Same config on a dataset whose scenes hold only ground and one shared roof level."""
    cfg = copy.deepcopy(base)
    cfg.data.synth_shared_roof = True
    cfg.data.synth_trees = False
    return cfg


def variant(base: TrainConfig, n_bins: int, mode: str) -> TrainConfig:
    if mode not in MODES:
        raise ValueError(f"unknown bin type {mode!r}; expected one of {MODES}")
    cfg = copy.deepcopy(base)
    cfg.encoder.n_bins = n_bins
    cfg.decoder.n_bins = n_bins
    cfg.decoder.fixed_bins = mode == "fixed"
    return cfg


def run_bin_ablation(base: TrainConfig, ns, out_dir: str | Path | None = None, modes=MODES, seeds=None) -> list[dict]:
    """Train one model per (mode, N, seed) with identical data and step budget.

    Rows are ordered fixed first then adaptive, each by increasing N. Metrics are
    validation scores of the final weights, averaged over ``seeds`` (default: the
    config seed alone); ``rel_per_seed`` keeps the individual runs.
    """
    out_dir = Path(out_dir) if out_dir else None
    seeds = list(seeds) if seeds else [base.seed]
    train_scenes, val_scenes = load_scenes(base)
    tiles = scenes_to_tiles(train_scenes, base.data.tile, base.data.max_tiles)
    val_tiles = scenes_to_tiles(val_scenes, base.data.tile) if val_scenes else tiles
    keys = ("rel", "rmse_log", "delta1", "delta2", "delta3")
    rows = []
    for mode in modes:
        for n in sorted(ns):
            runs, t0 = [], time.perf_counter()
            for seed in seeds:
                cfg = variant(base, n, mode)
                cfg.seed = seed
                name = f"{mode}-N{n}" + (f"-s{seed}" if len(seeds) > 1 else "")
                ckpt = train(cfg, out_dir / name if out_dir else None, tiles=tiles, val_tiles=val_tiles, validate=False)
                runs.append(evaluate_tiles(ckpt.model, val_tiles, cfg).as_dict())
            rows.append({
                "type": mode,
                "n_bins": n,
                **{k: float(np.mean([r[k] for r in runs])) for k in keys},
                "rel_per_seed": [r["rel"] for r in runs],
                "seeds": seeds,
                "steps": ckpt.step,
                "train_seconds": round(time.perf_counter() - t0, 1),
            })
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.resolved.cfg").write_text(dump_config(base))
        (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
        (out_dir / "ablation.txt").write_text(format_table(rows))
    return rows


def format_table(rows: list[dict]) -> str:
    head = f"{'Type':<10}{'N':>5}{'Rel':>10}{'RMSE(log)':>11}{'d1':>8}{'d2':>8}{'d3':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['type']:<10}{r['n_bins']:>5}{r['rel']:>10.4f}{r['rmse_log']:>11.4f}"
            f"{r['delta1']:>8.4f}{r['delta2']:>8.4f}{r['delta3']:>8.4f}"
        )
    return "\n".join(lines) + "\n"

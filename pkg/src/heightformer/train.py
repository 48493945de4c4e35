"""Training loop, LR schedule, stitched full-scene prediction and throughput benchmark."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .config import SynthSpec, TrainConfig, dump_config
from .losses import offset_heights, silog_loss
from .metrics import MetricsReport, evaluate
from .model import HeightFormer, count_parameters, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)


class NumericError(RuntimeError):
    pass


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_frac: float = 0.125) -> float:
    """Linear warmup over the first floor(total * warmup_frac) steps, then linear decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = math.floor(total_steps * warmup_frac)
    if warm > 0 and step <= warm:
        return base_lr * step / warm
    if total_steps == warm:
        return base_lr
    return base_lr * (total_steps - step) / (total_steps - warm)


# -- datasets ----------------------------------------------------------------

def synth_specs(cfg: TrainConfig, count: int, seed_base: int) -> list[SynthSpec]:
    """Scenes with object sizes in meters: 6-15 m building footprints, 1.5-4 m canopy radii."""
    d = cfg.data
    span = d.h_max - d.h_min
    size = d.synth_size
    resolution = d.synth_resolution
    area_m2 = (size * resolution) ** 2
    px = lambda m: max(2, round(m / resolution))  # noqa: E731
    return [
        SynthSpec(
            size=(size, size),
            ground_height=d.h_min + 0.25 * span,
            height_range=(d.h_min, d.h_max),
            n_buildings=max(1, round(area_m2 / 500)),
            building_height=(0.1 * span, 0.6 * span),
            building_size=(px(6.0), px(15.0)),
            n_trees=round(area_m2 / 250) if d.synth_trees else 0,
            tree_height=(0.075 * span, 0.3 * span),
            tree_radius=(px(1.5), px(4.0)),
            road_fraction=0.1,
            shared_roof=d.synth_shared_roof,
            resolution=resolution,
            seed=seed_base + i,
        )
        for i in range(count)
    ]


def _cache_dir(cfg: TrainConfig) -> Path | None:
    root = os.environ.get("HEIGHTFORMER_CACHE")
    if not root:
        return None
    key = hashlib.sha1(
        repr([cfg.data.synth_scenes, cfg.data.synth_val_scenes, cfg.data.synth_size, cfg.data.synth_shared_roof,
              cfg.data.synth_trees, cfg.data.synth_resolution,
              cfg.data.synth_seed, cfg.data.h_min, cfg.data.h_max]).encode()
    ).hexdigest()[:12]
    return Path(root) / f"synthetic-{key}"


def load_scenes(cfg: TrainConfig) -> tuple[list[D.ScenePair], list[D.ScenePair]]:
    """Train and validation scenes from ``data.root``, or synthesized ones."""
    d = cfg.data
    hr = (d.h_min, d.h_max)
    if d.root:
        pairs = D.list_pairs(d.root)
        stems = [s for s, _, _ in pairs]
        val = list(d.val_stems)
        train = list(d.train_stems) or [s for s in stems if s not in val]
        unknown = sorted(set(train + val) - set(stems))
        if unknown:
            raise D.DataError(f"split names stems not found under {d.root}: {', '.join(unknown)}")
        load = lambda s: D.load_scene(d.root, s, d.sentinel, hr)  # noqa: E731
        return [load(s) for s in train], [load(s) for s in val]
    if not d.synthetic:
        raise D.DataError("data.root is empty and data.synthetic is false")
    train_specs = synth_specs(cfg, d.synth_scenes, d.synth_seed)
    val_specs = synth_specs(cfg, d.synth_val_scenes, d.synth_seed + 10_000)
    cache = _cache_dir(cfg)
    if cache is not None:
        if not (cache / "dsm").is_dir():
            D.write_synthetic_dataset(cache, train_specs, "train")
            D.write_synthetic_dataset(cache, val_specs, "val")
        stems = [s for s, _, _ in D.list_pairs(cache)]
        load = lambda s: D.load_scene(cache, s, d.sentinel, hr)  # noqa: E731
        return [load(s) for s in stems if s.startswith("train")], [load(s) for s in stems if s.startswith("val")]
    return [D.synth_scene(s) for s in train_specs], [D.synth_scene(s) for s in val_specs]


def scenes_to_tiles(scenes, tile: int, max_tiles: int = 0) -> list[D.TilePair]:
    tiles = [t for s in scenes for t in D.crop_grid(s, tile)]
    return tiles[:max_tiles] if max_tiles else tiles


# -- training ----------------------------------------------------------------

@dataclass
class Checkpoint:
    model: HeightFormer
    config: TrainConfig
    step: int
    history: list[dict] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)
    optimizer_state: dict | None = None
    path: Path | None = None

    @property
    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history]


def _batch(dataset: D.TileDataset, indices, epoch: int, device, pool: ThreadPoolExecutor | None = None):
    # per-sample RNG streams make the result independent of the worker count
    load = lambda i: dataset.get(int(i), epoch)  # noqa: E731
    samples = list(pool.map(load, indices)) if pool else [load(i) for i in indices]
    imgs, dsms, masks = [], [], []
    for t in samples:
        imgs.append(t.image.transpose(2, 0, 1))
        dsms.append(np.where(t.valid_mask, t.dsm, t.height_range[0]))
        masks.append(t.valid_mask)
    to = lambda a, dt: torch.from_numpy(np.ascontiguousarray(np.stack(a))).to(device=device, dtype=dt)  # noqa: E731
    return to(imgs, torch.float32), to(dsms, torch.float32), to(masks, torch.bool)


def batch_loss(model: HeightFormer, image, dsm, mask, cfg: TrainConfig):
    out = model(image)
    h_min = cfg.data.h_min
    pred = offset_heights(out.heights.values, h_min, cfg.loss.offset_m)
    gt = offset_heights(dsm, h_min, cfg.loss.offset_m)
    return silog_loss(pred, gt, mask, cfg.loss), out


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def train(
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    tiles: list[D.TilePair] | None = None,
    val_tiles: list[D.TilePair] | None = None,
    resume: str | Path | None = None,
    stop_at: int | None = None,
    validate: bool = True,
) -> Checkpoint:
    """Optimize a fresh (or resumed) model; fully reproducible for a fixed seed on one device.

    ``stop_at`` halts after that many optimizer steps and writes ``last.pt`` so a
    later ``resume`` continues the identical trajectory.
    """
    if cfg.threads:
        torch.set_num_threads(cfg.threads)
    device = torch.device(cfg.device)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.resolved.cfg").write_text(dump_config(cfg))

    if tiles is None:
        train_scenes, val_scenes = load_scenes(cfg)
        tiles = scenes_to_tiles(train_scenes, cfg.data.tile, cfg.data.max_tiles)
        if val_tiles is None:
            val_tiles = scenes_to_tiles(val_scenes, cfg.data.tile) if val_scenes else []
    dataset = D.TileDataset(tiles, cfg.augment, seed=cfg.seed)
    val_tiles = val_tiles or []

    model = HeightFormer.from_config(cfg).to(device)
    optimizer = make_optimizer(model, cfg)
    step, history, validation = 0, [], []
    if resume:
        payload = torch.load(resume, map_location=device, weights_only=False)
        model.load_state_dict(payload["model"])
        optimizer.load_state_dict(payload["optimizer"])
        step = payload["step"]
        history = payload.get("history", [])
        validation = payload.get("validation", [])

    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps:
        total = min(total, cfg.max_steps)
    log_file = open(out_dir / "train_log.jsonl", "a") if out_dir else None
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 0 else None
    best_rel = min((v["rel"] for v in validation), default=math.inf)
    t0 = time.perf_counter()

    def checkpoint(name: str):
        if out_dir:
            save_checkpoint(out_dir / name, model, cfg, optimizer, step, history, {"validation": validation})

    try:
        while step < total:
            epoch, offset = divmod(step, steps_per_epoch)
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
            model.train()
            for b in range(offset, steps_per_epoch):
                if step >= total:
                    break
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                image, dsm, mask = _batch(dataset, idx, epoch, device, pool)
                lr = lr_schedule(step + 1, total, cfg.lr, cfg.warmup_frac)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                loss, _ = batch_loss(model, image, dsm, mask, cfg)
                if not torch.isfinite(loss):
                    if out_dir:
                        torch.save({"image": image, "dsm": dsm, "mask": mask, "step": step}, out_dir / "nonfinite_batch.pt")
                    raise NumericError(f"non-finite loss at step {step + 1} (batch indices {idx.tolist()})")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                step += 1
                record = {"step": step, "lr": lr, "loss": loss.item(), "wall": time.perf_counter() - t0}
                history.append(record)
                if log_file and (step % cfg.log_every == 0 or step == total):
                    log_file.write(json.dumps(record) + "\n")
                    log_file.flush()
                if stop_at is not None and step >= stop_at:
                    checkpoint("last.pt")
                    return Checkpoint(model, cfg, step, history, validation, optimizer.state_dict(),
                                      out_dir / "last.pt" if out_dir else None)
            # end of epoch (or of the step budget)
            if validate and val_tiles:
                report = evaluate_tiles(model, val_tiles, cfg)
                entry = {"step": step, "epoch": epoch + 1, **{k: report.as_dict()[k] for k in ("rel", "rmse_log", "delta1")}}
                validation.append(entry)
                logger.info("epoch %d step %d val rel %.4f", epoch + 1, step, report.rel)
                if report.rel < best_rel:
                    best_rel = report.rel
                    checkpoint("best.pt")
            checkpoint("last.pt")
    finally:
        if log_file:
            log_file.close()
        if pool:
            pool.shutdown()
    return Checkpoint(model, cfg, step, history, validation, optimizer.state_dict(),
                      out_dir / "last.pt" if out_dir else None)


@torch.no_grad()
def predict_tiles(model: HeightFormer, tiles, batch_size: int = 4) -> list[np.ndarray]:
    model.eval()
    device = next(model.parameters()).device
    outs = []
    for i in range(0, len(tiles), batch_size):
        chunk = tiles[i:i + batch_size]
        image = torch.from_numpy(np.stack([t.image.transpose(2, 0, 1) for t in chunk])).float().to(device)
        outs.extend(model(image).heights.values.double().cpu().numpy())
    return outs


def evaluate_tiles(model: HeightFormer, tiles, cfg: TrainConfig) -> MetricsReport:
    preds = predict_tiles(model, tiles)
    return evaluate(
        preds,
        [t.dsm for t in tiles],
        [t.valid_mask for t in tiles],
        h_min=cfg.data.h_min,
        offset_m=cfg.loss.offset_m,
    )


# -- stitched prediction -----------------------------------------------------

@dataclass
class StitchedPrediction:
    heights: np.ndarray  # (H, W) meters
    height_range: tuple[float, float]
    bins: list[np.ndarray]
    origins: list[tuple[int, int]]


def feather_weights(tile: int, overlap: int) -> np.ndarray:
    """Separable linear ramp over ``overlap`` pixels at each tile border; strictly positive."""
    x = np.arange(tile, dtype=np.float64)
    if overlap <= 0:
        ramp = np.ones(tile)
    else:
        ramp = np.minimum(1.0, np.minimum(x + 1, tile - x) / (overlap + 1))
    return np.outer(ramp, ramp)


@torch.no_grad()
def predict(model, scene: D.ScenePair, tile: int, overlap: int = 0) -> StitchedPrediction:
    """Full-scene heights: overlapping tiles, one forward each, feathered blending."""
    if isinstance(model, Checkpoint):
        model = model.model
    if not 0 <= overlap < tile:
        raise ValueError(f"overlap must lie in [0, tile), got {overlap}")
    model.eval()
    device = next(model.parameters()).device
    image = scene.image
    H, W = image.shape[:2]
    pad_h, pad_w = max(0, tile - H), max(0, tile - W)
    if pad_h or pad_w:
        image = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect" if min(H, W) > 1 else "edge")
    Hp, Wp = image.shape[:2]
    stride = tile - overlap
    weights = feather_weights(tile, overlap)
    acc = np.zeros((Hp, Wp))
    wsum = np.zeros((Hp, Wp))
    bins, origins = [], []
    for r in D.grid_origins(Hp, tile, stride):
        for c in D.grid_origins(Wp, tile, stride):
            x = torch.from_numpy(np.ascontiguousarray(image[r:r + tile, c:c + tile].transpose(2, 0, 1)))[None]
            out = model(x.float().to(device))
            last = out.heights.values[0].double().cpu().numpy()
            acc[r:r + tile, c:c + tile] += weights * last
            wsum[r:r + tile, c:c + tile] += weights
            bins.append(out.bins.logits[0].cpu().numpy())
            origins.append((r, c))
    # one tile: return the forward pass untouched (blending would round)
    heights = last[:H, :W] if len(origins) == 1 else (acc / wsum)[:H, :W]
    return StitchedPrediction(heights, model.h_range, bins, origins)


# -- benchmark ---------------------------------------------------------------

def hardware_descriptor() -> str:
    cpu = platform.processor() or platform.machine()
    return f"{platform.system()} {cpu}, torch {torch.__version__}, {torch.get_num_threads()} threads"


@torch.no_grad()
def benchmark(model, input_size: int | tuple[int, int], repetitions: int = 10, warmup: int = 1) -> dict:
    if isinstance(model, Checkpoint):
        model = model.model
    model.eval()
    h, w = (input_size, input_size) if isinstance(input_size, int) else input_size
    device = next(model.parameters()).device
    x = torch.rand(1, 3, h, w, generator=torch.Generator().manual_seed(0)).to(device)
    for _ in range(warmup):
        model(x)
    samples = []
    for _ in range(repetitions):
        t = time.perf_counter()
        model(x)
        samples.append(time.perf_counter() - t)
    arr = np.asarray(samples)
    total, breakdown = count_parameters(model)
    median = float(np.median(arr))
    return {
        "input_size": [h, w],
        "repetitions": repetitions,
        "samples_s": samples,
        "median_s": median,
        "p95_s": float(np.percentile(arr, 95)),
        "fps": 1.0 / median if median > 0 else float("inf"),
        "parameters": total,
        "parameter_breakdown": dict(count_parameters(model, depth=1)[1]),
        "hardware": hardware_descriptor(),
    }


__all__ = [
    "Checkpoint",
    "NumericError",
    "benchmark",
    "evaluate_tiles",
    "feather_weights",
    "load_checkpoint",
    "lr_schedule",
    "predict",
    "train",
]

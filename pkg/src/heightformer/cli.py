"""Command-line entry point: ``heightformer <subcommand> [--config FILE] [--set key=value ...] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .config import ConfigError, TrainConfig, apply_overrides, dump_config, load_config

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("heightformer")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, out_default: str):
    p.add_argument("--config", help="key=value config file with section prefixes")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config entry; repeatable")
    p.add_argument("--out", default=out_default, help=f"output directory (default {out_default})")


def build_parser() -> Parser:
    parser = Parser(prog="heightformer", description="Monocular height estimation from aerial images.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    p = sub.add_parser("make-synthetic", help="write a synthetic images/ + dsm/ dataset")
    _common(p, "data/synthetic")
    p.add_argument("--scenes", type=int, help="training scenes (data.synth_scenes)")
    p.add_argument("--val-scenes", type=int, help="validation scenes (data.synth_val_scenes)")
    p.add_argument("--size", type=int, help="scene side in pixels (data.synth_size)")

    p = sub.add_parser("train", help="train a model")
    _common(p, "runs/train")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("evaluate", help="score predicted DSMs against ground truth")
    _common(p, "runs/evaluate")
    p.add_argument("--pred", required=True, help="folder of predicted DSMs (or a dataset root with dsm/)")
    p.add_argument("--gt", required=True, help="folder of ground-truth DSMs (or a dataset root with dsm/)")
    p.add_argument("--h-min", type=float, help="dataset minimum height; default from ground-truth headers")

    p = sub.add_parser("predict", help="full-scene prediction with tiled stitching and PNG renders")
    _common(p, "runs/predict")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="dataset root with images/ (dsm/ optional) or one PNG")
    p.add_argument("--tile", type=int, help="tile size (default data.tile)")
    p.add_argument("--overlap", type=int, default=64)

    p = sub.add_parser("benchmark", help="forward-pass latency and parameter count")
    _common(p, "runs/benchmark")
    p.add_argument("--checkpoint", help="checkpoint to time; default is a fresh model from the config")
    p.add_argument("--size", type=int, default=448, help="square input side in pixels")
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--warmup", type=int, default=1)

    p = sub.add_parser("ablate-bins", help="matched fixed vs adaptive bin trainings over N")
    _common(p, "runs/ablate-bins")
    p.add_argument("--n", default="8,64", help="comma-separated bin counts")
    p.add_argument("--seeds", help="comma-separated training seeds averaged per row (default train.seed)")
    return parser


def _parse_pairs(items) -> dict[str, str]:
    pairs = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def _resolve(args) -> TrainConfig:
    if args.config and not Path(args.config).is_file():
        raise FileNotFoundError(f"config file not found: {args.config}")
    return load_config(args.config, _parse_pairs(args.overrides))


def _snapshot(out: Path, cfg: TrainConfig):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.cfg").write_text(dump_config(cfg))


# -- subcommands -------------------------------------------------------------

def cmd_make_synthetic(args, cfg: TrainConfig, out: Path):
    from .train import synth_specs

    for flag, key in (("scenes", "synth_scenes"), ("val_scenes", "synth_val_scenes"), ("size", "synth_size")):
        if getattr(args, flag) is not None:
            cfg = apply_overrides(cfg, {f"data.{key}": str(getattr(args, flag))})
    _snapshot(out, cfg)
    stems = D.write_synthetic_dataset(out, synth_specs(cfg, cfg.data.synth_scenes, cfg.data.synth_seed), "train")
    stems += D.write_synthetic_dataset(
        out, synth_specs(cfg, cfg.data.synth_val_scenes, cfg.data.synth_seed + 10_000), "val"
    )
    print(f"wrote {len(stems)} scenes to {out}")


def cmd_train(args, cfg: TrainConfig, out: Path):
    from .train import train

    if args.resume and not Path(args.resume).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.resume}")
    _snapshot(out, cfg)
    ckpt = train(cfg, out, resume=args.resume)
    last = ckpt.history[-1]["loss"] if ckpt.history else float("nan")
    print(f"trained {ckpt.step} steps, final loss {last:.4f}; checkpoint {out / 'last.pt'}")


def _read_dsm_set(folder) -> dict[str, Path]:
    folder = Path(folder)
    if not folder.is_dir():
        raise FileNotFoundError(f"not a directory: {folder}")
    return D.find_dsm_files(folder)


def cmd_evaluate(args, cfg: TrainConfig, out: Path):
    from .metrics import evaluate

    preds, gts = _read_dsm_set(args.pred), _read_dsm_set(args.gt)
    unmatched = sorted(set(preds) ^ set(gts))
    if unmatched:
        raise D.DataError(f"unmatched stems between --pred and --gt: {', '.join(unmatched)}")
    if not gts:
        raise D.DataError(f"no DSM files found under {args.gt}")
    stems = sorted(gts)
    p_set, g_set, masks, header_mins = [], [], [], []
    for stem in stems:
        p, _ = D.read_dsm(preds[stem], cfg.data.sentinel)
        g, header = D.read_dsm(gts[stem], cfg.data.sentinel)
        if p.shape != g.shape:
            raise D.DataError(f"{stem}: prediction {p.shape} and ground truth {g.shape} differ in shape")
        if header.get("h_min") is not None:
            header_mins.append(header["h_min"])
        masks.append(np.isfinite(p) & np.isfinite(g))
        p_set.append(np.nan_to_num(p))
        g_set.append(np.nan_to_num(g))
    if args.h_min is not None:
        h_min = args.h_min
    elif header_mins:
        h_min = min(header_mins)
    else:
        h_min = cfg.data.h_min
    report = evaluate(p_set, g_set, masks, h_min=h_min, offset_m=cfg.loss.offset_m, names=stems)
    _snapshot(out, cfg)
    (out / "metrics.json").write_text(report.to_json())
    (out / "metrics.txt").write_text(report.to_table())
    print(report.to_table(), end="")


def _predict_inputs(path: Path, cfg: TrainConfig):
    """Yield (stem, image, dsm-or-None)."""
    if path.is_file():
        yield path.stem, D.read_png(path), None
        return
    images = path / "images"
    if not images.is_dir():
        raise FileNotFoundError(f"no images/ folder under {path}")
    dsms = D.find_dsm_files(path) if (path / "dsm").is_dir() else {}
    files = sorted(images.glob("*.png"))
    if not files:
        raise D.DataError(f"no PNG images under {images}")
    for f in files:
        dsm = D.read_dsm(dsms[f.stem], cfg.data.sentinel)[0] if f.stem in dsms else None
        yield f.stem, D.read_png(f), dsm


def cmd_predict(args, cfg: TrainConfig, out: Path):
    from .model import load_checkpoint
    from .plots import save_error_png, save_height_png
    from .train import predict

    path = Path(args.checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, ckpt_cfg, _ = load_checkpoint(path)
    src = Path(args.input)
    if not src.exists():
        raise FileNotFoundError(f"input not found: {src}")
    cfg = apply_overrides(ckpt_cfg, _parse_pairs(args.overrides))
    _snapshot(out, cfg)
    tile = args.tile or cfg.data.tile
    h_min, h_max = model.h_range
    (out / "dsm").mkdir(exist_ok=True)
    bins = {}
    for stem, image, gt in _predict_inputs(src, cfg):
        dummy = np.zeros(image.shape[:2], np.float32)
        scene = D.ScenePair(image.astype(np.float32), dummy, np.ones_like(dummy, bool), (h_min, h_max))
        result = predict(model, scene, tile, args.overlap)
        D.write_dsm(out / "dsm" / f"{stem}.f32", result.heights.astype(np.float32), 1.0, (h_min, h_max))
        save_height_png(out / f"{stem}_height.png", result.heights, h_min, h_max)
        if gt is not None:
            if gt.shape != result.heights.shape:
                raise D.DataError(f"{stem}: ground truth {gt.shape} and image {result.heights.shape} differ in shape")
            save_error_png(out / f"{stem}_error.png", result.heights - gt)
        bins[stem] = [np.round(b, 6).tolist() for b in result.bins]
        print(f"{stem}: {len(result.origins)} tiles")
    (out / "bins.json").write_text(json.dumps(bins, indent=1) + "\n")


def cmd_benchmark(args, cfg: TrainConfig, out: Path):
    from .model import HeightFormer, load_checkpoint
    from .train import benchmark

    if args.checkpoint:
        if not Path(args.checkpoint).is_file():
            raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
        model, cfg, _ = load_checkpoint(args.checkpoint)
    else:
        model = HeightFormer.from_config(cfg)
    if args.repetitions < 1:
        raise UsageError("--repetitions must be >= 1")
    if args.size % 32:
        raise UsageError("--size must be divisible by 32")
    _snapshot(out, cfg)
    report = benchmark(model, args.size, args.repetitions, args.warmup)
    (out / "benchmark.json").write_text(json.dumps(report, indent=2) + "\n")
    print(
        f"{args.size}x{args.size}: median {report['median_s'] * 1e3:.1f} ms, p95 {report['p95_s'] * 1e3:.1f} ms, "
        f"{report['fps']:.2f} FPS, {report['parameters']:,} parameters ({report['hardware']})"
    )


def cmd_ablate_bins(args, cfg: TrainConfig, out: Path):
    from .ablation import bimodal_config, format_table, run_bin_ablation
    from .plots import save_ablation_png

    try:
        ns = [int(v) for v in args.n.split(",") if v.strip()]
        seeds = [int(v) for v in args.seeds.split(",") if v.strip()] if args.seeds else None
    except ValueError:
        raise UsageError("--n and --seeds expect comma-separated integers") from None
    if not ns or min(ns) < 1:
        raise UsageError("--n needs at least one positive bin count")
    if not cfg.data.root:
        cfg = bimodal_config(cfg)
    _snapshot(out, cfg)
    rows = run_bin_ablation(cfg, ns, out, seeds=seeds)
    save_ablation_png(out / "ablation.png", rows)
    print(format_table(rows), end="")


COMMANDS = {
    "make-synthetic": cmd_make_synthetic,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "benchmark": cmd_benchmark,
    "ablate-bins": cmd_ablate_bins,
}


def main(argv=None) -> int:
    from .train import NumericError

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _resolve(args)
        COMMANDS[args.command](args, cfg, Path(args.out))
    except (UsageError, ConfigError) as exc:
        print(f"heightformer {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DataError, FileNotFoundError) as exc:
        print(f"heightformer {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"heightformer {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Memorize eight synthetic 256x256 tiles with the reduced N=8 model and report loss and Rel."""
import argparse
import time

import numpy as np
import torch

from heightformer.losses import offset_heights, silog_loss
from heightformer.presets import overfit_config
from heightformer.train import evaluate_tiles, load_scenes, predict_tiles, scenes_to_tiles, train

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--steps", type=int, default=200)
parser.add_argument("--lr", type=float, default=2e-3)
parser.add_argument("--batch-size", type=int, default=4)
parser.add_argument("--out", default="runs/overfit")
args = parser.parse_args()

cfg = overfit_config(args.steps, args.lr, args.batch_size)
scenes, _ = load_scenes(cfg)
tiles = scenes_to_tiles(scenes, cfg.data.tile)
t0 = time.perf_counter()
ckpt = train(cfg, args.out, tiles=tiles, val_tiles=[])
elapsed = time.perf_counter() - t0

pred = torch.tensor(np.stack(predict_tiles(ckpt.model, tiles)))
gt = torch.tensor(np.stack([t.dsm for t in tiles]), dtype=torch.float64)
final = silog_loss(offset_heights(pred, cfg.data.h_min, 1.0), offset_heights(gt, cfg.data.h_min, 1.0),
                   torch.ones_like(gt, dtype=torch.bool)).item()
report = evaluate_tiles(ckpt.model, tiles, cfg)
print(f"{len(tiles)} tiles, {ckpt.step} steps in {elapsed:.0f} s")
print(f"step-1 loss {ckpt.losses[0]:.4f}  last batch loss {ckpt.losses[-1]:.4f}  full-set loss {final:.4f} "
      f"({final / ckpt.losses[0]:.1%} of initial)")
print(report.to_table(), end="")

"""Full network, checkpoint archive and parameter accounting."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .config import DecoderConfig, EncoderConfig, TrainConfig, config_from_dict, config_to_dict
from .encoder import MultilevelEncoder
from .decoder import BinSet, HeightGenerator, HeightMap, ProbabilityVolume, height_regression

IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)


@dataclass
class Prediction:
    bins: BinSet
    prob: ProbabilityVolume
    heights: HeightMap


class HeightFormer(nn.Module):
    def __init__(self, encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig, height_range=(0.0, 1.0), seed: int = 0):
        super().__init__()
        if encoder_cfg.n_bins != decoder_cfg.n_bins:
            raise ValueError(f"encoder N ({encoder_cfg.n_bins}) != decoder N ({decoder_cfg.n_bins})")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.encoder = MultilevelEncoder(encoder_cfg)
        gen = torch.Generator().manual_seed(seed + 1)
        self.decoder = HeightGenerator(decoder_cfg, encoder_cfg.fused_channels, generator=gen)
        self.register_buffer("height_range", torch.tensor(height_range, dtype=torch.float64))
        self.register_buffer("image_mean", torch.tensor(IMAGE_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("image_std", torch.tensor(IMAGE_STD).view(1, 3, 1, 1), persistent=False)

    @property
    def h_range(self) -> tuple[float, float]:
        lo, hi = self.height_range.tolist()
        return lo, hi

    def forward(self, image: torch.Tensor) -> Prediction:
        """image: (B, 3, H, W) unit-scaled color."""
        x = (image - self.image_mean.to(image.dtype)) / self.image_std.to(image.dtype)
        bins, prob = self.decoder(self.encoder(x))
        h_min, h_max = self.h_range
        heights = height_regression(bins, prob, h_min, h_max, self.decoder.cfg.bin_mode)
        return Prediction(bins, prob, heights)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "HeightFormer":
        return cls(cfg.encoder, cfg.decoder, (cfg.data.h_min, cfg.data.h_max), seed=cfg.seed)


def count_parameters(model: nn.Module, depth: int = 2) -> tuple[int, OrderedDict]:
    """Trainable parameter total and a breakdown keyed by the first ``depth`` name components."""
    breakdown: OrderedDict[str, int] = OrderedDict()
    total = 0
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        key = ".".join(name.split(".")[:depth])
        breakdown[key] = breakdown.get(key, 0) + p.numel()
        total += p.numel()
    return total, breakdown


def save_checkpoint(path, model: HeightFormer, cfg: TrainConfig, optimizer=None, step: int = 0, history=None, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": "heightformer-ckpt-1",
        "model": model.state_dict(),
        "config": config_to_dict(cfg),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
        "history": list(history or []),
    }
    if extra:
        payload.update(extra)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path, map_location="cpu") -> tuple[HeightFormer, TrainConfig, dict]:
    payload = torch.load(path, map_location=map_location, weights_only=False)
    cfg = config_from_dict(payload["config"])
    model = HeightFormer.from_config(cfg)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, cfg, payload

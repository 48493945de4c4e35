"""Image-adaptive classification-regression height decoder.

A query branch predicts N per-image height values; a convolutional pyramid
predicts per-pixel N-way class logits; the height is the softmax-weighted
combination rescaled to the dataset range.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import DecoderConfig
from .encoder import MultiHeadAttention


@dataclass
class BinSet:
    logits: torch.Tensor  # (B, N)
    fixed: bool = False  # logits hold literal normalized values, not pre-softmax scores


@dataclass
class ProbabilityVolume:
    logits: torch.Tensor  # (B, N, H, W)
    levels: tuple[tuple[int, int, int], ...] = ()


@dataclass
class HeightMap:
    values: torch.Tensor  # (B, H, W) meters
    height_range: tuple[float, float]


def init_height_queries(n: int, d: int, generator: torch.Generator | None = None, std: float = 0.02) -> torch.Tensor:
    if n < 1 or d < 1:
        raise ValueError("query count and width must be >= 1")
    q = torch.empty(n, d)
    nn.init.trunc_normal_(q, std=std, a=-2 * std, b=2 * std, generator=generator)
    return q


def fixed_bin_values(n: int, spacing: str = "uniform", dtype=torch.float32) -> torch.Tensor:
    """Evenly (or log-) spaced normalized height values in [0, 1]."""
    if n == 1:
        return torch.ones(1, dtype=dtype)
    t = torch.linspace(0.0, 1.0, n, dtype=dtype)
    if spacing == "log":
        return torch.expm1(t * math.log(10.0)) / 9.0
    return t


def bin_values(logits: torch.Tensor, mode: str = "literal") -> torch.Tensor:
    """Normalized height value per bin from the bin logits (softmax over the last axis)."""
    h_hat = logits.softmax(dim=-1)
    if mode == "literal":
        return h_hat
    if mode == "bin-centers":
        edges = torch.cumsum(h_hat, dim=-1)
        return edges - 0.5 * h_hat
    raise ValueError(f"unknown bin mode {mode!r}")


def regress_normalized(values: torch.Tensor, prob_logits: torch.Tensor) -> torch.Tensor:
    """Sum over bins of value * per-pixel softmax probability.  values (B, N), logits (B, N, H, W)."""
    if values.shape[-1] != prob_logits.shape[1]:
        raise ValueError(f"bin count mismatch: {values.shape[-1]} values vs {prob_logits.shape[1]} classes")
    p_hat = prob_logits.softmax(dim=1)
    return torch.einsum("bn,bnhw->bhw", values, p_hat)


def height_regression(bins, prob, h_min: float, h_max: float, mode: str = "literal") -> HeightMap:
    """Heights in meters from bin logits and probability logits.

    ``bins`` / ``prob`` may be BinSet / ProbabilityVolume or raw tensors.
    """
    if h_max <= h_min:
        raise ValueError(f"degenerate height range: h_min={h_min}, h_max={h_max}")
    fixed = isinstance(bins, BinSet) and bins.fixed
    bins = bins.logits if isinstance(bins, BinSet) else bins
    prob = prob.logits if isinstance(prob, ProbabilityVolume) else prob
    values = bins if fixed else bin_values(bins, mode)
    result_hat = regress_normalized(values, prob)
    return HeightMap(h_min + (h_max - h_min) * result_hat, (h_min, h_max))


class ChannelNorm(nn.LayerNorm):
    """LayerNorm over the channel axis of a (B, C, H, W) map."""

    def forward(self, x):
        return super().forward(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class ConvBlock(nn.Module):
    """UpSample -> 3x3 conv -> ReLU -> 1x1 conv -> channel LayerNorm."""

    def __init__(self, cin: int, cout: int, hidden: int, upsample: int):
        super().__init__()
        self.cin, self.cout, self.upsample = cin, cout, upsample
        self.conv3 = nn.Conv2d(cin, hidden, 3, padding=1)
        self.conv1 = nn.Conv2d(hidden, cout, 1)
        self.norm = ChannelNorm(cout)

    def hidden(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.cin:
            raise ValueError(f"conv block expects {self.cin} channels, got {x.shape[1]}")
        if self.upsample > 1:
            x = F.interpolate(x, scale_factor=self.upsample, mode="bilinear", align_corners=False)
        return F.relu(self.conv3(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(self.conv1(self.hidden(x)))


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, hidden: int):
        super().__init__(nn.Linear(dim, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, dim))


class QueryTransformerBlock(nn.Module):
    """Cross-attention to embedded pyramid tokens, then self-attention, then feed-forward; post-norm residuals."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, feat_channels: int, token_cap: int):
        super().__init__()
        self.token_cap = token_cap
        self.embed = nn.Linear(feat_channels, dim)
        self.cross = MultiHeadAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim)
        self.norm3 = nn.LayerNorm(dim)

    def tokens(self, feat: torch.Tensor) -> torch.Tensor:
        h, w = feat.shape[-2:]
        if h * w > self.token_cap:
            side = math.isqrt(self.token_cap)
            feat = F.adaptive_avg_pool2d(feat, (min(h, side), min(w, side)))
        return self.embed(feat.flatten(2).transpose(1, 2))

    def forward(self, queries: torch.Tensor, feat: torch.Tensor) -> torch.Tensor:
        if feat.shape[1] != self.embed.in_features:
            raise ValueError(f"token width mismatch: expected {self.embed.in_features} channels, got {feat.shape[1]}")
        mem = self.tokens(feat)
        h = self.norm1(self.cross(queries, mem) + queries)
        h = self.norm2(self.self_attn(h) + h)
        return self.norm3(self.ffn(h) + h)


class HeightGenerator(nn.Module):
    def __init__(self, cfg: DecoderConfig, in_channels: int, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3 = cfg.level_channels
        self.in_channels = in_channels
        self.conv_blocks = nn.ModuleList(
            [
                ConvBlock(in_channels, c1, cfg.conv_hidden, 1),
                ConvBlock(c1, c2, cfg.conv_hidden, 4),
                ConvBlock(c2, c3, cfg.conv_hidden, 4),
            ]
        )
        self.transformer_blocks = nn.ModuleList(
            [QueryTransformerBlock(cfg.query_dim, cfg.query_heads, cfg.ffn_dim, c, cfg.token_cap) for c in (c1, c2, c3)]
        )
        self.queries = nn.Parameter(init_height_queries(cfg.n_bins, cfg.query_dim, generator))
        self.bin_head = nn.Linear(cfg.query_dim, 1)
        self.register_buffer("fixed_values", fixed_bin_values(cfg.n_bins, cfg.fixed_spacing), persistent=False)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02, generator=generator)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu", generator=generator)
                nn.init.zeros_(m.bias)

    def forward(self, y: torch.Tensor) -> tuple[BinSet, ProbabilityVolume]:
        if y.ndim != 4 or y.shape[1] != self.in_channels:
            raise ValueError(f"decoder expects (B, {self.in_channels}, h, w), got {tuple(y.shape)}")
        B = y.shape[0]
        fixed = self.cfg.fixed_bins
        q = None if fixed else self.queries.unsqueeze(0).expand(B, -1, -1)
        p = y
        levels = []
        for conv, block in zip(self.conv_blocks, self.transformer_blocks):
            p = conv(p)
            levels.append(tuple(p.shape[1:]))
            if not fixed:
                q = block(q, p)
        if fixed:
            bins = BinSet(self.fixed_values.to(p.dtype).expand(B, -1), fixed=True)
        else:
            bins = BinSet(self.bin_head(q).squeeze(-1))
        return bins, ProbabilityVolume(p, tuple(levels))

"""Multilevel interaction encoder: convolutional pixel branch, shifted-window patch
branch and channel-attention coupling of the two."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig

VALID_STRIDES = (1, 2, 4, 8, 16, 32)


@dataclass
class FeatureMap:
    data: torch.Tensor  # (B, C, h, w)
    stride: int

    def __post_init__(self):
        if self.data.ndim != 4 or min(self.data.shape[1:]) < 1:
            raise ValueError(f"feature map must be (B, C, h, w) with positive sizes, got {tuple(self.data.shape)}")
        if self.stride not in VALID_STRIDES:
            raise ValueError(f"stride {self.stride} not in {VALID_STRIDES}")

    @property
    def channels(self) -> int:
        return self.data.shape[1]


def attention_cost(h: int, w: int, C: int, M: int) -> tuple[int, int]:
    """Operation counts of global multi-head attention and windowed attention."""
    msa = 4 * h * w * C**2 + 2 * (h * w) ** 2 * C
    fsa = 4 * h * w * C**2 + 2 * M**2 * h * w * C
    return msa, fsa


def window_shift(x: torch.Tensor, offset: int | tuple[int, int], inverse: bool = False) -> torch.Tensor:
    """Cyclic roll of a channels-last map (B, h, w, C) so that entry (0, 0) holds former ``offset``."""
    oy, ox = (offset, offset) if isinstance(offset, int) else offset
    if inverse:
        return torch.roll(x, shifts=(oy, ox), dims=(1, 2))
    return torch.roll(x, shifts=(-oy, -ox), dims=(1, 2))


def window_partition(x: torch.Tensor, M: int) -> torch.Tensor:
    B, H, W, C = x.shape
    x = x.view(B, H // M, M, W // M, M, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, M * M, C)


def window_merge(windows: torch.Tensor, M: int, H: int, W: int) -> torch.Tensor:
    C = windows.shape[-1]
    x = windows.view(-1, H // M, W // M, M, M, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, H, W, C)


def _region_labels(Hp: int, Wp: int, H: int, W: int, M: int, shift: int, device) -> torch.Tensor:
    """Integer label per padded cell; attention is allowed only between equal labels."""
    labels = torch.zeros(Hp, Wp, dtype=torch.long, device=device)
    if shift > 0:
        cuts = (slice(0, -M), slice(-M, -shift), slice(-shift, None))
        k = 0
        for hs in cuts:
            for ws in cuts:
                labels[hs, ws] = k
                k += 1
    pad = torch.zeros(Hp, Wp, dtype=torch.long, device=device)
    pad[H:, :] = 1
    pad[:, W:] = 1
    return labels * 2 + pad


class MultiHeadAttention(nn.Module):
    """Plain multi-head attention over token sets, with an optional boolean block mask."""

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"heads ({heads}) must divide channel count ({dim})")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(kv_dim or dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None, allowed: torch.Tensor | None = None):
        context = x if context is None else context
        B, Nq, C = x.shape
        Nk = context.shape[1]
        h = self.heads
        q = self.q(x).view(B, Nq, h, C // h).transpose(1, 2)
        k, v = self.kv(context).view(B, Nk, 2, h, C // h).permute(2, 0, 3, 1, 4)
        logits = (q * self.scale) @ k.transpose(-2, -1)
        if allowed is not None:
            logits = logits.masked_fill(~allowed.unsqueeze(1), float("-inf"))
        attn = logits.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, Nq, C)
        return self.proj(out)


class FenestralSelfAttention(nn.Module):
    """Multi-head self-attention restricted to non-overlapping M x M windows."""

    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        self.window = window
        self.attn = MultiHeadAttention(dim, heads)

    def forward(self, x: torch.Tensor, shift: int = 0) -> torch.Tensor:
        """x: (B, h, w, C) channels-last."""
        B, H, W, C = x.shape
        M = self.window
        if H <= M and W <= M:
            M, shift = max(H, W), 0
        pad_h, pad_w = (-H) % M, (-W) % M
        if pad_h or pad_w:
            x = F.pad(x, (0, 0, 0, pad_w, 0, pad_h))
        Hp, Wp = H + pad_h, W + pad_w
        labels = _region_labels(Hp, Wp, H, W, M, shift, x.device)
        if shift:
            x = window_shift(x, shift)
            labels = window_shift(labels[None, ..., None], shift)[0, ..., 0]
        windows = window_partition(x, M)
        allowed = None
        if shift or pad_h or pad_w:
            lw = window_partition(labels[None, ..., None], M)[..., 0]  # (nW, M*M)
            allowed = lw[:, :, None] == lw[:, None, :]
            allowed = allowed.repeat(B, 1, 1)
        out = window_merge(self.attn(windows, allowed=allowed), M, Hp, Wp)
        if shift:
            out = window_shift(out, shift, inverse=True)
        return out[:, :H, :W, :].contiguous()


class Mlp(nn.Sequential):
    def __init__(self, dim: int, hidden: int):
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class SwinBlockPair(nn.Module):
    """Regular-window block followed by a shifted-window block.

    z_hat1 = FSA(LN(z0)) + z0;          z1 = MLP(LN(z_hat1)) + z_hat1
    z_hat2 = FSA(WS(LN(z1))) + z1;      z2 = MLP(LN(z_hat2)) + z_hat2
    """

    def __init__(self, dim: int, heads: int, window: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.window = window
        self.norm1 = nn.LayerNorm(dim)
        self.attn1 = FenestralSelfAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp1 = Mlp(dim, hidden)
        self.norm3 = nn.LayerNorm(dim)
        self.attn2 = FenestralSelfAttention(dim, heads, window)
        self.norm4 = nn.LayerNorm(dim)
        self.mlp2 = Mlp(dim, hidden)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        z_hat = self.attn1(self.norm1(z)) + z
        z = self.mlp1(self.norm2(z_hat)) + z_hat
        z_hat = self.attn2(self.norm3(z), shift=self.window // 2) + z
        return self.mlp2(self.norm4(z_hat)) + z_hat


class PatchMerging(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x0 = x[:, 0::2, 0::2]
        x1 = x[:, 1::2, 0::2]
        x2 = x[:, 0::2, 1::2]
        x3 = x[:, 1::2, 1::2]
        return self.reduction(self.norm(torch.cat([x0, x1, x2, x3], dim=-1)))


def _check_input(image: torch.Tensor):
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"expected a (B, 3, H, W) image batch, got {tuple(image.shape)}")
    H, W = image.shape[-2:]
    if H % 32 or W % 32:
        raise ValueError(f"input size {H}x{W} is not divisible by 32")


class PatchBackbone(nn.Module):
    """Four-stage shifted-window transformer (strides 4/8/16/32); the stride-16 stage is projected out."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        dim = cfg.embed_dim
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=4, stride=4)
        self.embed_norm = nn.LayerNorm(dim)
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for i, (depth, heads) in enumerate(zip(cfg.depths, cfg.heads)):
            width = dim * 2**i
            self.stages.append(
                nn.Sequential(*[SwinBlockPair(width, heads, cfg.window, cfg.mlp_ratio) for _ in range(depth // 2)])
            )
            if i < 3:
                self.merges.append(PatchMerging(width))
        self.out_norm = nn.LayerNorm(dim * 4)
        self.proj = nn.Conv2d(dim * 4, cfg.branch_channels, kernel_size=1)

    def pyramid(self, image: torch.Tensor) -> list[torch.Tensor]:
        """Channels-last outputs of all four stages."""
        _check_input(image)
        x = self.embed_norm(self.patch_embed(image).permute(0, 2, 3, 1))
        outs = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            outs.append(x)
            if i < 3:
                x = self.merges[i](x)
        return outs

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        _check_input(image)
        x = self.embed_norm(self.patch_embed(image).permute(0, 2, 3, 1))
        for i in range(3):
            x = self.stages[i](x)
            if i < 2:
                x = self.merges[i](x)
        # the stride-32 stage is part of the backbone but does not feed the output
        x = self.out_norm(x).permute(0, 3, 1, 2)
        return self.proj(x)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class PixelBackbone(nn.Module):
    """ResNet18 trunk cut at stride 16, then a 1x1 projection."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        w1, w2, w3 = cfg.conv_widths
        self.stem = nn.Sequential(
            nn.Conv2d(3, w1, 7, 2, 3, bias=False),
            nn.BatchNorm2d(w1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1),
        )
        layers = []
        cin = w1
        for width, blocks, stride in zip((w1, w2, w3), cfg.conv_blocks, (1, 2, 2)):
            for b in range(blocks):
                layers.append(BasicBlock(cin, width, stride if b == 0 else 1))
                cin = width
        self.layers = nn.Sequential(*layers)
        self.proj = nn.Conv2d(w3, cfg.branch_channels, kernel_size=1)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        _check_input(image)
        return self.proj(self.layers(self.stem(image)))


class FeatureCoupling(nn.Module):
    """Channel attention over the concatenated branches.

    Shared MLP on average- and max-pooled descriptors, softmax (or sigmoid) over
    channels, broadcast product with the stacked input.
    """

    def __init__(self, channels: int, reduction: int = 128, gate: str = "softmax"):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.mlp = nn.Sequential(nn.Linear(channels, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, channels))
        self.gate = gate

    def weights(self, x: torch.Tensor) -> torch.Tensor:
        avg = x.mean(dim=(2, 3))
        mx = x.amax(dim=(2, 3))
        s = self.mlp(avg) + self.mlp(mx)
        return s.softmax(dim=1) if self.gate == "softmax" else torch.sigmoid(s)

    def forward(self, x_conv: torch.Tensor, x_attn: torch.Tensor) -> torch.Tensor:
        if x_conv.shape != x_attn.shape:
            raise ValueError(f"branch shapes differ: {tuple(x_conv.shape)} vs {tuple(x_attn.shape)}")
        x = torch.cat([x_conv, x_attn], dim=1)
        if x.shape[1] != self.mlp[0].in_features:
            raise ValueError(f"expected {self.mlp[0].in_features} stacked channels, got {x.shape[1]}")
        return self.weights(x)[:, :, None, None] * x


class MultilevelEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.pixel = PixelBackbone(cfg)
        self.patch = PatchBackbone(cfg)
        self.coupling = FeatureCoupling(cfg.fused_channels, cfg.coupling_reduction, cfg.coupling_gate)
        init_encoder_weights(self)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.coupling(self.pixel(image), self.patch(image))

    def features(self, image: torch.Tensor) -> FeatureMap:
        return FeatureMap(self(image), stride=16)


def init_encoder_weights(module: nn.Module):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.LayerNorm, nn.BatchNorm2d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

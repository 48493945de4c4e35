"""Dataclass configs and the flat ``section.key = value`` config file format."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class AugmentConfig:
    crop_size: int = 448
    rotate_prob: float = 0.5
    rotate_degrees: float = 2.5
    photo_prob: float = 0.5
    gamma_range: tuple[float, float] = (0.9, 1.1)
    brightness_range: tuple[float, float] = (0.75, 1.25)
    color_range: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        for name in ("rotate_prob", "photo_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"augment.{name} must lie in [0, 1], got {p}")
        for name in ("gamma_range", "brightness_range", "color_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"augment.{name} has lo > hi: {(lo, hi)}")
        if self.crop_size < 1:
            raise ConfigError("augment.crop_size must be positive")

    @classmethod
    def identity(cls, crop_size: int) -> "AugmentConfig":
        """Crop-only augmentation (no rotation, no photometrics)."""
        return cls(crop_size=crop_size, rotate_prob=0.0, photo_prob=0.0)


@dataclass
class EncoderConfig:
    n_bins: int = 64
    # per-branch output channels = channel_multiplier * n_bins
    channel_multiplier: int = 128
    conv_widths: tuple[int, int, int] = (64, 128, 256)
    conv_blocks: tuple[int, int, int] = (2, 2, 2)
    embed_dim: int = 96
    depths: tuple[int, ...] = (2, 2, 6, 2)
    heads: tuple[int, ...] = (3, 6, 12, 24)
    window: int = 7
    mlp_ratio: float = 4.0
    coupling_reduction: int = 128
    coupling_gate: str = "softmax"

    def __post_init__(self):
        if self.n_bins < 1 or self.channel_multiplier < 1:
            raise ConfigError("encoder.n_bins and encoder.channel_multiplier must be positive")
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ConfigError("encoder.depths and encoder.heads need four stages")
        if any(d < 2 or d % 2 for d in self.depths):
            raise ConfigError("encoder.depths must be even (blocks come in regular/shifted pairs)")
        for i, h in enumerate(self.heads):
            if (self.embed_dim * 2**i) % h:
                raise ConfigError(f"encoder.heads[{i}]={h} does not divide stage width {self.embed_dim * 2**i}")
        if self.window < 1:
            raise ConfigError("encoder.window must be >= 1")
        if self.coupling_gate not in ("softmax", "sigmoid"):
            raise ConfigError(f"encoder.coupling_gate must be softmax or sigmoid, got {self.coupling_gate!r}")

    @property
    def branch_channels(self) -> int:
        return self.channel_multiplier * self.n_bins

    @property
    def fused_channels(self) -> int:
        return 2 * self.branch_channels


@dataclass
class DecoderConfig:
    n_bins: int = 64
    query_dim: int = 128
    query_heads: int = 4
    ffn_dim: int = 512
    conv_hidden: int = 64
    token_cap: int = 576
    bin_mode: str = "literal"
    fixed_bins: bool = False
    fixed_spacing: str = "uniform"

    def __post_init__(self):
        if self.n_bins < 1:
            raise ConfigError("decoder.n_bins must be >= 1")
        if self.query_dim % self.query_heads:
            raise ConfigError("decoder.query_heads must divide decoder.query_dim")
        if self.bin_mode not in ("literal", "bin-centers"):
            raise ConfigError(f"decoder.bin_mode must be literal or bin-centers, got {self.bin_mode!r}")
        if self.fixed_spacing not in ("uniform", "log"):
            raise ConfigError(f"decoder.fixed_spacing must be uniform or log, got {self.fixed_spacing!r}")
        if self.token_cap < 1:
            raise ConfigError("decoder.token_cap must be >= 1")

    @property
    def level_channels(self) -> tuple[int, int, int]:
        n = self.n_bins
        return (16 * n, 4 * n, n)


@dataclass
class LossConfig:
    alpha: float = 10.0
    lam: float = 0.85
    offset_m: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError("loss.alpha must be > 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("loss.lam must lie in [0, 1]")


@dataclass
class SynthSpec:
    size: tuple[int, int] = (512, 512)
    ground_height: float = 0.0
    height_range: tuple[float, float] = (0.0, 40.0)
    n_buildings: int = 12
    building_height: tuple[float, float] = (4.0, 25.0)
    building_size: tuple[int, int] = (16, 64)
    n_trees: int = 20
    tree_height: tuple[float, float] = (3.0, 12.0)
    tree_radius: tuple[int, int] = (4, 12)
    road_fraction: float = 0.1
    # every building in a scene shares one roof height (per-scene bimodal histogram)
    shared_roof: bool = False
    resolution: float = 0.09
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.height_range
        if hi <= lo:
            raise ConfigError(f"synth height_range is degenerate: {self.height_range}")
        if self.n_buildings < 0 or self.n_trees < 0:
            raise ConfigError("synth counts must be >= 0")
        if not lo <= self.ground_height <= hi:
            raise ConfigError("synth ground_height lies outside height_range")
        for name in ("building_height", "tree_height"):
            a, b = getattr(self, name)
            if a < 0 or a > b:
                raise ConfigError(f"synth {name} must satisfy 0 <= lo <= hi, got {(a, b)}")
            if self.ground_height + b > hi:
                raise ConfigError(f"synth {name} upper end exceeds height_range")
        for name in ("building_size", "tree_radius"):
            a, b = getattr(self, name)
            if a < 1 or a > b:
                raise ConfigError(f"synth {name} must satisfy 1 <= lo <= hi, got {(a, b)}")
        if not 0.0 <= self.road_fraction < 1.0:
            raise ConfigError("synth road_fraction must lie in [0, 1)")


@dataclass
class DataConfig:
    root: str = ""
    tile: int = 512
    h_min: float = 0.0
    h_max: float = 40.0
    sentinel: float = -9999.0
    train_stems: tuple[str, ...] = ()
    val_stems: tuple[str, ...] = ()
    # synthetic fallback when root is empty
    synthetic: bool = True
    synth_scenes: int = 4
    synth_val_scenes: int = 1
    synth_size: int = 1024
    synth_shared_roof: bool = False
    synth_trees: bool = True
    synth_resolution: float = 0.09
    synth_seed: int = 0
    max_tiles: int = 0

    def __post_init__(self):
        if self.h_max <= self.h_min:
            raise ConfigError(f"data.h_max must exceed data.h_min, got {(self.h_min, self.h_max)}")
        if self.tile < 1:
            raise ConfigError("data.tile must be positive")
        if self.synth_resolution <= 0:
            raise ConfigError("data.synth_resolution must be positive")


@dataclass
class TrainConfig:
    epochs: int = 24
    batch_size: int = 2
    lr: float = 1e-5
    warmup_frac: float = 0.125
    weight_decay: float = 0.01
    grad_clip: float = 10.0
    max_steps: int = 0
    seed: int = 0
    device: str = "cpu"
    workers: int = 0
    threads: int = 0
    log_every: int = 1
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ConfigError("train.warmup_frac must lie in (0, 1)")
        if self.lr <= 0:
            raise ConfigError("train.lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.encoder.n_bins != self.decoder.n_bins:
            raise ConfigError(
                f"encoder.n_bins ({self.encoder.n_bins}) != decoder.n_bins ({self.decoder.n_bins})"
            )
        if self.augment.crop_size > self.data.tile:
            raise ConfigError("augment.crop_size exceeds data.tile")


SECTIONS = {
    "train": None,
    "encoder": "encoder",
    "decoder": "decoder",
    "loss": "loss",
    "augment": "augment",
    "data": "data",
}


def _parse_value(raw: str, tp):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        items = [s.strip() for s in raw.split(",") if s.strip()]
        elem = args[0]
        return tuple(_parse_value(s, elem) for s in items)
    if tp is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    return raw


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _flat_fields(cfg: TrainConfig):
    hints = typing.get_type_hints(TrainConfig)
    for f in dataclasses.fields(TrainConfig):
        if dataclasses.is_dataclass(hints[f.name]):
            sub = getattr(cfg, f.name)
            sub_hints = typing.get_type_hints(type(sub))
            for g in dataclasses.fields(sub):
                yield f"{f.name}.{g.name}", sub, g.name, sub_hints[g.name]
        else:
            yield f"train.{f.name}", cfg, f.name, hints[f.name]


def apply_overrides(cfg: TrainConfig, pairs: dict[str, str]) -> TrainConfig:
    """Return a new config with ``section.key -> raw string`` overrides applied.

    Unknown keys raise ConfigError naming the offending key. ``n_bins`` may be
    given without a section to set encoder and decoder together.
    """
    pairs = dict(pairs)
    if "n_bins" in pairs:
        n = pairs.pop("n_bins")
        pairs.setdefault("encoder.n_bins", n)
        pairs.setdefault("decoder.n_bins", n)
    table = {key: (tp, obj, name) for key, obj, name, tp in _flat_fields(cfg)}
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    for key, raw in pairs.items():
        if key not in table:
            raise ConfigError(f"unknown config key: {key}")
        tp, _, name = table[key]
        try:
            value = _parse_value(raw, tp)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
        values[key.split(".", 1)[0]][name] = value

    subs = {}
    for section, attr in SECTIONS.items():
        if attr is None:
            continue
        subs[attr] = dataclasses.replace(getattr(cfg, attr), **values[section])
    return dataclasses.replace(cfg, **values["train"], **subs)


def read_config_text(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> TrainConfig:
    pairs = read_config_text(Path(path).read_text()) if path else {}
    pairs.update(overrides or {})
    return apply_overrides(TrainConfig(), pairs)


def dump_config(cfg: TrainConfig) -> str:
    lines = [f"{key} = {_format_value(getattr(obj, name))}" for key, obj, name, _ in _flat_fields(cfg)]
    return "\n".join(lines) + "\n"


def config_to_dict(cfg: TrainConfig) -> dict:
    return {key: getattr(obj, name) for key, obj, name, _ in _flat_fields(cfg)}


def config_from_dict(d: dict) -> TrainConfig:
    return apply_overrides(TrainConfig(), {k: _format_value(tuple(v) if isinstance(v, list) else v) for k, v in d.items()})

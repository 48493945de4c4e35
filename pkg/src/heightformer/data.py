"""Ortho-image / DSM pairs: normalization, tiling, augmentation, synthesis and file IO."""
from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import AugmentConfig, SynthSpec

logger = logging.getLogger(__name__)

DEFAULT_SENTINEL = -9999.0


class DataError(ValueError):
    pass


@dataclass
class ScenePair:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    dsm: np.ndarray  # (H, W) float32 meters; invalid pixels are NaN
    valid_mask: np.ndarray  # (H, W) bool
    height_range: tuple[float, float]
    pixel_resolution: float = 1.0

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"image must be H x W x 3, got {self.image.shape}")
        if self.image.shape[:2] != self.dsm.shape or self.dsm.shape != self.valid_mask.shape:
            raise DataError(
                f"image {self.image.shape[:2]}, dsm {self.dsm.shape} and mask {self.valid_mask.shape} disagree"
            )
        self.valid_mask = self.valid_mask & np.isfinite(self.dsm)
        h_min, h_max = self.height_range
        if h_max <= h_min:
            raise DataError(f"degenerate height range {self.height_range}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.dsm.shape

    def check_range(self, atol: float = 1e-4):
        vals = self.dsm[self.valid_mask]
        if vals.size and (vals.min() < self.height_range[0] - atol or vals.max() > self.height_range[1] + atol):
            raise DataError(
                f"dsm values [{vals.min()}, {vals.max()}] fall outside height range {self.height_range}"
            )


@dataclass
class TilePair(ScenePair):
    origin: tuple[int, int] = (0, 0)


def normalize_heights(dsm, h_min: float, h_max: float):
    if h_max <= h_min:
        raise DataError(f"degenerate height range: h_min={h_min}, h_max={h_max}")
    return (dsm - h_min) / (h_max - h_min)


def rescale_heights(unit, h_min: float, h_max: float):
    """Inverse of :func:`normalize_heights`."""
    if h_max <= h_min:
        raise DataError(f"degenerate height range: h_min={h_min}, h_max={h_max}")
    return h_min + (h_max - h_min) * unit


def grid_origins(length: int, tile: int, stride: int | None = None) -> list[int]:
    """Tile origins along one axis; the last tile is shifted inward to end at ``length``."""
    stride = stride or tile
    if length < tile:
        raise DataError(f"extent {length} is smaller than tile {tile}")
    count = math.ceil((length - tile) / stride) + 1
    return [min(i * stride, length - tile) for i in range(count)]


def _sub(scene: ScenePair, r: int, c: int, h: int, w: int) -> TilePair:
    origin = getattr(scene, "origin", (0, 0))
    return TilePair(
        image=scene.image[r:r + h, c:c + w],
        dsm=scene.dsm[r:r + h, c:c + w],
        valid_mask=scene.valid_mask[r:r + h, c:c + w],
        height_range=scene.height_range,
        pixel_resolution=scene.pixel_resolution,
        origin=(origin[0] + r, origin[1] + c),
    )


def crop_grid(scene: ScenePair, tile: int) -> list[TilePair]:
    H, W = scene.shape
    if H < tile or W < tile:
        raise DataError(f"scene {H}x{W} is smaller than tile {tile}; pad it first")
    return [_sub(scene, r, c, tile, tile) for r in grid_origins(H, tile) for c in grid_origins(W, tile)]


# -- augmentation ------------------------------------------------------------

def crop_pair(pair: ScenePair, row: int, col: int, size: int) -> TilePair:
    H, W = pair.shape
    if size > H or size > W:
        raise DataError(f"crop size {size} exceeds tile {H}x{W}")
    if not (0 <= row <= H - size and 0 <= col <= W - size):
        raise DataError(f"crop origin {(row, col)} out of bounds")
    return _sub(pair, row, col, size, size)


def _rotation_coords(shape, degrees: float):
    H, W = shape
    theta = math.radians(degrees)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    rr, cc = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = rr - cy, cc - cx
    # inverse map: output pixel -> source coordinate (counter-clockwise rotation of content)
    cos, sin = math.cos(theta), math.sin(theta)
    src_r = cy + cos * dy - sin * dx
    src_c = cx + sin * dy + cos * dx
    return np.stack([src_r, src_c])


def rotate_pair(pair: ScenePair, degrees: float) -> TilePair:
    """Rotate image, dsm and mask about the tile center with bilinear resampling.

    Pixels whose source falls outside the frame, or whose bilinear support touches
    an invalid dsm pixel, come out masked.
    """
    coords = _rotation_coords(pair.shape, degrees)
    H, W = pair.shape
    inside = (coords[0] >= 0) & (coords[0] <= H - 1) & (coords[1] >= 0) & (coords[1] <= W - 1)

    def warp(a, cval=0.0):
        return ndimage.map_coordinates(a, coords, order=1, mode="constant", cval=cval)

    image = np.stack([warp(pair.image[..., k]) for k in range(3)], axis=-1).astype(np.float32)
    valid = pair.valid_mask.astype(np.float64)
    dsm_filled = np.where(pair.valid_mask, pair.dsm, 0.0).astype(np.float64)
    dsm = warp(dsm_filled).astype(np.float32)
    support = warp(valid)
    mask = inside & (support > 1.0 - 1e-6)
    dsm = np.where(mask, dsm, np.nan).astype(np.float32)
    return TilePair(
        image=np.clip(image, 0.0, 1.0),
        dsm=dsm,
        valid_mask=mask,
        height_range=pair.height_range,
        pixel_resolution=pair.pixel_resolution,
        origin=getattr(pair, "origin", (0, 0)),
    )


def photometric(image: np.ndarray, gamma: float = 1.0, brightness: float = 1.0, color=(1.0, 1.0, 1.0)) -> np.ndarray:
    if gamma == 1.0 and brightness == 1.0 and all(c == 1.0 for c in color):
        return image
    out = np.power(np.clip(image, 0.0, 1.0), gamma) * brightness
    out = out * np.asarray(color, dtype=np.float32)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment(pair: ScenePair, rng: np.random.Generator, cfg: AugmentConfig) -> TilePair:
    H, W = pair.shape
    size = cfg.crop_size
    if size > H or size > W:
        raise DataError(f"crop size {size} exceeds tile {H}x{W}")
    if cfg.rotate_prob > 0 and rng.random() < cfg.rotate_prob:
        pair = rotate_pair(pair, rng.uniform(-cfg.rotate_degrees, cfg.rotate_degrees))
    out = crop_pair(pair, int(rng.integers(0, H - size + 1)), int(rng.integers(0, W - size + 1)), size)
    gamma, brightness, color = 1.0, 1.0, (1.0, 1.0, 1.0)
    if cfg.photo_prob > 0 and rng.random() < cfg.photo_prob:
        gamma = rng.uniform(*cfg.gamma_range)
        brightness = rng.uniform(*cfg.brightness_range)
    if cfg.photo_prob > 0 and rng.random() < cfg.photo_prob:
        color = tuple(rng.uniform(*cfg.color_range, size=3))
    return dataclasses.replace(out, image=photometric(out.image, gamma, brightness, color))


# -- synthetic scenes --------------------------------------------------------

def _smooth_noise(rng, shape, sigma):
    return ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")


def synth_scene(spec: SynthSpec, rng: np.random.Generator | None = None) -> ScenePair:
    """Ground plane + box buildings + blob canopies, rendered with height-correlated shading.

    Deterministic in ``spec.seed`` when ``rng`` is omitted.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    H, W = spec.size
    ground = spec.ground_height
    h_min, h_max = spec.height_range
    span = h_max - h_min

    dsm = np.full((H, W), ground, dtype=np.float64)
    cls = np.zeros((H, W), dtype=np.int8)  # 0 ground, 1 road, 2 building, 3 tree

    if spec.road_fraction > 0:
        n_roads = max(1, int(round(spec.road_fraction * (H + W) / 40)))
        for _ in range(n_roads):
            width = int(rng.integers(6, 14))
            if rng.random() < 0.5:
                r = int(rng.integers(0, max(1, H - width)))
                cls[r:r + width, :] = 1
            else:
                c = int(rng.integers(0, max(1, W - width)))
                cls[:, c:c + width] = 1

    roof = rng.uniform(*spec.building_height)
    for _ in range(spec.n_buildings):
        bh, bw = rng.integers(spec.building_size[0], spec.building_size[1] + 1, size=2)
        r = int(rng.integers(0, max(1, H - bh + 1)))
        c = int(rng.integers(0, max(1, W - bw + 1)))
        height = roof if spec.shared_roof else rng.uniform(*spec.building_height)
        dsm[r:r + bh, c:c + bw] = np.maximum(dsm[r:r + bh, c:c + bw], ground + height)
        cls[r:r + bh, c:c + bw] = 2

    if spec.n_trees:
        rr, cc = np.mgrid[0:H, 0:W]
        for _ in range(spec.n_trees):
            radius = rng.uniform(*spec.tree_radius)
            cy, cx = rng.uniform(0, H), rng.uniform(0, W)
            height = rng.uniform(*spec.tree_height)
            d2 = ((rr - cy) ** 2 + (cc - cx) ** 2) / radius**2
            canopy = ground + height * np.clip(1.0 - d2, 0.0, None) ** 0.5
            grow = canopy > dsm
            dsm = np.where(grow, canopy, dsm)
            cls = np.where(grow & (d2 < 1.0), 3, cls)

    # texture and shading
    tex = _smooth_noise(rng, (H, W), 1.5)
    tex = tex / (np.abs(tex).max() + 1e-12)
    rel = (dsm - h_min) / span
    base = np.array(
        [
            [0.55, 0.50, 0.40],  # bare ground
            [0.30, 0.30, 0.32],  # road
            [0.70, 0.35, 0.30],  # roof
            [0.20, 0.55, 0.20],  # canopy
        ]
    )
    image = base[cls].copy()
    shade = 0.55 + 0.9 * (rel - (ground - h_min) / span)
    image = image * shade[..., None] + 0.05 * tex[..., None]
    # lit edges make box boundaries visible
    gy, gx = np.gradient(dsm)
    image += 0.02 * np.clip(gx + gy, -5, 5)[..., None]
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    dsm = np.clip(dsm, h_min, h_max).astype(np.float32)
    scene = ScenePair(
        image=image,
        dsm=dsm,
        valid_mask=np.ones((H, W), dtype=bool),
        height_range=(float(h_min), float(h_max)),
        pixel_resolution=spec.resolution,
    )
    scene.check_range()
    return scene


# -- file IO -----------------------------------------------------------------

def write_png(path, image: np.ndarray):
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    return arr


def write_dsm(path, dsm: np.ndarray, resolution: float, height_range: tuple[float, float], sentinel: float = DEFAULT_SENTINEL):
    """Write ``<stem>.f32`` (row-major little-endian float32) plus ``<stem>.hdr``."""
    path = Path(path)
    data = np.where(np.isfinite(dsm), dsm, sentinel).astype("<f4")
    data.tofile(path.with_suffix(".f32"))
    rows, cols = dsm.shape
    path.with_suffix(".hdr").write_text(
        f"{rows} {cols} {resolution!r} {float(height_range[0])!r} {float(height_range[1])!r}\n"
    )


def read_dsm(path, sentinel: float = DEFAULT_SENTINEL) -> tuple[np.ndarray, dict]:
    """Read a DSM from ``.f32`` + ``.hdr`` or a single-band TIFF.

    Returns the raster with sentinel/non-finite pixels set to NaN, and a header
    dict (rows, cols, resolution, h_min, h_max; missing fields are None).
    """
    path = Path(path)
    if path.suffix.lower() in (".tif", ".tiff"):
        import tifffile

        try:
            data = np.asarray(tifffile.imread(path), dtype=np.float32)
        except Exception as exc:
            raise DataError(f"cannot read dsm {path}: {exc}") from None
        if data.ndim == 3 and 1 in (data.shape[0], data.shape[-1]):
            data = data.reshape(data.shape[0] if data.shape[0] != 1 else data.shape[1], -1)
        if data.ndim != 2:
            raise DataError(f"{path}: expected a single-band raster, got shape {data.shape}")
        header = {"rows": data.shape[0], "cols": data.shape[1], "resolution": None, "h_min": None, "h_max": None}
    else:
        hdr = path.with_suffix(".hdr")
        try:
            fields = hdr.read_text().split()
            rows, cols = int(fields[0]), int(fields[1])
            resolution, h_min, h_max = (float(v) for v in fields[2:5])
        except (OSError, ValueError, IndexError) as exc:
            raise DataError(f"cannot read dsm header {hdr}: {exc}") from None
        try:
            data = np.fromfile(path.with_suffix(".f32"), dtype="<f4")
        except OSError as exc:
            raise DataError(f"cannot read dsm {path}: {exc}") from None
        if data.size != rows * cols:
            raise DataError(f"{path}: header says {rows}x{cols} but file holds {data.size} values")
        data = data.reshape(rows, cols).astype(np.float32)
        header = {"rows": rows, "cols": cols, "resolution": resolution, "h_min": h_min, "h_max": h_max}
    data = np.where(np.isfinite(data) & (data != sentinel), data, np.nan).astype(np.float32)
    return data, header


def write_tiff_dsm(path, dsm: np.ndarray, sentinel: float = DEFAULT_SENTINEL):
    import tifffile

    tifffile.imwrite(path, np.where(np.isfinite(dsm), dsm, sentinel).astype(np.float32))


def load_tile_pair(image_path, dsm_path, sentinel: float = DEFAULT_SENTINEL, height_range=None) -> TilePair:
    image_path, dsm_path = Path(image_path), Path(dsm_path)
    for p in (image_path, dsm_path):
        if not p.exists() and not p.with_suffix(".f32").exists():
            raise DataError(f"missing file: {p}")
    image = read_png(image_path)
    dsm, header = read_dsm(dsm_path, sentinel)
    if image.shape[:2] != dsm.shape:
        raise DataError(f"dimension mismatch: image {image.shape[:2]} vs dsm {dsm.shape} ({image_path.stem})")
    mask = np.isfinite(dsm)
    if not mask.any():
        raise DataError(f"{dsm_path}: every dsm pixel is invalid")
    if height_range is None:
        if header["h_min"] is not None:
            height_range = (header["h_min"], header["h_max"])
        else:
            height_range = (float(np.nanmin(dsm)), float(np.nanmax(dsm)))
            if height_range[1] <= height_range[0]:
                height_range = (height_range[0], height_range[0] + 1.0)
    return TilePair(
        image=image,
        dsm=dsm,
        valid_mask=mask,
        height_range=tuple(float(v) for v in height_range),
        pixel_resolution=header["resolution"] or 1.0,
    )


DSM_SUFFIXES = (".f32", ".tif", ".tiff")


def find_dsm_files(root) -> dict[str, Path]:
    """Map stem -> dsm file under ``root/dsm`` (or ``root`` itself)."""
    root = Path(root)
    folder = root / "dsm" if (root / "dsm").is_dir() else root
    found = {}
    for p in sorted(folder.iterdir()) if folder.is_dir() else []:
        if p.suffix.lower() in DSM_SUFFIXES:
            found.setdefault(p.stem, p)
    return found


def list_pairs(root) -> list[tuple[str, Path, Path]]:
    root = Path(root)
    if not (root / "images").is_dir() or not (root / "dsm").is_dir():
        raise DataError(f"{root} must contain images/ and dsm/ folders")
    images = {p.stem: p for p in sorted((root / "images").glob("*.png"))}
    dsms = find_dsm_files(root)
    missing = sorted(set(images) ^ set(dsms))
    if missing:
        raise DataError(f"unmatched stems under {root}: {', '.join(missing)}")
    return [(stem, images[stem], dsms[stem]) for stem in sorted(images)]


def write_pair(root, stem: str, pair: ScenePair, sentinel: float = DEFAULT_SENTINEL):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "dsm").mkdir(parents=True, exist_ok=True)
    write_png(root / "images" / f"{stem}.png", pair.image)
    write_dsm(root / "dsm" / f"{stem}.f32", pair.dsm, pair.pixel_resolution, pair.height_range, sentinel)


def write_synthetic_dataset(root, specs: list[SynthSpec], prefix: str = "scene") -> list[str]:
    stems = []
    for i, spec in enumerate(specs):
        stem = f"{prefix}{i:03d}"
        write_pair(root, stem, synth_scene(spec))
        stems.append(stem)
    return stems


def load_scene(root, stem: str, sentinel: float = DEFAULT_SENTINEL, height_range=None) -> TilePair:
    root = Path(root)
    dsms = find_dsm_files(root)
    if stem not in dsms:
        raise DataError(f"no dsm for stem {stem} under {root}")
    return load_tile_pair(root / "images" / f"{stem}.png", dsms[stem], sentinel, height_range)


# -- torch-facing dataset ----------------------------------------------------

def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample stream; independent of worker count and iteration order."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


class TileDataset:
    """Indexable training set: tile ``i`` at epoch ``e`` is augmented with ``sample_rng(seed, e, i)``."""

    def __init__(self, tiles: list[TilePair], augment_cfg: AugmentConfig | None, seed: int = 0, train: bool = True):
        if not tiles:
            raise DataError("dataset is empty")
        self.tiles = tiles
        self.augment_cfg = augment_cfg
        self.seed = seed
        self.train = train
        self.epoch = 0
        h_min, h_max = tiles[0].height_range
        if any(t.height_range != (h_min, h_max) for t in tiles):
            warnings.warn("tiles carry different height ranges; the first one is used for normalization")
        self.height_range = (h_min, h_max)

    def __len__(self):
        return len(self.tiles)

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def get(self, index: int, epoch: int | None = None) -> TilePair:
        tile = self.tiles[index]
        if self.train and self.augment_cfg is not None:
            rng = sample_rng(self.seed, self.epoch if epoch is None else epoch, index)
            tile = augment(tile, rng, self.augment_cfg)
        return tile

    def __getitem__(self, index: int):
        tile = self.get(index)
        dsm = np.where(tile.valid_mask, tile.dsm, tile.height_range[0]).astype(np.float32)
        return (
            np.ascontiguousarray(tile.image.transpose(2, 0, 1), dtype=np.float32),
            dsm,
            tile.valid_mask.copy(),
        )

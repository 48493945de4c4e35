"""Masked height-error metrics and pooled evaluation reports."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

EPS = 1e-6
REPORT_KEYS = (
    "rel",
    "rmse_log_literal",
    "rmse_log",
    "delta1",
    "delta2",
    "delta3",
    "valid_pixels",
    "excluded_pixels",
    "offset_m",
)


def _masked(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.ones(gt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or gt.shape != mask.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}")
    mask = mask & np.isfinite(gt) & np.isfinite(pred)
    if not mask.any():
        raise ValueError("metric over an empty mask")
    return pred[mask], gt[mask]


def _usable(gt, eps):
    keep = gt > eps
    dropped = int((~keep).sum())
    if dropped:
        warnings.warn(f"{dropped} pixels with ground truth <= {eps} excluded")
    if not keep.any():
        raise ValueError("every masked pixel has ground truth <= eps")
    return keep


def rel(pred, gt, mask=None, eps: float = EPS) -> float:
    p, g = _masked(pred, gt, mask)
    keep = _usable(g, eps)
    return float(np.mean(np.abs((p[keep] - g[keep]) / g[keep])))


def rmse_log(pred, gt, mask=None, mode: str = "log") -> float:
    """``mode='log'``: RMSE of natural-log heights. ``mode='literal'``: plain RMSE of heights."""
    p, g = _masked(pred, gt, mask)
    if mode == "literal":
        return float(np.sqrt(np.mean((p - g) ** 2)))
    if mode != "log":
        raise ValueError(f"unknown rmse_log mode {mode!r}")
    if (p <= 0).any() or (g <= 0).any():
        raise ValueError("log-mode RMSE needs strictly positive heights")
    return float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2)))


def _ratios(p, g, eps):
    ratio = np.full(p.shape, np.inf)
    ok = p > eps
    ratio[ok] = np.maximum(p[ok] / g[ok], g[ok] / p[ok])
    return ratio


def delta_acc(pred, gt, mask=None, i: int = 1, eps: float = EPS) -> float:
    p, g = _masked(pred, gt, mask)
    keep = _usable(g, eps)
    return float(np.mean(_ratios(p[keep], g[keep], eps) < 1.25**i))


@dataclass
class MetricsReport:
    rel: float
    rmse_log_literal: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    valid_pixels: int
    excluded_pixels: int
    offset_m: float
    h_min: float = 0.0
    aggregation: str = "pooled over all valid pixels of all tiles"
    per_tile: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        out = {k: getattr(self, k) for k in REPORT_KEYS}
        out["h_min"] = self.h_min
        out["aggregation"] = self.aggregation
        out["per_tile"] = self.per_tile
        return out

    def to_json(self) -> str:
        return json.dumps(_round(self.as_dict()), indent=2) + "\n"

    def to_table(self) -> str:
        cols = ["tile", "rel", "rmse_log", "rmse_log_literal", "delta1", "delta2", "delta3", "valid_pixels"]
        rows = [[str(t.get("name", i)), *(_fmt(t[c]) for c in cols[1:])] for i, t in enumerate(self.per_tile)]
        rows.append(["POOLED", *(_fmt(getattr(self, c)) for c in cols[1:])])
        widths = [max(len(c), *(len(r[j]) for r in rows)) for j, c in enumerate(cols)]
        lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in rows]
        lines.append(f"excluded_pixels={self.excluded_pixels}  offset_m={_fmt(self.offset_m)}  h_min={_fmt(self.h_min)}  ({self.aggregation})")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else f"{v:.6g}"


def _round(obj):
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_round(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(f"{obj:.6g}")
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _summary(p, g, eps):
    keep = g > eps
    pk, gk = p[keep], g[keep]
    ratio = _ratios(pk, gk, eps)
    positive = (p > 0) & (g > 0)
    return {
        "rel": float(np.mean(np.abs((pk - gk) / gk))) if keep.any() else float("nan"),
        "rmse_log_literal": float(np.sqrt(np.mean((p - g) ** 2))),
        "rmse_log": float(np.sqrt(np.mean((np.log(p[positive]) - np.log(g[positive])) ** 2)))
        if positive.any()
        else float("nan"),
        "delta1": float(np.mean(ratio < 1.25)) if keep.any() else float("nan"),
        "delta2": float(np.mean(ratio < 1.25**2)) if keep.any() else float("nan"),
        "delta3": float(np.mean(ratio < 1.25**3)) if keep.any() else float("nan"),
        "valid_pixels": int(p.size),
        "excluded_pixels": int((~keep).sum()),
    }


def evaluate(pred_set, gt_set, masks=None, h_min: float = 0.0, offset_m: float = 1.0, names=None, eps: float = EPS) -> MetricsReport:
    """Pooled metrics over tiles of meters-valued heights.

    Heights are shifted by ``offset_m - h_min`` before any ratio or log so that
    the dataset minimum maps to ``offset_m``.
    """
    pred_set, gt_set = list(pred_set), list(gt_set)
    masks = [None] * len(gt_set) if masks is None else list(masks)
    if not (len(pred_set) == len(gt_set) == len(masks)):
        raise ValueError(f"set sizes differ: {len(pred_set)} predictions, {len(gt_set)} targets, {len(masks)} masks")
    if not gt_set:
        raise ValueError("nothing to evaluate")
    shift = offset_m - h_min
    all_p, all_g, per_tile = [], [], []
    for i, (p, g, m) in enumerate(zip(pred_set, gt_set, masks)):
        p, g = _masked(np.asarray(p, dtype=np.float64) + shift, np.asarray(g, dtype=np.float64) + shift, m)
        all_p.append(p)
        all_g.append(g)
        tile = _summary(p, g, eps)
        tile["name"] = names[i] if names else str(i)
        per_tile.append(tile)
    p, g = np.concatenate(all_p), np.concatenate(all_g)
    if (p <= 0).any() or (g <= 0).any():
        raise ValueError("heights are non-positive after the offset; raise offset_m or check h_min")
    pooled = _summary(p, g, eps)
    if pooled["excluded_pixels"]:
        warnings.warn(f"{pooled['excluded_pixels']} pixels with ground truth <= {eps} excluded")
    return MetricsReport(offset_m=offset_m, h_min=float(h_min), per_tile=per_tile, **pooled)

import torch

from .config import LossConfig


def silog_loss(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    """Scale-invariant log loss over masked pixels.

    ``pred`` and ``gt`` must already be strictly positive where ``mask`` is set
    (see :func:`offset_heights`). Returns ``alpha * sqrt(mean(g^2) - lam * mean(g)^2)``
    with ``g = log(pred) - log(gt)``.
    """
    cfg = cfg or LossConfig()
    if pred.shape != gt.shape or gt.shape != mask.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)}, gt {tuple(gt.shape)}, mask {tuple(mask.shape)}")
    mask = mask.bool()
    T = int(mask.sum())
    if T == 0:
        raise ValueError("silog loss over an empty mask")
    p, t = pred[mask], gt[mask]
    if (p <= 0).any() or (t <= 0).any():
        raise ValueError("silog loss needs strictly positive heights on masked pixels")
    g = torch.log(p) - torch.log(t)
    d = (g**2).sum() / T - cfg.lam * g.sum() ** 2 / T**2
    # clamp keeps sqrt differentiable when pred == gt exactly
    return cfg.alpha * torch.sqrt(d.clamp_min(torch.finfo(d.dtype).tiny))


def offset_heights(heights, h_min: float, offset_m: float = 1.0):
    """Shift meters so the dataset minimum sits at ``offset_m`` (logs and ratios need positivity)."""
    return heights - h_min + offset_m

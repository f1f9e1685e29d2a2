"""Binary segmentation metrics.

Empty-denominator conventions: Dice and IoU are 1 when both masks are empty;
FPR is 0 when the target covers the whole image, FNR is 0 when the target is
empty.  Hausdorff works on the full foreground point sets (not boundaries)
and requires both to be non-empty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels


class EmptyMaskError(ValueError):
    """Hausdorff distance is undefined for an empty mask."""

    code = "empty_mask"


def _pair(pred, target):
    p = np.asarray(pred).astype(bool)
    t = np.asarray(target).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"pred {p.shape} and target {t.shape} differ")
    return p, t


def metric_dice(pred, target) -> float:
    p, t = _pair(pred, target)
    den = p.sum() + t.sum()
    return 1.0 if den == 0 else 2.0 * (p & t).sum() / den


def metric_iou(pred, target) -> float:
    p, t = _pair(pred, target)
    union = (p | t).sum()
    return 1.0 if union == 0 else (p & t).sum() / union


def metric_fpr(pred, target) -> float:
    p, t = _pair(pred, target)
    neg = (~t).sum()
    return 0.0 if neg == 0 else (p & ~t).sum() / neg


def metric_fnr(pred, target) -> float:
    p, t = _pair(pred, target)
    pos = t.sum()
    return 0.0 if pos == 0 else (t & ~p).sum() / pos


def _points(mask, spacing_mm):
    return np.argwhere(mask).astype(np.float64) * spacing_mm


def hausdorff_bruteforce(pred, target, spacing_mm: float = 1.0) -> float:
    """Reference O(|P| |T|) symmetric Hausdorff distance in mm."""
    p, t = _pair(pred, target)
    if not p.any() or not t.any():
        raise EmptyMaskError("Hausdorff distance needs two non-empty masks")
    P, T = _points(p, spacing_mm), _points(t, spacing_mm)
    d = np.sqrt(((P[:, None, :] - T[None, :, :]) ** 2).sum(-1))
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def metric_hausdorff(pred, target, spacing_mm: float = 1.0) -> float:
    """Symmetric Hausdorff distance between foreground pixel sets, in mm.

    Only points not shared by both sets can realise the maximum, so the
    directed searches run from ``P \\ T`` to ``T`` and ``T \\ P`` to ``P``.
    """
    p, t = _pair(pred, target)
    if not p.any() or not t.any():
        raise EmptyMaskError("Hausdorff distance needs two non-empty masks")
    P, T = _points(p, spacing_mm), _points(t, spacing_mm)
    a = _points(p & ~t, spacing_mm)
    b = _points(t & ~p, spacing_mm)
    worst = 0.0
    if len(a):
        worst = max(worst, float(_kernels.min_sq_dist(a, T).max()))
    if len(b):
        worst = max(worst, float(_kernels.min_sq_dist(b, P).max()))
    return float(np.sqrt(worst))


@dataclass
class MetricsReport:
    dice: tuple[float, float]
    iou: tuple[float, float]
    hausdorff_mm: tuple[float, float]
    fpr: tuple[float, float]
    fnr: tuple[float, float]
    spacing_mm: float
    n: int
    n_hausdorff_excluded: int

    def row(self) -> dict:
        return {k: getattr(self, k) for k in ("dice", "iou", "hausdorff_mm", "fpr", "fnr")}


def per_sample_metrics(pred, target, spacing_mm: float = 1.0) -> dict:
    row = {
        "dice": metric_dice(pred, target),
        "iou": metric_iou(pred, target),
        "fpr": metric_fpr(pred, target),
        "fnr": metric_fnr(pred, target),
    }
    try:
        row["hausdorff_mm"] = metric_hausdorff(pred, target, spacing_mm)
    except EmptyMaskError:
        row["hausdorff_mm"] = None
    return row


def aggregate(rows: list[dict], spacing_mm: float = 1.0) -> MetricsReport:
    def ms(vals):
        vals = np.asarray(vals, dtype=np.float64)
        if len(vals) == 0:
            return (float("nan"), float("nan"))
        return (float(vals.mean()), float(vals.std()))

    hd = [r["hausdorff_mm"] for r in rows if r["hausdorff_mm"] is not None]
    return MetricsReport(
        dice=ms([r["dice"] for r in rows]),
        iou=ms([r["iou"] for r in rows]),
        hausdorff_mm=ms(hd),
        fpr=ms([r["fpr"] for r in rows]),
        fnr=ms([r["fnr"] for r in rows]),
        spacing_mm=spacing_mm,
        n=len(rows),
        n_hausdorff_excluded=len(rows) - len(hd),
    )

"""Segmentation losses on logits."""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Function, ShapeError, Tensor, as_tensor


def _check(logits: Tensor, target: Tensor) -> None:
    if logits.shape != target.shape:
        raise ShapeError(f"logits {logits.shape} and target {target.shape} differ")


def dice_loss(logits, target, smooth: float = 1.0) -> Tensor:
    """1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s) with p = sigmoid(logits), pooled over the batch."""
    logits, target = as_tensor(logits), as_tensor(target)
    _check(logits, target)
    t = Tensor(target.data.astype(logits.dtype))
    p = ops.sigmoid(logits)
    inter = ops.reduce(ops.mul(p, t), "sum")
    num = ops.add(ops.scalar_mul(inter, 2.0), smooth)
    den = ops.add(ops.add(ops.reduce(p, "sum"), float(t.data.sum())), smooth)
    return ops.sub(1.0, ops.div(num, den))


class BCEWithLogits(Function):
    def forward(self, z, t):
        self.z, self.t = z, t
        return np.mean(np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z))))

    def backward(self, g):
        z = self.z
        e = np.exp(-np.abs(z))
        sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * (sig - self.t) / z.size).astype(z.dtype, copy=False), None


def bce_loss(logits, target) -> Tensor:
    """Mean of max(z, 0) - z t + log(1 + exp(-|z|))."""
    logits, target = as_tensor(logits), as_tensor(target)
    _check(logits, target)
    return BCEWithLogits.apply(logits, Tensor(target.data.astype(logits.dtype)))


def segmentation_loss(logits, target, w_dice: float = 1.0, w_bce: float = 1.0) -> Tensor:
    return ops.add(ops.scalar_mul(dice_loss(logits, target), w_dice), ops.scalar_mul(bce_loss(logits, target), w_bce))

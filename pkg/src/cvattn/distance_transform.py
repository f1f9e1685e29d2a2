"""Soft (log-sum-exp) distance transform and a brute-force exact EDT oracle.

``beta = -lam * log(sum_u alpha(x - u) K(u) + floor)`` with
``K(u) = exp(-|u| / lam)`` (or ``exp(-|u|^2 / lam)``) on the square window
``|u|_inf <= R`` and zero padding outside the image.  For a one-hot ``alpha``
this is exactly the distance to the hot pixel; for general binary ``alpha`` it
is a soft minimum over the sources inside the window.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .tensor import Function, ShapeError, Tensor, as_tensor

FLOOR = 1e-20
TRUNCATION_TOL = 1e-6
METRICS = ("euclidean", "squared-euclidean")


def default_radius(lambda_dt: float) -> int:
    """Smallest R with exp(-R / lambda) < 1e-6."""
    return int(math.floor(lambda_dt * math.log(1.0 / TRUNCATION_TOL))) + 1


@dataclass(frozen=True)
class DtParams:
    lambda_dt: float = 0.5
    kernel_radius: int | None = None
    metric: str = "euclidean"
    allow_truncation: bool = False

    def __post_init__(self):
        if not self.lambda_dt > 0:
            raise ValueError(f"lambda_dt must be > 0, got {self.lambda_dt}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.kernel_radius is None:
            object.__setattr__(self, "kernel_radius", default_radius(self.lambda_dt))
        if int(self.kernel_radius) != self.kernel_radius or self.kernel_radius < 1:
            raise ValueError(f"kernel_radius must be a positive integer, got {self.kernel_radius}")
        if not self.allow_truncation and math.exp(-self.kernel_radius / self.lambda_dt) >= TRUNCATION_TOL:
            raise ValueError(
                f"kernel_radius={self.kernel_radius} truncates exp(-R/lambda) >= {TRUNCATION_TOL} "
                f"for lambda={self.lambda_dt}; raise it to {default_radius(self.lambda_dt)} or set allow_truncation"
            )

    def to_dict(self) -> dict:
        return asdict(self)


def _kernel_1d(R: int, lam: float) -> np.ndarray:
    u = np.arange(-R, R + 1, dtype=np.float64)
    return np.exp(-(u * u) / lam)


def dt_kernel(p: DtParams) -> np.ndarray:
    """The (2R+1) x (2R+1) weight window; the centre entry is exactly 1."""
    R = p.kernel_radius
    u = np.arange(-R, R + 1, dtype=np.float64)
    if p.metric == "squared-euclidean":
        k1 = _kernel_1d(R, p.lambda_dt)
        return np.outer(k1, k1)
    d = np.hypot(u[:, None], u[None, :])
    return np.exp(-d / p.lambda_dt)


def _smooth(x: np.ndarray, p: DtParams) -> np.ndarray:
    """Zero-padded correlation of (B, H, W) ``x`` with the kernel (symmetric, so also its adjoint)."""
    if p.metric == "squared-euclidean":
        k1 = _kernel_1d(p.kernel_radius, p.lambda_dt)
        y = _kernels.correlate2d_same(x, k1[:, None])
        return _kernels.correlate2d_same(y, k1[None, :])
    return _kernels.correlate2d_same(x, dt_kernel(p))


class SoftDT(Function):
    def forward(self, alpha, p):
        shape = alpha.shape
        a = alpha.reshape(-1, shape[-2], shape[-1])
        S = _smooth(a, p) + FLOOR
        self.p, self.S, self.shape = p, S, shape
        return (-p.lambda_dt * np.log(S)).astype(alpha.dtype, copy=False).reshape(shape)

    def backward(self, g):
        g = g.reshape(self.S.shape)
        ga = _smooth(-self.p.lambda_dt * g / self.S, self.p)
        return (ga.astype(g.dtype, copy=False).reshape(self.shape),)


def soft_distance_transform(alpha, p: DtParams, return_diagnostics: bool = False):
    """Differentiable distance map of an attention map ``alpha`` (trailing axes H, W).

    With ``return_diagnostics`` also returns a boolean map of pixels where
    the additive floor dominated the smoothed mass, i.e. no attention mass
    lies within the kernel window.
    """
    alpha = as_tensor(alpha)
    if alpha.ndim < 2:
        raise ShapeError(f"soft_distance_transform needs a 2-d map, got {alpha.shape}")
    beta = SoftDT.apply(alpha, p=p)
    if return_diagnostics:
        floor_dominated = beta.data >= -p.lambda_dt * math.log(2 * FLOOR)
        return beta, floor_dominated
    return beta


def exact_edt(mask) -> np.ndarray:
    """Euclidean distance from every pixel to the nearest foreground pixel, by brute force."""
    m = np.asarray(as_tensor(mask).data if isinstance(mask, Tensor) else mask) > 0
    if m.ndim != 2:
        raise ShapeError(f"exact_edt needs a 2-d mask, got {m.shape}")
    src = np.argwhere(m)
    if len(src) == 0:
        raise ValueError("exact_edt: mask has no foreground pixel")
    grid = np.argwhere(np.ones_like(m))
    return np.sqrt(_kernels.min_sq_dist(grid, src)).reshape(m.shape)

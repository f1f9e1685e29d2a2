"""Two-phase piecewise-constant level-set segmentation (Chan-Vese).

The level set ``phi`` marks the inside region where ``phi > 0``.  All
functions act on the two trailing axes ``(H, W)``; any leading axes are
treated as independent images.  Pixel area is 1, spatial derivatives are
central differences with replicate boundaries.

Smoothing uses the arctan regularisation::

    H_eps(z) = 1/2 (1 + 2/pi arctan(z / eps))
    delta_eps(z) = eps / (pi (eps^2 + z^2))

and one evolution step is

    phi' = phi + dt delta_eps(phi) [mu kappa(phi) - nu - l1 (I - c1)^2 + l2 (I - c2)^2]

with the region means c1, c2 recomputed from the current ``phi``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import _kernels
from .tensor import Function, NonFiniteError, ShapeError, Tensor, as_tensor

#: Region weight below which a region counts as empty.
EMPTY_REGION = 1e-8


@dataclass(frozen=True)
class ChanVeseParams:
    mu: float = 0.1
    nu: float = 0.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    eps: float = 1.0
    dt: float = 0.5
    iters: int = 200
    eta: float = 1e-8

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        for name in ("lambda1", "lambda2", "eps", "eta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.dt < 0:
            raise ValueError(f"dt must be >= 0, got {self.dt}")
        if int(self.iters) != self.iters or self.iters < 1:
            raise ValueError(f"iters must be a positive integer, got {self.iters}")

    def replace(self, **kw) -> "ChanVeseParams":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


# --- smoothed Heaviside / Dirac --------------------------------------------


def _heaviside(z, eps):
    return 0.5 + np.arctan(z / eps) / np.pi


def _dirac(z, eps):
    return (eps / np.pi) / (eps * eps + z * z)


def _dirac_prime(z, eps):
    d = eps * eps + z * z
    return -(2.0 * eps / np.pi) * z / (d * d)


class HeavisideEps(Function):
    def forward(self, z, eps):
        self.z, self.eps = z, eps
        return _heaviside(z, eps).astype(z.dtype, copy=False)

    def backward(self, g):
        return (g * _dirac(self.z, self.eps),)


class DiracEps(Function):
    def forward(self, z, eps):
        self.z, self.eps = z, eps
        return _dirac(z, eps).astype(z.dtype, copy=False)

    def backward(self, g):
        return (g * _dirac_prime(self.z, self.eps),)


def heaviside_eps(z, eps: float) -> Tensor:
    if not eps > 0:
        raise ValueError("eps must be > 0")
    return HeavisideEps.apply(z, eps=float(eps))


def dirac_eps(z, eps: float) -> Tensor:
    if not eps > 0:
        raise ValueError("eps must be > 0")
    return DiracEps.apply(z, eps=float(eps))


# --- region statistics ------------------------------------------------------


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-2], a.shape[-1])


def _region_stats(img, H):
    """Per-image region means on (B, H, W) arrays plus the pieces backward needs."""
    Hc = 1.0 - H
    sh = H.sum(axis=(1, 2))
    shc = Hc.sum(axis=(1, 2))
    mean = img.mean(axis=(1, 2))
    empty1 = sh < EMPTY_REGION
    empty2 = shc < EMPTY_REGION
    c1 = np.where(empty1, mean, (img * H).sum(axis=(1, 2)) / np.where(empty1, 1.0, sh))
    c2 = np.where(empty2, mean, (img * Hc).sum(axis=(1, 2)) / np.where(empty2, 1.0, shc))
    return c1, c2, sh, shc, empty1, empty2


def region_means(img, phi, eps: float = 1.0):
    """Weighted inside/outside means ``(c1, c2, empty1, empty2)``.

    ``c1 = sum(I H) / sum(H)``, ``c2 = sum(I (1-H)) / sum(1-H)`` with
    ``H = H_eps(phi)``.  A region whose weight is below ``1e-8`` is empty; its
    mean falls back to the global image mean and its flag is set.  Outputs
    have the leading shape of the inputs (scalars for a single 2-d image).
    """
    img = np.asarray(as_tensor(img).data, dtype=np.float64)
    phi = np.asarray(as_tensor(phi).data, dtype=np.float64)
    if img.shape != phi.shape:
        raise ShapeError(f"image {img.shape} and level set {phi.shape} differ")
    lead = img.shape[:-2]
    c1, c2, _, _, e1, e2 = _region_stats(_flat(img), _heaviside(_flat(phi), eps))
    return c1.reshape(lead), c2.reshape(lead), e1.reshape(lead), e2.reshape(lead)


# --- curvature --------------------------------------------------------------


class Curvature(Function):
    def forward(self, phi, eta):
        shape = phi.shape
        kappa, self.nx, self.ny, self.mag = _kernels.curvature_fields(_flat(phi), eta)
        return kappa.reshape(shape)

    def backward(self, g):
        shape = g.shape
        return (_kernels.curvature_backward(_flat(g), self.nx, self.ny, self.mag).reshape(shape),)


def curvature(phi, eta: float = 1e-8) -> Tensor:
    """div(grad phi / |grad phi|) with |grad phi| = sqrt(phi_x^2 + phi_y^2 + eta^2)."""
    if not eta > 0:
        raise ValueError("eta must be > 0")
    phi = as_tensor(phi)
    if phi.ndim < 2:
        raise ShapeError(f"curvature needs a 2-d field, got {phi.shape}")
    return Curvature.apply(phi, eta=float(eta))


# --- energy -----------------------------------------------------------------


def cv_energy(img, phi, p: ChanVeseParams, terms: bool = False):
    """Discrete energy with c1, c2 from :func:`region_means`.

    Returns a float for a single image, an array for a batch.  With
    ``terms=True`` returns a dict of the four summed terms instead.
    """
    img = np.asarray(as_tensor(img).data, dtype=np.float64)
    phi = np.asarray(as_tensor(phi).data, dtype=np.float64)
    if img.shape != phi.shape:
        raise ShapeError(f"image {img.shape} and level set {phi.shape} differ")
    lead = img.shape[:-2]
    I, P = _flat(img), _flat(phi)
    H = _heaviside(P, p.eps)
    c1, c2, *_ = _region_stats(I, H)
    px = _kernels.central_dx(P)
    py = _kernels.central_dy(P)
    grad = np.sqrt(px * px + py * py + p.eta * p.eta)
    parts = {
        "length": p.mu * (_dirac(P, p.eps) * grad).sum(axis=(1, 2)),
        "area": p.nu * H.sum(axis=(1, 2)),
        "inside": p.lambda1 * (((I - c1[:, None, None]) ** 2) * H).sum(axis=(1, 2)),
        "outside": p.lambda2 * (((I - c2[:, None, None]) ** 2) * (1.0 - H)).sum(axis=(1, 2)),
    }
    if terms:
        return {k: (v.reshape(lead) if lead else float(v[0])) for k, v in parts.items()}
    total = parts["length"] + parts["area"] + parts["inside"] + parts["outside"]
    return total.reshape(lead) if lead else float(total[0])


# --- evolution --------------------------------------------------------------


class CVStep(Function):
    """One explicit gradient-descent step; differentiable in image and phi."""

    check_finite = False

    def forward(self, img, phi, p):
        self.shape = phi.shape
        self.p = p
        I = _flat(img)
        P = _flat(phi)
        H = _heaviside(P, p.eps)
        D = _dirac(P, p.eps)
        c1, c2, sh, shc, e1, e2 = _region_stats(I, H)
        kappa, nx, ny, mag = _kernels.curvature_fields(P, p.eta)
        r1 = I - c1[:, None, None]
        r2 = I - c2[:, None, None]
        F = p.mu * kappa - p.nu - p.lambda1 * r1 * r1 + p.lambda2 * r2 * r2
        with np.errstate(invalid="ignore", over="ignore"):
            out = P + p.dt * D * F
        if not np.all(np.isfinite(out)):
            b, i, j = np.argwhere(~np.isfinite(out))[0]
            raise NonFiniteError(f"cv_step produced a non-finite value at image {b}, pixel ({i}, {j})")
        self.saved = (I, P, H, D, F, r1, r2, sh, shc, e1, e2, nx, ny, mag)
        return out.astype(phi.dtype, copy=False).reshape(self.shape)

    def backward(self, g):
        p = self.p
        I, P, H, D, F, r1, r2, sh, shc, e1, e2, nx, ny, mag = self.saved
        g = _flat(g)
        n = I.shape[1] * I.shape[2]
        gF = g * (p.dt * D)
        g_phi = g + g * (p.dt * F) * _dirac_prime(P, p.eps)
        if p.mu:
            g_phi = g_phi + _kernels.curvature_backward(p.mu * gF, nx, ny, mag)
        g_img = gF * (2.0 * p.lambda2 * r2 - 2.0 * p.lambda1 * r1)
        gc1 = (gF * 2.0 * p.lambda1 * r1).sum(axis=(1, 2))
        gc2 = -(gF * 2.0 * p.lambda2 * r2).sum(axis=(1, 2))
        # c1 = sum(I H) / sum(H);  c2 = sum(I (1-H)) / sum(1-H)
        s1 = np.where(e1, 0.0, gc1 / np.where(e1, 1.0, sh))[:, None, None]
        s2 = np.where(e2, 0.0, gc2 / np.where(e2, 1.0, shc))[:, None, None]
        g_img = g_img + s1 * H + s2 * (1.0 - H) + (np.where(e1, gc1, 0.0) + np.where(e2, gc2, 0.0))[:, None, None] / n
        g_H = s1 * r1 - s2 * r2
        g_phi = g_phi + g_H * D
        return g_img.reshape(self.shape), g_phi.reshape(self.shape)


def _check_pair(img: Tensor, phi: Tensor) -> None:
    if img.shape != phi.shape:
        raise ShapeError(f"image {img.shape} and level set {phi.shape} differ")
    if img.ndim < 2:
        raise ShapeError(f"need at least 2-d inputs, got {img.shape}")


def cv_step(img, phi, p: ChanVeseParams) -> Tensor:
    img, phi = as_tensor(img), as_tensor(phi)
    _check_pair(img, phi)
    return CVStep.apply(img, phi, p=p)


def cv_evolve(img, phi0, p: ChanVeseParams, trace: bool = False):
    """Run ``p.iters`` steps from ``phi0``; no reinitialisation in between.

    With ``trace=True`` returns ``(phi, energies)`` where ``energies`` has
    ``p.iters + 1`` entries, the first for ``phi0``.
    """
    img, phi = as_tensor(img), as_tensor(phi0)
    _check_pair(img, phi)
    energies = [cv_energy(img, phi, p)] if trace else None
    for _ in range(int(p.iters)):
        phi = CVStep.apply(img, phi, p=p)
        if trace:
            energies.append(cv_energy(img, phi, p))
    if trace:
        return phi, energies
    return phi


def cv_segment(phi) -> np.ndarray:
    """Binary foreground mask ``phi > 0`` (strict: zero is background)."""
    return np.asarray(as_tensor(phi).data) > 0


def circle_levelset(shape, center, radius: float, dtype=np.float64) -> np.ndarray:
    """Radius-normalised cone ``(radius - |x - center|) / radius``; positive inside.

    ``center`` is ``(cy, cx)`` in pixel coordinates.
    """
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    d = np.hypot(yy - center[0], xx - center[1])
    return ((radius - d) / radius).astype(dtype)

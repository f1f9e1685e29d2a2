"""Additive attention gate and the Chan-Vese attention gate.

Both gates take a skip-connection feature map ``x_skip`` (N, Fx, H, W) and a
gating signal ``y_gate`` (N, Fg, H, W) already at the same resolution, and
return the gated skip features plus a single-channel attention map.

Chan-Vese gate pipeline, per layer::

    alpha = sigmoid(psi * relu(W_x x + W_g y + b_f) + b_psi)
    beta  = soft distance transform of alpha
    phi0  = tau0 - beta
    gamma = sigmoid(W_mix (W_img x + sigmoid(img)) + b_W)      img in [0, 1], resized
    phiK  = K unrolled Chan-Vese steps on gamma from phi0
    zeta  = H_eps(phiK);  gated = x * zeta
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .chan_vese import ChanVeseParams, cv_evolve, heaviside_eps
from .distance_transform import DtParams, soft_distance_transform
from .params import ParamStore
from .tensor import ShapeError, Tensor, as_tensor


def gate_cv_params(K: int = 5) -> ChanVeseParams:
    # mu/nu as used in the gate; eta = 1 keeps the curvature Jacobian bounded where phi is flat
    return ChanVeseParams(mu=0.1, nu=1.0, lambda1=1.0, lambda2=1.0, eps=1.0, dt=0.2, iters=K, eta=1.0)


@dataclass(frozen=True)
class CvGateConfig:
    """Hyperparameters of one Chan-Vese gate (the learned weights live in :class:`CvGateParams`)."""

    dt: DtParams = field(default_factory=DtParams)
    cv: ChanVeseParams = field(default_factory=gate_cv_params)
    K: int = 5
    tau0: float = 2.0
    saturation_tol: float = 1e-6

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be a positive integer, got {self.K}")
        if not self.tau0 > 0:
            raise ValueError(f"tau0 must be > 0, got {self.tau0}")
        if self.cv.iters != self.K:
            object.__setattr__(self, "cv", replace(self.cv, iters=int(self.K)))

    def to_dict(self) -> dict:
        return {
            "dt": self.dt.to_dict(),
            "cv": self.cv.to_dict(),
            "K": self.K,
            "tau0": self.tau0,
            "saturation_tol": self.saturation_tol,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CvGateConfig":
        d = dict(d)
        dt = DtParams(**d.pop("dt", {}))
        cv = d.pop("cv", None)
        K = int(d.get("K", 5))
        cv = ChanVeseParams(**{**gate_cv_params(K).to_dict(), **(cv or {}), "iters": K})
        return cls(dt=dt, cv=cv, **d)


@dataclass
class ClassicGateParams:
    W_x: Tensor  # (F_int, Fx, 1, 1)
    W_g: Tensor  # (F_int, Fg, 1, 1)
    b_f: Tensor  # (F_int,)
    psi: Tensor  # (1, F_int, 1, 1)
    b_psi: Tensor  # (1,)

    @property
    def F_int(self) -> int:
        return self.W_x.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.W_x, self.W_g, self.b_f, self.psi, self.b_psi]


@dataclass
class CvGateParams:
    gate: ClassicGateParams
    W_img: Tensor  # (F_int, Fx, 1, 1)
    W_mix: Tensor  # (1, F_int, 1, 1)
    b_W: Tensor  # (1,)

    def tensors(self) -> list[Tensor]:
        return self.gate.tensors() + [self.W_img, self.W_mix, self.b_W]


def init_classic_gate(store: ParamStore, prefix: str, fx: int, fg: int, f_int: int) -> ClassicGateParams:
    return ClassicGateParams(
        W_x=store.uniform_fan_in(f"{prefix}.W_x", (f_int, fx, 1, 1)),
        W_g=store.uniform_fan_in(f"{prefix}.W_g", (f_int, fg, 1, 1)),
        b_f=store.zeros(f"{prefix}.b_f", (f_int,)),
        psi=store.uniform_fan_in(f"{prefix}.psi", (1, f_int, 1, 1)),
        b_psi=store.zeros(f"{prefix}.b_psi", (1,)),
    )


def init_cv_gate(store: ParamStore, prefix: str, fx: int, fg: int, f_int: int) -> CvGateParams:
    gate = init_classic_gate(store, prefix, fx, fg, f_int)
    return CvGateParams(
        gate=gate,
        W_img=store.uniform_fan_in(f"{prefix}.W_img", (f_int, fx, 1, 1)),
        W_mix=store.uniform_fan_in(f"{prefix}.W_mix", (1, f_int, 1, 1)),
        b_W=store.zeros(f"{prefix}.b_W", (1,)),
    )


def classic_gate_param_count(fx: int, fg: int, f_int: int) -> int:
    return f_int * fx + f_int * fg + f_int + f_int + 1


def cv_gate_param_count(fx: int, fg: int, f_int: int) -> int:
    return classic_gate_param_count(fx, fg, f_int) + f_int * fx + f_int + 1


def _check_channels(x: Tensor, w: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected (N, C, H, W), got {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"{what}: has {x.shape[1]} channels, gate weights expect {w.shape[1]}")


def additive_attention(x_skip, y_gate, p: ClassicGateParams) -> Tensor:
    x_skip, y_gate = as_tensor(x_skip), as_tensor(y_gate)
    _check_channels(x_skip, p.W_x, "x_skip")
    _check_channels(y_gate, p.W_g, "y_gate")
    if x_skip.shape[2:] != y_gate.shape[2:] or x_skip.shape[0] != y_gate.shape[0]:
        raise ShapeError(f"x_skip {x_skip.shape} and y_gate {y_gate.shape} are not aligned")
    joint = ops.add(ops.conv2d(x_skip, p.W_x, p.b_f), ops.conv2d(y_gate, p.W_g))
    return ops.sigmoid(ops.conv2d(ops.relu(joint), p.psi, p.b_psi))


def classic_gate(x_skip, y_gate, p: ClassicGateParams) -> tuple[Tensor, Tensor]:
    alpha = additive_attention(x_skip, y_gate, p)
    return ops.mul(x_skip, alpha), alpha


def image_conditioning(x_skip, img_resized, p: CvGateParams) -> Tensor:
    """gamma = sigmoid(W_mix (W_img x + sigmoid(img)) + b_W); img is (N, 1, H, W) in [0, 1]."""
    x_skip, img_resized = as_tensor(x_skip), as_tensor(img_resized)
    _check_channels(x_skip, p.W_img, "x_skip")
    if img_resized.ndim != 4 or img_resized.shape[1] != 1:
        raise ShapeError(f"img_resized must be (N, 1, H, W), got {img_resized.shape}")
    if img_resized.shape[2:] != x_skip.shape[2:] or img_resized.shape[0] != x_skip.shape[0]:
        raise ShapeError(f"img_resized {img_resized.shape} not aligned with x_skip {x_skip.shape}")
    inner = ops.add(ops.conv2d(x_skip, p.W_img), ops.sigmoid(img_resized))
    return ops.sigmoid(ops.conv2d(inner, p.W_mix, p.b_W))


def cv_attention_gate(x_skip, y_gate, img, p: CvGateParams, c: CvGateConfig):
    """Returns ``(gated, zeta, diagnostics)``; ``img`` is the (N, 1, H, W) input batch in [0, 1]."""
    x_skip, img = as_tensor(x_skip), as_tensor(img)
    alpha = additive_attention(x_skip, y_gate, p.gate)
    beta = soft_distance_transform(alpha, c.dt)
    phi0 = ops.sub(Tensor(np.asarray(c.tau0, dtype=beta.dtype)), beta)
    hl, wl = x_skip.shape[2:]
    img_l = img if img.shape[2:] == (hl, wl) else ops.resize_bilinear(img, (hl, wl))
    gamma = image_conditioning(x_skip, img_l, p)
    phi_k = cv_evolve(gamma, phi0, c.cv)
    zeta = heaviside_eps(phi_k, c.cv.eps)
    gated = ops.mul(x_skip, zeta)
    z = zeta.data
    tol = c.saturation_tol
    saturated = float(np.mean((z < tol) | (z > 1.0 - tol))) > 0.99
    diagnostics = {"alpha": alpha, "beta": beta, "gamma": gamma, "phi": phi_k, "saturated": saturated}
    return gated, zeta, diagnostics

"""Named finite-difference suites over every differentiable piece.

Each suite returns ``[(name, max_rel_err, tolerance), ...]``; everything runs
in f64 with central differences (h = 1e-5).  Primitives are held to 1e-6,
composed blocks to 1e-4 and the U-Net spot-check to 1e-3.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .attention import (
    CvGateConfig,
    additive_attention,
    classic_gate,
    cv_attention_gate,
    gate_cv_params,
    image_conditioning,
    init_classic_gate,
    init_cv_gate,
)
from .chan_vese import ChanVeseParams, circle_levelset, curvature, cv_evolve, cv_step, dirac_eps, heaviside_eps
from .distance_transform import DtParams, soft_distance_transform
from .gradcheck import grad_check, weighted_sum
from .losses import bce_loss, dice_loss
from .params import ParamStore
from .tensor import Tensor
from .unet import UNetConfig, build

PRIMITIVE_TOL = 1e-6
BLOCK_TOL = 1e-4
NETWORK_TOL = 1e-3

SUITES = ("ops", "cv", "dt", "gate", "unet")


def _rng(seed):
    return np.random.default_rng(seed)


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64))


def _away_from_zero(rng, shape, lo=0.2, hi=1.5):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _check(name, f, xs, tol, **kw):
    return name, grad_check(lambda *a: weighted_sum(f(*a)), xs, **kw), tol


def suite_ops(seed: int = 0):
    r = _rng(seed)
    n = lambda *s: _t(r.normal(size=s))
    P = PRIMITIVE_TOL
    out = [
        _check("add", ops.add, [n(2, 3, 4), n(3, 1)], P),
        _check("sub", ops.sub, [n(2, 3, 4), n(4)], P),
        _check("mul", ops.mul, [n(2, 3, 4), n(2, 1, 4)], P),
        _check("div", ops.div, [n(3, 4), _t(r.uniform(0.5, 2.0, (3, 4)))], P),
        _check("scalar_mul", lambda x: ops.scalar_mul(x, -1.7), [n(3, 4)], P),
        _check("square", ops.square, [n(3, 4)], P),
        _check("sigmoid", ops.sigmoid, [_t(r.normal(scale=3.0, size=(3, 4)))], P),
        _check("relu", ops.relu, [_t(_away_from_zero(r, (3, 4)))], P),
        _check("exp", ops.exp, [n(3, 4)], P),
        _check("log", ops.log, [_t(r.uniform(0.2, 3.0, (3, 4)))], P),
        _check("reduce_sum", lambda x: ops.reduce(x, "sum", (1,), True), [n(2, 3, 4)], P),
        _check("reduce_mean", lambda x: ops.reduce(x, "mean", (0, 2)), [n(2, 3, 4)], P),
        _check("reshape", lambda x: ops.reshape(x, (4, 6)), [n(2, 3, 4)], P),
        _check("concat", lambda a, b: ops.concat([a, b], axis=1), [n(2, 1, 3, 3), n(2, 2, 3, 3)], P),
        _check("conv2d_3x3", lambda x, w, b: ops.conv2d(x, w, b, padding=1), [n(2, 3, 6, 5), n(4, 3, 3, 3), n(4)], P),
        _check("conv2d_1x1", lambda x, w, b: ops.conv2d(x, w, b), [n(2, 3, 4, 4), n(2, 3, 1, 1), n(2)], P),
        _check("conv2d_stride2", lambda x, w: ops.conv2d(x, w, stride=2, padding=1), [n(1, 2, 7, 7), n(3, 2, 3, 3)], P),
        _check("maxpool2d", ops.maxpool2d, [n(2, 2, 6, 4)], P),
        _check("upsample_nearest", lambda x: ops.upsample2d(x, 2), [n(1, 2, 3, 3)], P),
        _check("resize_bilinear", lambda x: ops.resize_bilinear(x, (7, 5)), [n(1, 2, 4, 3)], P),
    ]
    tgt = (r.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
    out.append(("bce_loss", grad_check(lambda z: bce_loss(z, tgt), [n(2, 1, 4, 4)]), P))
    out.append(("dice_loss", grad_check(lambda z: dice_loss(z, tgt), [n(2, 1, 4, 4)]), P))
    return out


def suite_cv(seed: int = 0):
    r = _rng(seed)
    H = W = 8
    phi = circle_levelset((H, W), (3.5, 4.0), 2.5) + 0.1 * r.normal(size=(H, W))
    img = np.clip(0.2 + 0.6 * (phi > 0) + 0.05 * r.normal(size=(H, W)), 0, 1)
    p = ChanVeseParams(mu=0.1, nu=0.3, dt=0.2, eps=1.0, eta=1.0, iters=3)
    return [
        _check("heaviside_eps", lambda z: heaviside_eps(z, 0.7), [_t(r.normal(scale=2, size=(3, 4)))], PRIMITIVE_TOL),
        _check("dirac_eps", lambda z: dirac_eps(z, 0.7), [_t(r.normal(scale=2, size=(3, 4)))], PRIMITIVE_TOL),
        _check("curvature", lambda z: curvature(z, 0.5), [_t(r.normal(size=(2, H, W)))], PRIMITIVE_TOL),
        _check("cv_step", lambda i, f: cv_step(i, f, p), [_t(img), _t(phi)], BLOCK_TOL),
        _check("cv_evolve_k3", lambda i, f: cv_evolve(i, f, p), [_t(img[None]), _t(phi[None])], BLOCK_TOL),
    ]


def suite_dt(seed: int = 0):
    r = _rng(seed)
    a = _t(r.uniform(0.05, 0.95, size=(1, 1, 10, 10)))
    return [
        _check("soft_dt_euclidean", lambda x: soft_distance_transform(x, DtParams(0.5)), [a], BLOCK_TOL),
        _check(
            "soft_dt_squared",
            lambda x: soft_distance_transform(x, DtParams(1.0, metric="squared-euclidean")),
            [_t(r.uniform(0.05, 0.95, size=(2, 1, 9, 9)))],
            BLOCK_TOL,
        ),
    ]


def suite_gate(seed: int = 0):
    """Gate blocks; the Chan-Vese blocks are probed through their parameters.

    tau0 = 0.3 puts the zero level of phi0 inside the 8x8 window.  With the
    training default (2.0) phi stays positive everywhere, the gamma branch
    barely moves the output and its gradients (~1e-7) sit at the
    central-difference noise floor.
    """
    r = _rng(seed)
    store = ParamStore(seed=seed, precision="f64")
    x = _t(r.normal(size=(2, 3, 8, 8)))
    g = _t(r.normal(size=(2, 3, 8, 8)))
    img = _t(r.uniform(size=(2, 1, 8, 8)))
    x1, g1, img1 = _t(r.normal(size=(1, 1, 8, 8))), _t(r.normal(size=(1, 1, 8, 8))), _t(r.uniform(size=(1, 1, 8, 8)))
    cg = init_classic_gate(store, "c", 3, 3, 2)
    vg = init_cv_gate(store, "v", 3, 3, 2)
    vg1 = init_cv_gate(store, "u", 1, 1, 1)
    cfg = CvGateConfig(cv=gate_cv_params(3), K=3, tau0=0.3)
    cp, vp = cg.tensors(), vg.tensors()
    # parameters are perturbed in place, so the closures see them directly
    return [
        _check("additive_attention", lambda a, b, *_: additive_attention(a, b, cg), [x, g, *cp], BLOCK_TOL),
        _check("classic_gate", lambda a, b, *_: classic_gate(a, b, cg)[0], [x, g, *cp], BLOCK_TOL),
        _check("image_conditioning", lambda *_: image_conditioning(x, img, vg), vp[-3:], BLOCK_TOL),
        _check("cv_attention_gate_k3", lambda *_: cv_attention_gate(x1, g1, img1, vg1, cfg)[0], vg1.tensors(), BLOCK_TOL),
        _check("cv_attention_gate_k3_c3", lambda *_: cv_attention_gate(x, g, img, vg, cfg)[0], vp, BLOCK_TOL),
    ]


def suite_unet(seed: int = 0, n_coords: int = 20, include_gates: bool = False, h: float = 1e-5):
    """Loss gradient of a depth-2 chanvese U-Net on 32x32, ``n_coords`` coordinates per conv layer.

    Gate parameters are covered by the gate suite: inside a freshly built
    network many of their gradients are below 1e-8, where central differences
    at h = 1e-5 only resolve round-off.  ``include_gates`` adds them anyway
    (use a larger ``h``).
    """
    cfg = UNetConfig(depth=2, base_channels=4, gate_mode="chanvese", gate=CvGateConfig(K=3), seed=seed, precision="f64")
    model = build(cfg)
    r = _rng(seed)
    x = r.normal(size=(1, 1, 32, 32))
    tgt = np.zeros((1, 1, 32, 32))
    tgt[..., 10:22, 8:20] = 1.0
    tensors = [t for n, t in model.params.items() if include_gates or not n.startswith("gate")]
    idx = [r.choice(t.data.size, size=min(n_coords, t.data.size), replace=False) for t in tensors]

    def loss(*_):
        logits, _maps = model(x)
        return ops.add(dice_loss(logits, tgt), bce_loss(logits, tgt))

    stats: dict = {}
    err = grad_check(loss, tensors, h=h, indices=idx, branch_aware=True, stats=stats)
    return [(f"unet_chanvese_spot[kinks={stats['kinks']}]", err, NETWORK_TOL)]


def run_suite(name: str, seed: int = 0):
    fns = {"ops": suite_ops, "cv": suite_cv, "dt": suite_dt, "gate": suite_gate, "unet": suite_unet}
    if name not in fns:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
    return fns[name](seed)

"""U-Net with a selectable gate on every skip connection.

Blocks (channels ``C_s = base * 2**s``):

* contraction s = 0..depth-1: conv3x3 -> relu -> conv3x3 -> relu (skip_s) -> maxpool2
* transition: conv3x3 -> relu -> conv3x3 -> relu at ``C_depth``
* expansion s = depth-1..0: nearest upsample x2 -> conv3x3 -> relu (gating signal g_s),
  gate(skip_s, g_s) -> concat[gated skip, g_s] -> conv3x3 -> relu -> conv3x3 -> relu
* final 1x1 conv to ``out_channels`` logits

Gate parameters are appended after all backbone parameters so the backbone is
identical across gate modes for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .attention import (
    CvGateConfig,
    classic_gate,
    classic_gate_param_count,
    cv_attention_gate,
    cv_gate_param_count,
    init_classic_gate,
    init_cv_gate,
)
from .params import ParamStore
from .tensor import ShapeError, Tensor, as_tensor

GATE_MODES = ("none", "classic", "chanvese")


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 8
    in_channels: int = 1
    out_channels: int = 1
    gate_mode: str = "none"
    gate: CvGateConfig = field(default_factory=CvGateConfig)
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.gate_mode not in GATE_MODES:
            raise ValueError(f"gate_mode must be one of {GATE_MODES}, got {self.gate_mode!r}")

    def channels(self, s: int) -> int:
        return self.base_channels * 2**s

    def f_int(self, s: int) -> int:
        return max(1, self.channels(s) // 2)

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "base_channels": self.base_channels,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "gate_mode": self.gate_mode,
            "gate": self.gate.to_dict(),
            "seed": self.seed,
            "precision": self.precision,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        gate = CvGateConfig.from_dict(d.pop("gate", {}))
        return cls(gate=gate, **d)


def _conv_count(ci: int, co: int, k: int) -> int:
    return co * ci * k * k + co


def param_count(cfg: UNetConfig) -> int:
    """Closed-form parameter count (weights + biases)."""
    C = cfg.channels
    n = 0
    for s in range(cfg.depth):
        cin = cfg.in_channels if s == 0 else C(s - 1)
        n += _conv_count(cin, C(s), 3) + _conv_count(C(s), C(s), 3)
    n += _conv_count(C(cfg.depth - 1), C(cfg.depth), 3) + _conv_count(C(cfg.depth), C(cfg.depth), 3)
    for s in range(cfg.depth):
        n += _conv_count(C(s + 1), C(s), 3) + _conv_count(2 * C(s), C(s), 3) + _conv_count(C(s), C(s), 3)
    n += _conv_count(C(0), cfg.out_channels, 1)
    for s in range(cfg.depth):
        if cfg.gate_mode == "classic":
            n += classic_gate_param_count(C(s), C(s), cfg.f_int(s))
        elif cfg.gate_mode == "chanvese":
            n += cv_gate_param_count(C(s), C(s), cfg.f_int(s))
    return n


def minmax_normalize(batch: np.ndarray) -> np.ndarray:
    """Per-sample rescale to [0, 1]; constant images map to 0."""
    lo = batch.min(axis=(1, 2, 3), keepdims=True)
    hi = batch.max(axis=(1, 2, 3), keepdims=True)
    span = hi - lo
    return np.where(span > 0, (batch - lo) / np.where(span > 0, span, 1.0), 0.0).astype(batch.dtype)


class Model:
    def __init__(self, cfg: UNetConfig, params: ParamStore):
        self.cfg = cfg
        self.params = params
        self.gates = []

    @property
    def dtype(self):
        return self.params.dtype

    def _conv(self, name: str, x: Tensor, padding: int = 1) -> Tensor:
        return ops.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], padding=padding)

    def _double(self, prefix: str, x: Tensor) -> Tensor:
        x = ops.relu(self._conv(f"{prefix}.conv1", x))
        return ops.relu(self._conv(f"{prefix}.conv2", x))

    def forward(self, batch, return_diagnostics: bool = False):
        """Return ``(logits, attn_maps)`` (plus per-gate diagnostics if requested).

        ``attn_maps`` is ordered finest level first; it holds zeta for the
        Chan-Vese gate, alpha for the classic gate, and is empty without gates.
        """
        cfg = self.cfg
        x = as_tensor(batch)
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected (N, {cfg.in_channels}, H, W) input, got {x.shape}")
        k = 2**cfg.depth
        if x.shape[2] % k or x.shape[3] % k:
            raise ShapeError(f"spatial dims {x.shape[2:]} must be divisible by 2**depth = {k}")
        img01 = Tensor(minmax_normalize(x.data[:, :1])) if cfg.gate_mode == "chanvese" else None

        skips = []
        h = x
        for s in range(cfg.depth):
            h = self._double(f"enc{s}", h)
            skips.append(h)
            h = ops.maxpool2d(h)
        h = self._double("bottom", h)

        attn = [None] * cfg.depth
        diags = [None] * cfg.depth
        for s in reversed(range(cfg.depth)):
            g = ops.relu(self._conv(f"dec{s}.up", ops.upsample2d(h, 2, "nearest")))
            skip = skips[s]
            if cfg.gate_mode == "classic":
                skip, a = classic_gate(skip, g, self.gates[s])
                attn[s] = a
                diags[s] = {"alpha": a}
            elif cfg.gate_mode == "chanvese":
                skip, z, d = cv_attention_gate(skip, g, img01, self.gates[s], cfg.gate)
                attn[s] = z
                diags[s] = {**d, "zeta": z}
            h = self._double(f"dec{s}", ops.concat([skip, g], axis=1))
        logits = self._conv("final", h, padding=0)
        maps = [a for a in attn if a is not None]
        if return_diagnostics:
            return logits, maps, [d for d in diags if d is not None]
        return logits, maps

    __call__ = forward

    def param_count(self) -> int:
        return self.params.count()


def build(cfg: UNetConfig) -> Model:
    store = ParamStore(seed=cfg.seed, precision=cfg.precision)
    C = cfg.channels

    def conv(name, ci, co, k=3):
        store.uniform_fan_in(f"{name}.w", (co, ci, k, k))
        store.zeros(f"{name}.b", (co,))

    for s in range(cfg.depth):
        conv(f"enc{s}.conv1", cfg.in_channels if s == 0 else C(s - 1), C(s))
        conv(f"enc{s}.conv2", C(s), C(s))
    conv("bottom.conv1", C(cfg.depth - 1), C(cfg.depth))
    conv("bottom.conv2", C(cfg.depth), C(cfg.depth))
    for s in reversed(range(cfg.depth)):
        conv(f"dec{s}.up", C(s + 1), C(s))
        conv(f"dec{s}.conv1", 2 * C(s), C(s))
        conv(f"dec{s}.conv2", C(s), C(s))
    conv("final", C(0), cfg.out_channels, k=1)

    model = Model(cfg, store)
    for s in range(cfg.depth):
        if cfg.gate_mode == "classic":
            model.gates.append(init_classic_gate(store, f"gate{s}", C(s), C(s), cfg.f_int(s)))
        elif cfg.gate_mode == "chanvese":
            model.gates.append(init_cv_gate(store, f"gate{s}", C(s), C(s), cfg.f_int(s)))
    return model


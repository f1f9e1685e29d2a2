from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class OptimState:
    """AdamW state; moments are keyed by parameter position."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    weight_decay: float = 1e-2
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params: list[Tensor], grads: list[np.ndarray], st: OptimState, names: list[str] | None = None) -> None:
    """In-place decoupled-weight-decay Adam update.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for k, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            label = names[k] if names else f"#{k}"
            raise NonFiniteError(f"non-finite gradient for parameter {label}")
    if not st.m:
        st.m = [np.zeros_like(p.data) for p in params]
        st.v = [np.zeros_like(p.data) for p in params]
    st.t += 1
    b1, b2 = st.beta1, st.beta2
    c1 = 1.0 - b1**st.t
    c2 = 1.0 - b2**st.t
    for p, g, m, v in zip(params, grads, st.m, st.v):
        g = g.astype(p.dtype, copy=False)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + st.eps_opt) + st.weight_decay * p.data
        p.data = (p.data - st.lr * update).astype(p.dtype, copy=False)

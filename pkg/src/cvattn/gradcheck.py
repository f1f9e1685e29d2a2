"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import BranchLog, GradientTape, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a, n = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), 1e-8)


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    indices: Sequence[np.ndarray] | None = None,
    branch_aware: bool = False,
    stats: dict | None = None,
) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f`` maps the tensor(s) ``x`` to a scalar.  All inputs must be f64.  With
    ``indices`` (one array of flat indices per input) only those coordinates
    are perturbed.  Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.

    ``branch_aware`` handles piecewise-smooth functions (relu, max pooling):
    each evaluation records which branch every such primitive took.  If the
    branches at ``x + h`` or ``x - h`` differ from those at ``x``, a kink lies
    inside the stencil and the central difference mixes two slopes.  The step
    is then shrunk (h/10, h/100, h/1000) until at least one side stays on the
    branches of ``x``, and the difference on that side is used; if none does,
    the central value at ``h`` is kept.  The count of such coordinates goes to
    ``stats["kinks"]``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise TypeError("grad_check needs f64 inputs")
        t.requires_grad = True
        t.grad = None
    with GradientTape() as tape:
        out = f(*xs)
    analytic = tape.backward(out, xs)

    worst = 0.0
    kinks = 0

    def evaluate():
        if not branch_aware:
            return f(*xs).item(), None
        with BranchLog() as log:
            v = f(*xs).item()
        return v, log.signature()

    f0, sig0 = evaluate()
    for k, t in enumerate(xs):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size) if indices is None else np.asarray(indices[k])
        num = np.empty(len(idx))
        a = analytic[k].reshape(-1)[idx]
        for m, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp, sp = evaluate()
            flat[i] = orig - h
            fm, sm = evaluate()
            flat[i] = orig
            num[m] = (fp - fm) / (2.0 * h)
            if branch_aware and (sp != sig0 or sm != sig0):
                kinks += 1
                for hs in (h, h / 10, h / 100, h / 1000):
                    if hs != h:
                        flat[i] = orig + hs
                        fp, sp = evaluate()
                        flat[i] = orig - hs
                        fm, sm = evaluate()
                        flat[i] = orig
                    if sp == sig0 and sm == sig0:
                        num[m] = (fp - fm) / (2.0 * hs)
                    elif sm == sig0:
                        num[m] = (f0 - fm) / hs
                    elif sp == sig0:
                        num[m] = (fp - f0) / hs
                    else:
                        continue
                    break
        if len(idx):
            worst = max(worst, float(relative_error(a, num).max()))
    for t in xs:
        t.grad = None
    if stats is not None:
        stats["kinks"] = kinks
    return worst


def weighted_sum(t: Tensor, seed: int = 0) -> Tensor:
    """sum(t * r) for a fixed random r; a scalar probe that exercises every output."""
    r = np.random.default_rng(seed).uniform(0.5, 1.5, size=t.shape)
    return (t * Tensor(r.astype(t.dtype))).sum()

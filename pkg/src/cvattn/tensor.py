"""Dense tensors with tape-based reverse-mode differentiation.

Layout convention for image tensors is ``(N, C, H, W)``.  Tensors are treated
as immutable values: primitives never modify their inputs in place.

Differentiation is explicit.  Operations are recorded only while a
:class:`GradientTape` is active and at least one input requires a gradient::

    with GradientTape() as tape:
        loss = (x * x).sum()
    (gx,) = tape.backward(loss, [x])

Leaf gradients *accumulate* in ``Tensor.grad``: running ``backward`` twice on
the same tape without :meth:`GradientTape.zero_grad` doubles them.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf from its inputs."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested primitive."""


_TAPES: list["GradientTape"] = []


def _active_tape() -> "GradientTape | None":
    return _TAPES[-1] if _TAPES else None


# Piecewise primitives (relu, max pooling) report which branch they took
# while a BranchLog is open; gradient checks use it to spot kink crossings.
_BRANCH_LOGS: list["BranchLog"] = []


class BranchLog:
    def __init__(self):
        self.entries: list[bytes] = []

    def __enter__(self) -> "BranchLog":
        _BRANCH_LOGS.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _BRANCH_LOGS.remove(self)

    def signature(self) -> tuple[bytes, ...]:
        return tuple(self.entries)


def log_branch(decision: np.ndarray) -> None:
    if _BRANCH_LOGS:
        _BRANCH_LOGS[-1].entries.append(np.ascontiguousarray(decision).tobytes())


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_recorded", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._recorded = False
        self.name = name

    # --- metadata -----------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # --- operator sugar -----------------------------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scalar_mul(self, other)
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scalar_mul(self, 1.0 / other)
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.scalar_mul(self, -1.0)

    def sum(self, axes=None, keepdims: bool = False):
        from . import ops
        return ops.reduce(self, "sum", axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False):
        from . import ops
        return ops.reduce(self, "mean", axes, keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class Function:
    """A differentiable primitive.

    Subclasses implement ``forward(*arrays, **kw) -> ndarray`` and
    ``backward(grad) -> tuple`` of input gradients (``None`` for inputs that
    need none).  Anything the backward pass needs is stashed on ``self``.
    """

    check_finite = True

    def forward(self, *arrays, **kwargs):  # pragma: no cover - interface
        raise NotImplementedError

    def backward(self, grad):  # pragma: no cover - interface
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = [as_tensor(t) for t in inputs]
        fn = cls()
        out_data = fn.forward(*(t.data for t in tensors), **kwargs)
        if fn.check_finite and not np.all(np.isfinite(out_data)):
            raise NonFiniteError(f"{cls.__name__} produced non-finite values")
        out = Tensor(out_data)
        tape = _active_tape()
        if tape is not None and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            out._recorded = True
            fn.inputs = tensors
            tape._record(fn, tensors, out)
        return out


class GradientTape:
    """Ordered record of the primitives executed while it is active."""

    def __init__(self):
        self.nodes: list[tuple[Function, list[Tensor], Tensor]] = []

    def __enter__(self) -> "GradientTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def _record(self, fn: Function, inputs: list[Tensor], out: Tensor) -> None:
        self.nodes.append((fn, inputs, out))

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, params: Sequence[Tensor] | None = None) -> list[np.ndarray] | None:
        """Propagate d(loss) back through the recorded nodes in reverse order.

        Leaf tensors (``requires_grad`` and not produced on this tape)
        accumulate into ``.grad``.  When ``params`` is given, their gradients
        are returned in that order (zeros for parameters the loss does not
        reach).
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if not loss._recorded and loss.requires_grad:
            _accumulate(loss, grads.pop(id(loss)))
        for fn, inputs, out in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn.backward(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise ShapeError(f"{type(fn).__name__} backward returned {gi.shape} for input {t.shape}")
                if t._recorded:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
                else:
                    _accumulate(t, gi)
        if params is None:
            return None
        return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    def zero_grad(self, params: Iterable[Tensor]) -> None:
        for p in params:
            p.grad = None

    def reset(self) -> None:
        self.nodes.clear()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = g.astype(t.dtype, copy=False)
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor, tape: GradientTape, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Functional form of :meth:`GradientTape.backward`."""
    return tape.backward(loss, params)

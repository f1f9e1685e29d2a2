"""Named, ordered parameter collections with seeded initialisation."""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from .tensor import Tensor

DTYPES = {"f32": np.float32, "f64": np.float64}


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; use 'f32' or 'f64'") from None
    return np.dtype(precision)


class ParamStore:
    """Insertion-ordered mapping ``name -> Tensor``.

    Each parameter draws from its own generator seeded by ``(seed, crc32(name))``
    so adding parameters never perturbs the values of existing ones.
    """

    def __init__(self, seed: int = 0, precision="f32"):
        self.seed = int(seed)
        self.dtype = resolve_dtype(precision)
        self._params: dict[str, Tensor] = {}

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def uniform_fan_in(self, name: str, shape: tuple[int, ...]) -> Tensor:
        """He-uniform init: U(-b, b) with b = sqrt(6 / fan_in), fan_in = prod(shape[1:])."""
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        return self.add(name, self._rng(name).uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self.add(name, np.zeros(shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def count(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for k, t in self._params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"parameter {k}: shape {state[k].shape} != {t.shape}")
            t.data = np.asarray(state[k], dtype=self.dtype).copy()

    def astype(self, precision) -> None:
        self.dtype = resolve_dtype(precision)
        for t in self._params.values():
            t.data = t.data.astype(self.dtype)
            t.grad = None

"""Named registry of learnable tensors."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


class ModelParams:
    """Ordered name -> Tensor map; every entry is a gradient leaf."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(np.ascontiguousarray(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def uniform(self, name: str, shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        return self.add(name, rng.uniform(-bound, bound, size=shape))

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

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def names(self) -> list[str]:
        return list(self._params)

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self._params.items() if k.startswith(prefix)}

    def count(self) -> int:
        return sum(p.size for p in self._params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(values)
        extra = set(values) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, v in values.items():
            p = self._params[k]
            if tuple(v.shape) != p.shape:
                raise ValueError(f"{k}: shape {tuple(v.shape)} != {p.shape}")
            p.data[...] = v

    def sgd_step(self, lr: float, momentum: float = 0.0, velocity: dict | None = None) -> None:
        for name, p in self._params.items():
            if p.grad is None:
                continue
            if momentum:
                v = velocity.setdefault(name, np.zeros_like(p.data))
                v *= momentum
                v += p.grad
                p.data -= lr * v
            else:
                p.data -= lr * p.grad

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float((p.data * p.data).sum()) for p in self._params.values())))

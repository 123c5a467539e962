"""Named parameter containers and initialisers shared by the models."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class ParamSet:
    """Ordered name -> Tensor mapping; names double as checkpoint keys."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
        missing = [k for k in self.params if prefix + k not in arrays]
        if missing:
            raise KeyError(f"checkpoint lacks parameters {missing[:5]}")
        for k, t in self.params.items():
            arr = np.asarray(arrays[prefix + k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"parameter {k!r}: checkpoint shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def zero_(self) -> None:
        for t in self.params.values():
            t.data = np.zeros(t.shape)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = ad.matmul(x, w)
    return y if b is None else ad.add(y, b)

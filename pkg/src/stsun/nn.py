"""Parameterised building blocks registered into a ParameterStore."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ParameterStore, Tensor


class Linear:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int,
                 bias: bool = True, std: float = 0.02, zero: bool = False):
        self.d_in, self.d_out = d_in, d_out
        if zero:
            self.weight = store.zeros(f"{name}.weight", (d_in, d_out))
        else:
            self.weight = store.normal(f"{name}.weight", (d_in, d_out), std=std)
        self.bias = store.zeros(f"{name}.bias", (d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, d: int):
        self.gamma = store.ones(f"{name}.gamma", (d,))
        self.beta = store.zeros(f"{name}.beta", (d,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta)


class MLP:
    """Linear -> GELU -> Linear; the second projection starts at zero."""

    def __init__(self, store: ParameterStore, name: str, d: int, ratio: int = 4):
        self.fc1 = Linear(store, f"{name}.fc1", d, d * ratio)
        self.fc2 = Linear(store, f"{name}.fc2", d * ratio, d, zero=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def sinusoidal_encoding(n: int, dim: int) -> np.ndarray:
    """Standard sin/cos positional table of shape (n, dim)."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(dim)[None, :]
    rate = np.power(10000.0, -(2 * (i // 2)) / dim)
    ang = pos * rate
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))

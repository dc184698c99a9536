"""Affine layers and the parameter initialiser shared by every block."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, linear, relu


@dataclass
class Linear:
    weight: Tensor  # in x out
    bias: Tensor | None = None

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ValueError(f"expected {self.in_features} input channels, got {x.shape[-1]}")
        return linear(x, self.weight, self.bias)

    def parameters(self, prefix: str = ""):
        yield f"{prefix}weight", self.weight
        if self.bias is not None:
            yield f"{prefix}bias", self.bias

    @property
    def num_parameters(self) -> int:
        return self.weight.data.size + (0 if self.bias is None else self.bias.data.size)


INIT_GAIN = math.sqrt(6.0)


def init_linear(
    rng: np.random.Generator, fan_in: int, fan_out: int, bias: bool = True, dtype=np.float64, gain: float | None = None
) -> Linear:
    """Weights ~ U(-gain/sqrt(fan_in), gain/sqrt(fan_in)), biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(fan_in)
    wb = (INIT_GAIN if gain is None else gain) * bound
    w = Tensor(rng.uniform(-wb, wb, size=(fan_in, fan_out)).astype(dtype), requires_grad=True)
    b = Tensor(rng.uniform(-bound, bound, size=(fan_out,)).astype(dtype), requires_grad=True) if bias else None
    return Linear(w, b)


def zero_linear(fan_in: int, fan_out: int, bias: bool = True) -> Linear:
    return Linear(
        Tensor(np.zeros((fan_in, fan_out)), requires_grad=True),
        Tensor(np.zeros(fan_out), requires_grad=True) if bias else None,
    )


@dataclass
class MLP2:
    """Two affine layers with a ReLU between them."""

    first: Linear
    second: Linear

    def __call__(self, x: Tensor) -> Tensor:
        return self.second(relu(self.first(x)))

    def parameters(self, prefix: str = ""):
        yield from self.first.parameters(f"{prefix}0.")
        yield from self.second.parameters(f"{prefix}1.")

    @classmethod
    def init(cls, rng, c_in: int, c_hidden: int, c_out: int, dtype=np.float64) -> "MLP2":
        return cls(init_linear(rng, c_in, c_hidden, dtype=dtype), init_linear(rng, c_hidden, c_out, dtype=dtype))

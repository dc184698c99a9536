"""Feature disparity attention for the decoder.

Given decoder features ``y1`` and cached encoder features ``y2`` at the same
density, the block attends over the disparity ``d = y2 - y1``::

    A    = row_softmax((d Wq + bq)(d Wk + bk)^T / sqrt(Ca))
    core = (I - A) d
    out  = relu(core Wo) + y1

``Wo`` carries no bias, so zero disparity passes ``y1`` through unchanged.
Because every row of ``A`` sums to one, ``I - A`` annihilates features that
are constant over points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layers import Linear, init_linear
from .tensor import Tensor, add, matmul, relu, scale, softmax, sub, transpose


@dataclass
class FDCParams:
    w_q: Linear
    w_k: Linear
    w_o: Linear

    def __post_init__(self):
        if self.w_o.bias is not None:
            raise ValueError("the output projection must be bias-free")
        c = self.w_q.in_features
        if self.w_k.in_features != c or self.w_k.out_features != self.w_q.out_features:
            raise ValueError("query and key projections must share shapes")
        if (self.w_o.in_features, self.w_o.out_features) != (c, c):
            raise ValueError("output projection must map C -> C")

    @property
    def channels(self) -> int:
        return self.w_q.in_features

    @property
    def attn_channels(self) -> int:
        return self.w_q.out_features

    def parameters(self, prefix: str = ""):
        yield from self.w_q.parameters(f"{prefix}q.")
        yield from self.w_k.parameters(f"{prefix}k.")
        yield from self.w_o.parameters(f"{prefix}o.")

    @classmethod
    def init(cls, rng, channels: int, attn_channels: int, dtype=np.float64) -> "FDCParams":
        return cls(
            w_q=init_linear(rng, channels, attn_channels, dtype=dtype),
            w_k=init_linear(rng, channels, attn_channels, dtype=dtype),
            w_o=init_linear(rng, channels, channels, bias=False, dtype=dtype),
        )


def fdc_attention_matrix(params: FDCParams, d: Tensor) -> Tensor:
    """N x N row-stochastic attention over the disparity signal."""
    if d.ndim != 2 or d.shape[0] < 1:
        raise ValueError(f"disparity must be N x C with N >= 1, got {d.shape}")
    q = params.w_q(d)
    k = params.w_k(d)
    logits = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(params.attn_channels))
    return softmax(logits, axis=-1)


def laplacian_apply(attn: Tensor, d: Tensor) -> Tensor:
    """``(I - A) d`` without materialising the identity."""
    return sub(d, matmul(attn, d))


def fdc_forward(params: FDCParams, y1: Tensor, y2: Tensor) -> Tensor:
    if y1.shape != y2.shape:
        raise ValueError(f"y1 {y1.shape} and y2 {y2.shape} must share a shape")
    if y1.shape[-1] != params.channels:
        raise ValueError(f"features have {y1.shape[-1]} channels, block expects {params.channels}")
    d = sub(y2, y1)
    attn = fdc_attention_matrix(params, d)
    core = laplacian_apply(attn, d)
    return add(relu(params.w_o(core)), y1)

"""Adjacency attention: learned relative-position encoding and the vector
attention aggregation over k-nearest neighbourhoods used by the encoder.

For query point ``i`` with neighbours ``j``::

    delta_ij = ape(p_i - p_j)
    logits_j = gamma(phi(x_i) - psi(x_j) + delta_ij)      # one logit per channel
    y_i      = sum_j softmax_j(logits)_j * (alpha(x_j) + delta_ij)

The softmax runs over the neighbour axis independently for every channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import NeighborhoodIndex, farthest_point_sample, group_features, knn_query
from .layers import MLP2, Linear, init_linear
from .tensor import Tensor, add, mul, relu, softmax, sub, take, tsum


@dataclass
class APEParams:
    """Relative-position encoder: 3 -> C' -> C' with a ReLU in between."""

    mlp: MLP2

    @property
    def out_channels(self) -> int:
        return self.mlp.second.out_features

    def parameters(self, prefix: str = ""):
        yield from self.mlp.parameters(prefix)

    @classmethod
    def init(cls, rng, channels: int, dtype=np.float64) -> "APEParams":
        return cls(MLP2.init(rng, 3, channels, channels, dtype=dtype))


@dataclass
class AAAParams:
    phi: Linear
    psi: Linear
    alpha: Linear
    gamma: MLP2
    parallel_mlp: Linear

    def __post_init__(self):
        c_in, c_out = self.phi.in_features, self.phi.out_features
        for name in ("psi", "alpha", "parallel_mlp"):
            lin = getattr(self, name)
            if (lin.in_features, lin.out_features) != (c_in, c_out):
                raise ValueError(f"{name} maps {lin.in_features}->{lin.out_features}, expected {c_in}->{c_out}")
        if self.gamma.first.in_features != c_out or self.gamma.second.out_features != c_out:
            raise ValueError("gamma must map C' -> C'")

    @property
    def in_channels(self) -> int:
        return self.phi.in_features

    @property
    def out_channels(self) -> int:
        return self.phi.out_features

    def parameters(self, prefix: str = ""):
        for name in ("phi", "psi", "alpha"):
            yield from getattr(self, name).parameters(f"{prefix}{name}.")
        yield from self.gamma.parameters(f"{prefix}gamma.")
        yield from self.parallel_mlp.parameters(f"{prefix}mlp.")

    @classmethod
    def init(cls, rng, c_in: int, c_out: int, dtype=np.float64) -> "AAAParams":
        return cls(
            phi=init_linear(rng, c_in, c_out, dtype=dtype),
            psi=init_linear(rng, c_in, c_out, dtype=dtype),
            alpha=init_linear(rng, c_in, c_out, dtype=dtype),
            gamma=MLP2.init(rng, c_out, c_out, c_out, dtype=dtype),
            parallel_mlp=init_linear(rng, c_in, c_out, dtype=dtype),
        )


@dataclass(frozen=True)
class AAAStageConfig:
    in_channels: int
    out_channels: int
    k: int = 16
    reduction_ratio: float = 0.5

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.k) < 1:
            raise ValueError("channels and k must be >= 1")
        if not 0 < self.reduction_ratio <= 1:
            raise ValueError(f"reduction_ratio must lie in (0, 1], got {self.reduction_ratio}")

    def sample_count(self, n: int) -> int:
        # round before ceil so that e.g. 0.1 * 30 does not become 4
        return max(1, math.ceil(round(n * self.reduction_ratio, 9)))


@dataclass(frozen=True)
class StageGeometry:
    """Everything about a stage that depends on positions only."""

    sampled: np.ndarray  # M indices into the input point set
    index: NeighborhoodIndex  # M x k neighbours drawn from the input point set
    rel_pos: np.ndarray  # M x k x 3, p_i - p_j


def stage_geometry(pos: np.ndarray, m: int, k: int) -> StageGeometry:
    sampled = farthest_point_sample(pos, m, start=0)
    # deep stages of small clouds can hold fewer than k points
    index = knn_query(pos, pos[sampled], min(k, len(pos)))
    rel = pos[sampled][:, None, :] - pos[index.indices]
    return StageGeometry(sampled, index, rel)


def encode_adjacent_position(ape: APEParams, rel_pos) -> Tensor:
    """Map Q x k x 3 relative positions to Q x k x C' encodings."""
    if not isinstance(rel_pos, Tensor):
        rel_pos = Tensor(np.asarray(rel_pos, dtype=ape.mlp.first.weight.dtype))
    if rel_pos.shape[-1] != 3:
        raise ValueError(f"relative positions must have 3 components, got {rel_pos.shape}")
    return ape.mlp(rel_pos)


def aaa_forward(
    params: AAAParams,
    ape: APEParams,
    x: Tensor,
    pos: np.ndarray,
    queries: np.ndarray,
    index: NeighborhoodIndex,
    rel_pos: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Vector attention over each query's neighbourhood; returns Q x C'.

    ``queries`` index the rows of ``x``/``pos`` that act as centres and
    ``index`` holds their neighbours in the same point set.
    """
    queries = np.asarray(queries, dtype=np.int64)
    if x.shape[-1] != params.in_channels:
        raise ValueError(f"features have {x.shape[-1]} channels, block expects {params.in_channels}")
    if ape.out_channels != params.out_channels:
        raise ValueError("position encoding width differs from attention width")
    if index.query_count != len(queries):
        raise ValueError("one neighbourhood row per query required")
    if index.k < 1:
        raise ValueError("empty neighbourhood")
    if rel_pos is None:
        pos = np.asarray(pos, dtype=np.float64)
        rel_pos = pos[queries][:, None, :] - pos[index.indices]
    delta = encode_adjacent_position(ape, rel_pos.astype(x.dtype, copy=False))
    # transform once per point, then gather: same values as transforming gathered rows
    centre = take(params.phi(x), queries)  # Q x C'
    keys = group_features(params.psi(x), index)  # Q x k x C'
    values = group_features(params.alpha(x), index)
    logits = params.gamma(add(sub(_unsqueeze1(centre), keys), delta))
    weights = softmax(logits, axis=1)
    out = tsum(mul(weights, add(values, delta)), axis=1)
    return (out, weights) if return_weights else out


def _unsqueeze1(t: Tensor) -> Tensor:
    return t.reshape(t.shape[0], 1, t.shape[1])


def aaa_stage(
    cfg: AAAStageConfig,
    params: AAAParams,
    ape: APEParams,
    features: Tensor,
    pos: np.ndarray,
    geometry: StageGeometry | None = None,
):
    """Sample centroids, attend over their neighbourhoods and fuse with the
    pointwise branch.  Returns ``(sampled_pos, out_features, sampled_indices)``.
    """
    pos = np.asarray(pos, dtype=np.float64)
    if not isinstance(features, Tensor):
        features = Tensor(features)
    if geometry is None:
        geometry = stage_geometry(pos, cfg.sample_count(len(pos)), cfg.k)
    attended = aaa_forward(params, ape, features, pos, geometry.sampled, geometry.index, geometry.rel_pos)
    pointwise = params.parallel_mlp(take(features, geometry.sampled))
    return pos[geometry.sampled], relu(add(attended, pointwise)), geometry.sampled

"""Finite-difference checks for every differentiable operation and a tiny network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AAAParams, AAAStageConfig, APEParams, aaa_forward, aaa_stage, encode_adjacent_position, stage_geometry
from .disparity import FDCParams, fdc_forward
from .geometry import ObjectRecord, PointCloud, group_features, interpolate_features, interpolation_weights, knn_query
from .network import ModelConfig, build_network, network_forward, plan_scene
from .tensor import (
    Tensor,
    bce_with_logits,
    concat,
    cross_entropy,
    div,
    exp,
    grad_check,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    smooth_l1,
    softmax,
    sub,
    take,
    tmax,
    transpose,
    tsum,
)
from .training import scene_loss

TOLERANCE = 1e-4


@dataclass(frozen=True)
class GradResult:
    name: str
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return x + np.where(x >= 0, margin, -margin)


def _op_cases(rng):
    # constants are drawn once, outside the closures, so every call sees the same function
    w34, b14 = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(1, 4)))
    w33, w142 = Tensor(rng.normal(size=(3, 3))), Tensor(rng.normal(size=(1, 4, 2)))
    w234, w43 = Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(4, 3)))
    w224, w38 = Tensor(rng.normal(size=(2, 2, 4))), Tensor(rng.normal(size=(3, 8)))
    yield "add", lambda t: tsum(mul(t + b14, w34)), (3, 4)
    yield "sub", lambda t: tsum(mul(sub(Tensor(np.ones(4)), t), t)), (3, 4)
    yield "mul", lambda t: tsum(mul(mul(t, t), w34)), (3, 4)
    yield "div", lambda t: tsum(div(w34, mul(t, t) + Tensor(1.0))), (3, 4)
    yield "scale", lambda t: tsum(mul(scale(t, -1.5), w34)), (3, 4)
    yield "relu", lambda t: tsum(mul(relu(t), w34)), (3, 4)
    yield "sigmoid", lambda t: tsum(mul(sigmoid(t), w34)), (3, 4)
    yield "exp", lambda t: tsum(mul(exp(t), w34)), (3, 4)
    yield "log", lambda t: tsum(mul(log(mul(t, t)), w34)), (3, 4)
    yield "matmul", lambda t: tsum(mul(matmul(t, transpose(t)), w33)), (3, 4)
    yield "batched matmul", lambda t: tsum(matmul(t, w142)), (2, 3, 4)
    yield "softmax", lambda t: tsum(mul(softmax(t, axis=-1), w34)), (3, 4)
    yield "softmax axis 1", lambda t: tsum(mul(softmax(t, axis=1), w234)), (2, 3, 4)
    yield "log_softmax", lambda t: tsum(mul(log_softmax(t), w34)), (3, 4)
    yield "sum", lambda t: tsum(mul(tsum(t, axis=0), tsum(t, axis=0))), (3, 4)
    yield "mean", lambda t: tsum(mul(mean(t, axis=1), Tensor(np.arange(3.0)))), (3, 4)
    yield "reshape", lambda t: tsum(mul(reshape(t, (4, 3)), w43)), (3, 4)
    yield "take", lambda t: tsum(mul(take(t, [[0, 2], [2, 2]]), w224)), (3, 4)
    yield "concat", lambda t: tsum(mul(concat([t, mul(t, t)], axis=-1), w38)), (3, 4)
    yield "slice", lambda t: tsum(mul(t[:, 1:3], t[:, 0:2])), (3, 4)
    yield "smooth_l1", lambda t: tsum(smooth_l1(t, np.full((3, 4), 0.2))), (3, 4)
    yield "bce_with_logits", lambda t: tsum(bce_with_logits(t, (np.arange(12) % 2).reshape(3, 4))), (3, 4)
    yield "cross_entropy", lambda t: cross_entropy(t, [0, 3, 1]), (3, 4)


def _max_case(rng):
    x = rng.normal(size=(3, 4)) + np.arange(3.0)[:, None] * 4  # well separated maxima
    w = Tensor(rng.normal(size=4))
    return "max", lambda t: tsum(mul(tmax(t, axis=0), w)), Tensor(x)


def _smooth_l1_safe(x):
    # keep |pred - target| away from the quadratic/linear switch at 1
    near = np.abs(np.abs(x - 0.2) - 1.0) < 0.05
    return x + near * 0.1


def run_gradient_suite(seed: int = 0) -> list[GradResult]:
    """Relative finite-difference error of every differentiable building block."""
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, shape in _op_cases(rng):
        x = _away_from_zero(rng, shape)
        if name == "smooth_l1":
            x = _smooth_l1_safe(x)
        results.append(GradResult(name, grad_check(fn, Tensor(x))))
    name, fn, x = _max_case(rng)
    results.append(GradResult(name, grad_check(fn, x)))

    # geometry
    src, qry = rng.normal(size=(8, 3)), rng.normal(size=(5, 3))
    index = knn_query(src, qry, 3)
    g = Tensor(rng.normal(size=(5, 3, 2)))
    results.append(GradResult("group_features", grad_check(lambda t: tsum(mul(group_features(t, index), g)), Tensor(rng.normal(size=(8, 2))))))
    weights = interpolation_weights(src, qry, 3)
    h = Tensor(rng.normal(size=(5, 2)))
    results.append(
        GradResult(
            "interpolate_features",
            grad_check(lambda t: tsum(mul(interpolate_features(None, t, None, weights=weights), h)), Tensor(rng.normal(size=(8, 2)))),
        )
    )

    # attention
    ape = APEParams.init(rng, 4)
    params = AAAParams.init(rng, 3, 4)
    rel = Tensor(rng.normal(size=(2, 3, 3)))
    wr = Tensor(rng.normal(size=(2, 3, 4)))
    results.append(GradResult("encode_adjacent_position", grad_check(lambda t: tsum(mul(encode_adjacent_position(ape, t), wr)), rel)))
    pos, feats = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
    geo = stage_geometry(pos, 5, 4)
    wa = Tensor(rng.normal(size=(5, 4)))
    leaves = [Tensor(feats)] + [p for _, p in params.parameters()] + [p for _, p in ape.parameters()]
    results.append(
        GradResult(
            "aaa_forward",
            grad_check(lambda ts: tsum(mul(aaa_forward(params, ape, ts[0], pos, geo.sampled, geo.index), wa)), leaves),
        )
    )
    cfg = AAAStageConfig(3, 4, k=4, reduction_ratio=0.5)
    results.append(
        GradResult("aaa_stage", grad_check(lambda ts: tsum(mul(aaa_stage(cfg, params, ape, ts[0], pos, geo)[1], wa)), leaves))
    )

    # disparity
    fdc = FDCParams.init(rng, 4, 2)
    y1, y2 = Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(6, 4)))
    wf = Tensor(rng.normal(size=(6, 4)))
    leaves = [y1, y2] + [p for _, p in fdc.parameters()]
    results.append(GradResult("fdc_forward", grad_check(lambda ts: tsum(mul(fdc_forward(fdc, ts[0], ts[1]), wf)), leaves)))

    results.append(GradResult("tiny network", tiny_network_error(seed)))
    return results


def tiny_network_error(seed: int = 0) -> float:
    """Every parameter of a 3+2 network on 32 points with 8 input channels."""
    rng = np.random.default_rng(seed + 1)
    cfg = ModelConfig(
        num_aaa_stages=3, num_fdc_stages=2, in_channels=8, encoder_widths=(4, 6, 8), ks=(4, 4, 4),
        head="segmentation", num_classes=3, head_hidden=6, seed=seed,
    )
    model = build_network(cfg)
    pos = rng.normal(size=(32, 3))
    cloud = PointCloud(pos, rng.normal(size=(32, 8)), rng.integers(0, 3, size=32), [ObjectRecord(0, np.zeros(3), np.ones(3))], 3)
    plan = plan_scene(cfg, pos)
    return grad_check(lambda _: scene_loss(network_forward(model, cloud, plan), cloud), model.parameters())

"""Training loop, losses and evaluation metrics."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .attention import StageGeometry
from .geometry import ObjectRecord, PointCloud
from .network import HeadOutput, Model, ModelConfig, ScenePlan, plan_scene
from .scenes import scene_features
from .tensor import Tensor, add, backward, bce_with_logits, cross_entropy, mean, reshape, scale, smooth_l1, tsum

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    lr_step: int = 10
    lr_gamma: float = 0.5
    batch_size: int = 8
    weight_decay: float = 0.0
    grad_clip: float = 0.0  # global-norm clip, 0 disables
    objectness_weight: float = 1.0
    augment_yaw: bool = False  # random rotation about the vertical axis each epoch
    seed: int = 0

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_gamma ** (epoch // self.lr_step) if self.lr_step > 0 else self.lr

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "TrainConfig":
        types = {f.name: type(f.default) for f in fields(cls)}
        types["augment_yaw"] = lambda v: v.strip().lower() in ("1", "true", "yes")
        unknown = set(kv) - set(types)
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**{k: types[k](v) for k, v in kv.items()})


@dataclass
class RunReport:
    config: dict
    initial_loss: float
    epoch_losses: list[float] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    wall_time: float = 0.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, report: RunReport, last_good: dict[str, np.ndarray]):
        super().__init__(message)
        self.report = report
        self.last_good = last_good


class SGD:
    """Plain SGD with heavy-ball momentum."""

    def __init__(self, params: list[Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float, grad_clip: float = 0.0) -> float:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))
        factor = grad_clip / norm if grad_clip > 0 and norm > grad_clip else 1.0
        for p, g, v in zip(self.params, grads, self.velocity):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += factor * g
            p.data = p.data - (lr * v).astype(p.data.dtype, copy=False)
        return norm

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- losses -----------------------------------------------------------------


def background_label(cloud: PointCloud) -> int:
    return cloud.num_classes - 1


def scene_loss(out: HeadOutput, cloud: PointCloud, objectness_weight: float = 1.0) -> Tensor:
    if out.kind == "classification":
        return cross_entropy(reshape(out.logits, (1, -1)), [cloud.objects[0].class_id])
    if out.kind == "segmentation":
        return cross_entropy(out.logits, cloud.point_labels[out.point_indices])
    target = cloud.objects[0].weak_label
    center_loss = tsum(smooth_l1(out.center, target))
    inside = (cloud.point_labels[out.point_indices] != background_label(cloud)).astype(np.float64)
    obj_loss = mean(bce_with_logits(out.objectness, inside[:, None]))
    return add(center_loss, scale(obj_loss, objectness_weight))


def yaw_augment(cloud: PointCloud, plan: ScenePlan, theta: float) -> tuple[PointCloud, ScenePlan]:
    """Rotate a scene about the vertical axis through its centroid.

    Sampling and neighbourhoods depend only on distances, so the plan keeps
    its indices and weights and only its positions rotate.  Features that
    equal the centred positions are re-derived; any others are carried over.
    """
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    centroid = cloud.positions.mean(axis=0)
    move = lambda p: (p - centroid) @ rot.T + centroid
    pos = move(cloud.positions)
    feats = cloud.features
    if feats.shape == pos.shape and np.array_equal(feats, scene_features(cloud.positions)):
        feats = scene_features(pos)
    objects = [ObjectRecord(o.class_id, move(o.center), o.extent, move(o.weak_label)) for o in cloud.objects]
    rotated = PointCloud(pos, feats, cloud.point_labels, objects, cloud.num_classes)
    new_plan = ScenePlan(
        [move(p) for p in plan.level_pos],
        plan.level_ids,
        [StageGeometry(g.sampled, g.index, g.rel_pos @ rot.T) for g in plan.stages],
        plan.interp,
        plan.full_interp,
    )
    return rotated, new_plan


def prepare_plans(cfg: ModelConfig, scenes: list[PointCloud]) -> list[ScenePlan]:
    return [plan_scene(cfg, pc.positions) for pc in scenes]


def mean_loss(model: Model, scenes, plans, objectness_weight: float = 1.0) -> float:
    return float(np.mean([scene_loss(model(pc, pl), pc, objectness_weight).item() for pc, pl in zip(scenes, plans)]))


def train(
    model: Model,
    dataset: list[PointCloud],
    cfg: TrainConfig,
    plans: list[ScenePlan] | None = None,
    eval_set: list[PointCloud] | None = None,
    on_epoch=None,
) -> RunReport:
    """Minibatch SGD over ``dataset``; the report's trajectory depends only on seeds.

    ``on_epoch(epoch, report)`` is called after every epoch.
    """
    if not dataset:
        raise ValueError("empty training set")
    start = time.perf_counter()
    plans = plans or prepare_plans(model.cfg, dataset)
    params = model.parameters()
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    report = RunReport(
        config={"model": model.cfg.to_kv(), "train": asdict(cfg)},
        initial_loss=mean_loss(model, dataset, plans, cfg.objectness_weight),
        seed=cfg.seed,
    )
    last_good = {name: p.data.copy() for name, p in model.named_parameters()}
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        angles = rng.uniform(0, 2 * np.pi, len(dataset)) if cfg.augment_yaw else None
        lr = cfg.lr_at(epoch)
        total = 0.0
        for b in range(0, len(order), cfg.batch_size):
            batch = order[b : b + cfg.batch_size]
            opt.zero_grad()
            try:
                for i in batch:
                    cloud, plan = dataset[i], plans[i]
                    if angles is not None:
                        cloud, plan = yaw_augment(cloud, plan, angles[i])
                    loss = scene_loss(model(cloud, plan), cloud, cfg.objectness_weight)
                    total += loss.item()
                    backward(scale(loss, 1.0 / len(batch)), params)
                opt.step(lr, cfg.grad_clip)
                bad = not all(np.all(np.isfinite(p.data)) for p in params)
            except FloatingPointError:
                bad = True
            if bad or not np.isfinite(total):
                for name, p in model.named_parameters():
                    p.data = last_good[name].copy()
                report.wall_time = time.perf_counter() - start
                raise TrainingDiverged(f"loss diverged in epoch {epoch}", report, last_good)
        report.epoch_losses.append(total / len(dataset))
        last_good = {name: p.data.copy() for name, p in model.named_parameters()}
        log.info("epoch %d lr %.4g loss %.5f", epoch, lr, report.epoch_losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, report)
    if eval_set is not None:
        report.metrics = evaluate(model, eval_set)
    report.wall_time = time.perf_counter() - start
    return report


# -- metrics ----------------------------------------------------------------


def confusion_matrix(pred, truth, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    return cm


def mean_iou(cm: np.ndarray) -> float:
    """Mean IoU over classes that occur in either prediction or truth."""
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = union > 0
    return float(np.mean(tp[present] / union[present])) if present.any() else 1.0


def center_metrics(pred_centers, true_centers, max_extents, hit_fraction: float = 0.25) -> dict:
    """Mean Euclidean center error and the fraction within ``hit_fraction * max extent``."""
    err = np.linalg.norm(np.asarray(pred_centers) - np.asarray(true_centers), axis=1)
    hits = err <= hit_fraction * np.asarray(max_extents)
    return {"center_error": float(err.mean()), "median_center_error": float(np.median(err)), "accuracy": float(hits.mean())}


def evaluate(model, dataset: list[PointCloud], plans: list[ScenePlan] | None = None) -> dict:
    """Task metrics; weak-center error is measured against the true centers."""
    if not dataset:
        raise ValueError("empty evaluation set")
    cfg = model.cfg
    plans = plans or prepare_plans(cfg, dataset)
    outs = [model(pc, pl) for pc, pl in zip(dataset, plans)]
    if cfg.head == "classification":
        pred = [int(np.argmax(o.logits.data)) for o in outs]
        truth = [pc.objects[0].class_id for pc in dataset]
        cm = confusion_matrix(pred, truth, cfg.num_classes)
        return {"accuracy": float(np.trace(cm) / cm.sum()), "confusion": cm.tolist()}
    if cfg.head == "segmentation":
        cm = np.zeros((cfg.num_classes, cfg.num_classes), dtype=np.int64)
        for o, pc in zip(outs, dataset):
            cm += confusion_matrix(np.argmax(o.logits.data, axis=1), pc.point_labels[o.point_indices], cfg.num_classes)
        return {"accuracy": float(np.trace(cm) / cm.sum()), "mean_iou": mean_iou(cm)}
    return center_metrics(
        [o.center.data for o in outs],
        [pc.objects[0].center for pc in dataset],
        [pc.objects[0].max_extent for pc in dataset],
    )

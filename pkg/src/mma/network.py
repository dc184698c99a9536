"""Encoder/decoder assembly, task heads and checkpoint files.

The encoder stacks attention stages, each halving (by default) the point
count and caching its output.  The decoder climbs back up: interpolate to
the next cached level, run a pointwise layer, then compare against the cached
features with the disparity block.  With ``a`` encoder and ``f`` decoder
stages the output lives at encoder level ``a - f``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .attention import AAAParams, AAAStageConfig, APEParams, StageGeometry, aaa_stage, stage_geometry
from .disparity import FDCParams, fdc_forward
from .geometry import NeighborhoodIndex, PointCloud, interpolate_features, interpolation_weights
from .layers import MLP2, Linear, init_linear
from .tensor import Tensor, add, div, mul, relu, reshape, sigmoid, take, tmax, tsum

HEADS = ("classification", "segmentation", "weak-center")
VARIANTS = ("mma", "mlp")
DEFAULT_WIDTHS = (32, 64, 128, 256, 256)


class ConfigError(ValueError):
    pass


def _tuple(v, cast):
    if isinstance(v, str):
        v = [x for x in v.split(",") if x.strip()]
    return tuple(cast(x) for x in v)


@dataclass(frozen=True)
class ModelConfig:
    num_aaa_stages: int = 4
    num_fdc_stages: int = 3
    in_channels: int = 3
    encoder_widths: tuple[int, ...] | None = None
    decoder_widths: tuple[int, ...] | None = None
    ks: tuple[int, ...] | None = None
    ratios: tuple[float, ...] | None = None
    head: str = "classification"
    num_classes: int = 3
    head_hidden: int = 64
    attn_div: int = 4
    interp_k: int = 3
    variant: str = "mma"
    seg_full_density: bool = False
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        n, f = self.num_aaa_stages, self.num_fdc_stages
        if n not in (3, 4, 5):
            raise ConfigError(f"num_aaa_stages must be 3, 4 or 5, got {n}")
        if f not in (2, 3, 4):
            raise ConfigError(f"num_fdc_stages must be 2, 3 or 4, got {f}")
        if f > n - 1:
            raise ConfigError(f"num_fdc_stages ({f}) must not exceed num_aaa_stages - 1 ({n - 1})")
        defaults = {
            "encoder_widths": DEFAULT_WIDTHS[:n],
            "ks": (16,) * n,
            "ratios": (0.5,) * n,
        }
        for name, default in defaults.items():
            value = getattr(self, name)
            cast = float if name == "ratios" else int
            object.__setattr__(self, name, default if value is None else _tuple(value, cast))
            if len(getattr(self, name)) != n:
                raise ConfigError(f"{name} needs {n} entries, got {len(getattr(self, name))}")
        if self.decoder_widths is None:
            dec = tuple(self.encoder_widths[n - 2 - s] for s in range(f))
        else:
            dec = _tuple(self.decoder_widths, int)
        object.__setattr__(self, "decoder_widths", dec)
        if len(dec) != f:
            raise ConfigError(f"decoder_widths needs {f} entries, got {len(dec)}")
        if min(self.encoder_widths + dec) < 1 or self.in_channels < 1:
            raise ConfigError("channel widths must be positive")
        if min(self.ks) < 1 or self.interp_k < 1:
            raise ConfigError("neighbourhood sizes must be positive")
        if not all(0 < r <= 1 for r in self.ratios):
            raise ConfigError("reduction ratios must lie in (0, 1]")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.num_classes < 1 or self.head_hidden < 1 or self.attn_div < 1:
            raise ConfigError("num_classes, head_hidden and attn_div must be positive")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def output_level(self) -> int:
        return self.num_aaa_stages - self.num_fdc_stages

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def stage_configs(self) -> list[AAAStageConfig]:
        chans = (self.in_channels,) + self.encoder_widths
        return [
            AAAStageConfig(chans[i], chans[i + 1], self.ks[i], self.ratios[i])
            for i in range(self.num_aaa_stages)
        ]

    def level_sizes(self, n: int) -> list[int]:
        sizes = [n]
        for sc in self.stage_configs():
            sizes.append(sc.sample_count(sizes[-1]))
        return sizes

    def to_kv(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out[f.name] = str(v)
        return out

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in kv.items():
            if key not in known:
                continue
            default = known[key].default
            if key in ("encoder_widths", "decoder_widths", "ks"):
                kwargs[key] = _tuple(raw, int)
            elif key == "ratios":
                kwargs[key] = _tuple(raw, float)
            elif key == "seg_full_density":
                kwargs[key] = raw.strip().lower() in ("1", "true", "yes")
            elif isinstance(default, int) and not isinstance(default, bool):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = raw.strip()
        return cls(**kwargs)


# -- model ----------------------------------------------------------------


@dataclass
class EncoderStage:
    cfg: AAAStageConfig
    ape: APEParams | None = None
    aaa: AAAParams | None = None
    mlp: MLP2 | None = None  # baseline variant: pointwise layers at the centroids

    def parameters(self, prefix: str):
        if self.mlp is not None:
            yield from self.mlp.parameters(f"{prefix}mlp.")
        else:
            yield from self.ape.parameters(f"{prefix}ape.")
            yield from self.aaa.parameters(f"{prefix}aaa.")


@dataclass
class DecoderStage:
    mlp: Linear
    align: Linear | None = None
    fdc: FDCParams | None = None

    def parameters(self, prefix: str):
        yield from self.mlp.parameters(f"{prefix}mlp.")
        if self.align is not None:
            yield from self.align.parameters(f"{prefix}align.")
        if self.fdc is not None:
            yield from self.fdc.parameters(f"{prefix}fdc.")


@dataclass
class Model:
    cfg: ModelConfig
    encoder: list[EncoderStage]
    decoder: list[DecoderStage]
    head: MLP2

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, st in enumerate(self.encoder):
            yield from st.parameters(f"enc{i}.")
        for i, st in enumerate(self.decoder):
            yield from st.parameters(f"dec{i}.")
        yield from self.head.parameters("head.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, cloud: PointCloud, plan: "ScenePlan | None" = None) -> "HeadOutput":
        return network_forward(self, cloud, plan)


def build_network(cfg: ModelConfig, seed: int | None = None) -> Model:
    """Fresh parameters for ``cfg``; every affine map uses :func:`init_linear`."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    dt = cfg.np_dtype
    encoder = []
    for sc in cfg.stage_configs():
        if cfg.variant == "mma":
            ape = APEParams.init(rng, sc.out_channels, dtype=dt)
            aaa = AAAParams.init(rng, sc.in_channels, sc.out_channels, dtype=dt)
            encoder.append(EncoderStage(sc, ape=ape, aaa=aaa))
        else:
            encoder.append(EncoderStage(sc, mlp=MLP2.init(rng, sc.in_channels, sc.out_channels, sc.out_channels, dtype=dt)))
    decoder = []
    width = cfg.encoder_widths[-1]
    for s, w in enumerate(cfg.decoder_widths):
        mlp = init_linear(rng, width, w, dtype=dt)
        if cfg.variant == "mma":
            cached = cfg.encoder_widths[cfg.num_aaa_stages - 2 - s]
            align = init_linear(rng, cached, w, dtype=dt) if cached != w else None
            fdc = FDCParams.init(rng, w, max(1, w // cfg.attn_div), dtype=dt)
            decoder.append(DecoderStage(mlp, align, fdc))
        else:
            decoder.append(DecoderStage(mlp))
        width = w
    out_dim = 4 if cfg.head == "weak-center" else cfg.num_classes
    head = MLP2.init(rng, width, cfg.head_hidden, out_dim, dtype=dt)
    if cfg.head == "weak-center":
        # start from the plain centroid with uniform objectness
        head.second.weight.data[:] = 0
        head.second.bias.data[:] = 0
    return Model(cfg, encoder, decoder, head)


def analytic_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count, independent of :func:`build_network`."""

    def lin(i, o, bias=True):
        return i * o + (o if bias else 0)

    total = 0
    chans = (cfg.in_channels,) + cfg.encoder_widths
    for c, c2 in zip(chans[:-1], chans[1:]):
        if cfg.variant == "mma":
            total += lin(3, c2) + lin(c2, c2)  # position encoder
            total += 3 * lin(c, c2) + 2 * lin(c2, c2) + lin(c, c2)
        else:
            total += lin(c, c2) + lin(c2, c2)
    width = cfg.encoder_widths[-1]
    for s, w in enumerate(cfg.decoder_widths):
        total += lin(width, w)
        if cfg.variant == "mma":
            cached = cfg.encoder_widths[cfg.num_aaa_stages - 2 - s]
            if cached != w:
                total += lin(cached, w)
            ca = max(1, w // cfg.attn_div)
            total += 2 * lin(w, ca) + lin(w, w, bias=False)
        width = w
    out_dim = 4 if cfg.head == "weak-center" else cfg.num_classes
    return total + lin(width, cfg.head_hidden) + lin(cfg.head_hidden, out_dim)


def baseline_config(cfg: ModelConfig, tolerance: float = 0.10) -> ModelConfig:
    """MLP-only variant of ``cfg`` whose widths are scaled to match its parameter budget."""
    target = analytic_parameter_count(replace(cfg, variant="mma"))
    best = None
    for step in range(50, 801):
        s = step / 100.0
        enc = tuple(max(1, round(w * s)) for w in cfg.encoder_widths)
        dec = tuple(max(1, round(w * s)) for w in cfg.decoder_widths)
        cand = replace(cfg, variant="mlp", encoder_widths=enc, decoder_widths=dec)
        gap = abs(analytic_parameter_count(cand) - target)
        if best is None or gap < best[0]:
            best = (gap, cand)
    gap, cand = best
    if gap > tolerance * target:
        raise ConfigError(f"no baseline within {tolerance:.0%} of {target} parameters")
    return cand


# -- forward pass ---------------------------------------------------------


@dataclass(frozen=True)
class ScenePlan:
    """Position-only precomputation for one scene under one config."""

    level_pos: list[np.ndarray]  # level 0 = input points
    level_ids: list[np.ndarray]  # indices of each level's points in the input cloud
    stages: list[StageGeometry]
    interp: list[tuple[NeighborhoodIndex, np.ndarray]]  # one per decoder stage
    full_interp: tuple[NeighborhoodIndex, np.ndarray] | None = None


def plan_scene(cfg: ModelConfig, positions: np.ndarray) -> ScenePlan:
    pos = np.asarray(positions, dtype=np.float64)
    if len(pos) < 2 ** cfg.num_aaa_stages:
        raise ValueError(f"need at least {2 ** cfg.num_aaa_stages} points for {cfg.num_aaa_stages} reductions, got {len(pos)}")
    level_pos, level_ids, stages = [pos], [np.arange(len(pos))], []
    for sc in cfg.stage_configs():
        geo = stage_geometry(level_pos[-1], sc.sample_count(len(level_pos[-1])), sc.k)
        stages.append(geo)
        level_pos.append(level_pos[-1][geo.sampled])
        level_ids.append(level_ids[-1][geo.sampled])
    interp = []
    for s in range(cfg.num_fdc_stages):
        coarse = level_pos[cfg.num_aaa_stages - s]
        fine = level_pos[cfg.num_aaa_stages - 1 - s]
        interp.append(interpolation_weights(coarse, fine, min(cfg.interp_k, len(coarse))))
    full = None
    if cfg.head == "segmentation" and cfg.seg_full_density and cfg.output_level > 0:
        coarse = level_pos[cfg.output_level]
        full = interpolation_weights(coarse, pos, min(cfg.interp_k, len(coarse)))
    return ScenePlan(level_pos, level_ids, stages, interp, full)


@dataclass
class HeadOutput:
    kind: str
    logits: Tensor | None = None  # classification: (K,), segmentation: (N', K)
    objectness: Tensor | None = None  # weak-center: (N', 1)
    offsets: Tensor | None = None  # weak-center: (N', 3)
    center: Tensor | None = None  # weak-center: (3,)
    positions: np.ndarray | None = None  # positions of the output-density points
    point_indices: np.ndarray | None = None  # their indices in the input cloud
    cache_sizes: list[int] = field(default_factory=list)


def encode(model: Model, features: Tensor, plan: ScenePlan) -> list[Tensor]:
    """Run the encoder; returns cached features for levels 1..num_aaa_stages."""
    cache = []
    x = features
    for lvl, (stage, geo) in enumerate(zip(model.encoder, plan.stages)):
        pos = plan.level_pos[lvl]
        if stage.mlp is not None:
            x = relu(stage.mlp(take(x, geo.sampled)))
        else:
            _, x, _ = aaa_stage(stage.cfg, stage.aaa, stage.ape, x, pos, geo)
        cache.append(x)
    return cache


def decode(model: Model, cache: list[Tensor], plan: ScenePlan) -> Tensor:
    cfg = model.cfg
    x = cache[-1]
    for s, stage in enumerate(model.decoder):
        lvl = cfg.num_aaa_stages - 1 - s
        x = interpolate_features(None, x, None, weights=plan.interp[s])
        y1 = relu(stage.mlp(x))
        if stage.fdc is None:
            x = y1
            continue
        skip = cache[lvl - 1]
        if skip.shape[0] != y1.shape[0]:
            raise RuntimeError(
                f"decoder stage {s}: cached level has {skip.shape[0]} points, decoder has {y1.shape[0]}"
            )
        y2 = stage.align(skip) if stage.align is not None else skip
        x = fdc_forward(stage.fdc, y1, y2)
    return x


def network_forward(model: Model, cloud: PointCloud, plan: ScenePlan | None = None) -> HeadOutput:
    cfg = model.cfg
    if cloud.num_features != cfg.in_channels:
        raise ValueError(f"cloud has {cloud.num_features} feature channels, model expects {cfg.in_channels}")
    if plan is None:
        plan = plan_scene(cfg, cloud.positions)
    feats = Tensor(cloud.features.astype(cfg.np_dtype))
    cache = encode(model, feats, plan)
    x = decode(model, cache, plan)
    lvl = cfg.output_level
    out = HeadOutput(
        cfg.head,
        positions=plan.level_pos[lvl],
        point_indices=plan.level_ids[lvl],
        cache_sizes=[c.shape[0] for c in cache],
    )
    if cfg.head == "classification":
        pooled = reshape(tmax(x, axis=0), (1, -1))
        out.logits = reshape(model.head(pooled), (-1,))
    elif cfg.head == "segmentation":
        if plan.full_interp is not None:
            x = interpolate_features(None, x, None, weights=plan.full_interp)
            out.positions, out.point_indices = plan.level_pos[0], plan.level_ids[0]
        out.logits = model.head(x)
    else:
        raw = model.head(x)
        out.objectness = raw[:, 0:1]
        out.offsets = raw[:, 1:4]
        weight = sigmoid(out.objectness)
        votes = add(Tensor(out.positions.astype(cfg.np_dtype)), out.offsets)
        out.center = div(tsum(mul(weight, votes), axis=0), tsum(weight))
    for t in (out.logits, out.objectness, out.offsets, out.center):
        if t is not None and not np.all(np.isfinite(t.data)):
            raise FloatingPointError("non-finite head output")
    return out


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"MMACKPT"
CKPT_VERSION = 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    def __init__(self, name: str, expected, got):
        super().__init__(f"parameter {name!r}: expected shape {tuple(expected)}, file has {tuple(got)}")
        self.name = name


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def serialize_checkpoint(model: Model, metadata: dict | None = None) -> bytes:
    kv = model.cfg.to_kv()
    for key, value in (metadata or {}).items():
        kv[f"meta.{key}"] = repr(value) if isinstance(value, float) else str(value)
    text = "".join(f"{k}={kv[k]}\n" for k in sorted(kv)).encode("utf-8")
    parts = [CKPT_MAGIC + str(CKPT_VERSION).encode(), struct.pack("<I", len(text)), text]
    named = list(model.named_parameters())
    parts.append(struct.pack("<I", len(named)))
    for name, p in named:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def save_checkpoint(model: Model, path, metadata: dict | None = None) -> None:
    Path(path).write_bytes(serialize_checkpoint(model, metadata))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ChecksumError("checkpoint truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def deserialize_checkpoint(blob: bytes) -> tuple[Model, dict[str, str]]:
    """Parse and validate a checkpoint.

    Structure is checked before the checksum so that damage to a record's
    header or values is reported against the parameter it belongs to; a
    clean parse with a bad checksum is reported as a checksum mismatch.
    """
    if len(blob) < 8 or blob[:7] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = blob[7:8]
    if version != str(CKPT_VERSION).encode():
        raise CheckpointVersionError(f"unsupported checkpoint version {version!r}")
    if len(blob) < 16:
        raise ChecksumError("checkpoint truncated")
    body, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    r = _Reader(body)
    r.take(8)
    try:
        text = r.take(r.u32()).decode("utf-8")
        kv = dict(line.split("=", 1) for line in text.splitlines() if line)
        cfg = ModelConfig.from_kv({k: v for k, v in kv.items() if not k.startswith("meta.")})
    except (CheckpointError, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"config block unreadable: {exc}") from None
    meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
    model = build_network(cfg)
    expected = dict(model.named_parameters())
    order = list(expected)
    count = r.u32()
    if count != len(order):
        raise CheckpointError(f"file holds {count} parameter records, config needs {len(order)}")
    seen = set()
    for slot in range(count):
        # name the record by its slot until its own name is readable
        label = order[slot]
        try:
            name = r.take(r.u32()).decode("utf-8")
        except ChecksumError:
            raise ChecksumError(f"parameter {label!r}: checkpoint truncated") from None
        except UnicodeDecodeError:
            raise CheckpointError(f"parameter {label!r}: record name unreadable") from None
        if name not in expected:
            raise CheckpointError(f"parameter {label!r}: record carries unknown name {name!r}")
        if name in seen:
            raise CheckpointError(f"parameter {name!r} appears twice")
        seen.add(name)
        target = expected[name]
        try:
            rank = r.u32()
            shape = struct.unpack(f"<{min(rank, 8)}I", r.take(4 * min(rank, 8)))
        except ChecksumError:
            raise ChecksumError(f"parameter {name!r}: checkpoint truncated") from None
        if rank != target.data.ndim:
            raise ShapeMismatchError(name, target.shape, (f"rank {rank}",))
        if tuple(shape) != target.shape:
            raise ShapeMismatchError(name, target.shape, shape)
        try:
            values = np.frombuffer(r.take(8 * int(np.prod(shape, dtype=np.int64))), dtype="<f8")
        except ChecksumError:
            raise ChecksumError(f"parameter {name!r}: checkpoint truncated") from None
        if not np.all(np.isfinite(values)):
            raise CheckpointError(f"parameter {name!r}: non-finite values")
        target.data = values.reshape(shape).astype(cfg.np_dtype)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after parameter records")
    if fnv1a64(body) != stored:
        raise ChecksumError("checkpoint checksum mismatch (corrupt file)")
    return model, meta


def load_checkpoint(path, with_metadata: bool = False):
    model, meta = deserialize_checkpoint(Path(path).read_bytes())
    return (model, meta) if with_metadata else model

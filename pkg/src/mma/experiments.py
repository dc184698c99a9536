"""Jitter sweeps and the module-count ablation grid.

Both experiments train weak-center models on synthetic single-object scenes
with background clutter and score them against the true object centers.
Every cell is a pure function of its seed, so reruns reproduce the CSVs
byte for byte.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .network import ConfigError, ModelConfig, baseline_config, build_network
from .scenes import JitterSpec, SceneSpec, jitter_dataset, make_dataset, scene_seed
from .training import TrainConfig, evaluate, prepare_plans, train

log = logging.getLogger(__name__)

SWEEP_HEADER = ("jitter", "seed", "variant", "center_error", "accuracy")
CELL_HEADER = ("aaa", "fdc", "seed", "status", "accuracy", "center_error")
EXPERIMENT_WIDTHS = (16, 32, 64, 128, 128)


def experiment_model(num_aaa_stages: int = 4, num_fdc_stages: int = 3, **overrides) -> ModelConfig:
    """Weak-center config used by the sweeps: narrow widths, 32-bit floats."""
    kw = dict(
        num_aaa_stages=num_aaa_stages,
        num_fdc_stages=num_fdc_stages,
        encoder_widths=EXPERIMENT_WIDTHS[:num_aaa_stages],
        head="weak-center",
        head_hidden=32,
        dtype="float32",
    )
    kw.update(overrides)
    return ModelConfig(**kw)


@dataclass(frozen=True)
class ExperimentSetup:
    """Data and optimisation settings shared by every cell of an experiment."""

    scene: SceneSpec = SceneSpec(num_points=256, num_objects=1, clutter_fraction=0.25)
    train_scenes: int = 128
    test_scenes: int = 24
    train: TrainConfig = TrainConfig(
        epochs=24, lr=0.01, lr_step=12, lr_gamma=0.5, batch_size=8, grad_clip=5.0, weight_decay=1e-4, augment_yaw=True
    )
    distribution: str = "uniform-ball"

    def datasets(self, seed: int):
        """Independent train/test scene sets for one seed."""
        tr = make_dataset(replace(self.scene, seed=scene_seed(seed, 0)), self.train_scenes)
        te = make_dataset(replace(self.scene, seed=scene_seed(seed, 1)), self.test_scenes)
        return tr, te


@dataclass(frozen=True)
class SweepRow:
    jitter: float
    seed: int
    variant: str
    center_error: float
    accuracy: float


@dataclass(frozen=True)
class AblationCell:
    aaa: int
    fdc: int
    seed: int
    status: str  # "ok" or "skipped"
    accuracy: float = float("nan")
    center_error: float = float("nan")
    wall_time: float = 0.0  # informational, kept out of the CSV so reruns match


def _seed_list(seeds) -> list[int]:
    return list(range(seeds)) if isinstance(seeds, int) else [int(s) for s in seeds]


def _fit_and_score(cfg: ModelConfig, train_set, test_set, tcfg: TrainConfig, seed: int, plans) -> dict:
    model = build_network(cfg, seed=seed)
    train(model, train_set, replace(tcfg, seed=seed), plans=plans[0])
    return evaluate(model, test_set, plans[1])


def jitter_sweep(
    model_cfg: ModelConfig,
    levels,
    seeds=3,
    setup: ExperimentSetup | None = None,
    baseline_cfg: ModelConfig | None = None,
) -> list[SweepRow]:
    """Train the attention model and its MLP baseline on jittered weak labels.

    For each seed the scenes, initial parameters, minibatch order and jitter
    directions are fixed; only the jitter magnitude changes across levels.
    """
    levels = [float(j) for j in levels]
    if levels != sorted(levels) or 0.0 not in levels:
        raise ValueError(f"levels must be sorted and include 0, got {levels}")
    setup = setup or ExperimentSetup()
    if model_cfg.head != "weak-center":
        raise ConfigError("jitter sweeps need a weak-center model")
    variants = {"mma": model_cfg, "mlp": baseline_cfg or baseline_config(model_cfg)}
    rows = []
    for seed in _seed_list(seeds):
        train_set, test_set = setup.datasets(seed)
        plans = {name: (prepare_plans(c, train_set), prepare_plans(c, test_set)) for name, c in variants.items()}
        for j in levels:
            noisy = jitter_dataset(train_set, JitterSpec(j, setup.distribution, seed))
            for name, cfg in variants.items():
                m = _fit_and_score(cfg, noisy, test_set, setup.train, seed, plans[name])
                log.info("jitter %.3g seed %d %s: error %.4f", j, seed, name, m["center_error"])
                rows.append(SweepRow(j, seed, name, m["center_error"], m["accuracy"]))
    return sorted(rows, key=lambda r: (r.jitter, r.seed, r.variant))


def sweep_medians(rows: list[SweepRow]) -> dict[str, dict[float, float]]:
    """Median center error per variant and jitter level."""
    out: dict[str, dict[float, list[float]]] = {}
    for r in rows:
        out.setdefault(r.variant, {}).setdefault(r.jitter, []).append(r.center_error)
    return {v: {j: float(np.median(e)) for j, e in sorted(d.items())} for v, d in out.items()}


def monotone_violations(values: list[float]) -> int:
    """Number of steps where the sequence decreases."""
    return sum(1 for a, b in zip(values, values[1:]) if b < a)


def ablation_grid(
    aaa_counts=(3, 4, 5),
    fdc_counts=(2, 3, 4),
    seeds=1,
    setup: ExperimentSetup | None = None,
    jitter: float = 0.0,
    model_overrides: dict | None = None,
) -> list[AblationCell]:
    """Train one weak-center model per valid (AAA, FDC) pair and seed.

    Pairs with ``fdc > aaa - 1`` are recorded as skipped.
    """
    setup = setup or ExperimentSetup()
    cells = []
    for seed in _seed_list(seeds):
        train_set, test_set = setup.datasets(seed)
        noisy = jitter_dataset(train_set, JitterSpec(jitter, setup.distribution, seed))
        for a in aaa_counts:
            for f in fdc_counts:
                if f > a - 1:
                    cells.append(AblationCell(a, f, seed, "skipped"))
                    continue
                cfg = experiment_model(a, f, **(model_overrides or {}))
                start = time.perf_counter()
                plans = (prepare_plans(cfg, noisy), prepare_plans(cfg, test_set))
                m = _fit_and_score(cfg, noisy, test_set, setup.train, seed, plans)
                elapsed = time.perf_counter() - start
                log.info("%d*AAA + %d*FDC seed %d: accuracy %.3f", a, f, seed, m["accuracy"])
                cells.append(AblationCell(a, f, seed, "ok", m["accuracy"], m["center_error"], elapsed))
    return sorted(cells, key=lambda c: (c.aaa, c.fdc, c.seed))


def ablation_table(cells: list[AblationCell]) -> list[list[str]]:
    """Pivot to rows ``k*FDC`` and columns ``k*AAA`` holding accuracy in percent."""
    aaa = sorted({c.aaa for c in cells})
    fdc = sorted({c.fdc for c in cells})
    rows = [[""] + [f"{a}*AAA" for a in aaa]]
    for f in fdc:
        row = [f"{f}*FDC"]
        for a in aaa:
            ok = [c.accuracy for c in cells if c.aaa == a and c.fdc == f and c.status == "ok"]
            row.append(f"{100 * float(np.mean(ok)):.1f}" if ok else "skipped")
        rows.append(row)
    return rows


# -- CSV ----------------------------------------------------------------------


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def sweep_csv(rows: list[SweepRow]) -> str:
    return _csv_text(SWEEP_HEADER, [(r.jitter, r.seed, r.variant, r.center_error, r.accuracy) for r in rows])


def cells_csv(cells: list[AblationCell]) -> str:
    return _csv_text(
        CELL_HEADER, [(c.aaa, c.fdc, c.seed, c.status, c.accuracy, c.center_error) for c in cells]
    )


def table_csv(cells: list[AblationCell]) -> str:
    table = ablation_table(cells)
    return _csv_text(table[0], table[1:])


def read_sweep_csv(text: str) -> list[SweepRow]:
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader))
    if header != SWEEP_HEADER:
        raise ValueError(f"unexpected sweep header {header}")
    return [SweepRow(float(j), int(s), v, float(e), float(a)) for j, s, v, e, a in reader]


def write_text(path, text: str) -> None:
    Path(path).write_bytes(text.encode("utf-8"))

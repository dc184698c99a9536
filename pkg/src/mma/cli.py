"""Command-line entry point: ``mma <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .experiments import (
    ExperimentSetup,
    ablation_grid,
    cells_csv,
    experiment_model,
    jitter_sweep,
    sweep_csv,
    table_csv,
    write_text,
)
from .geometry import load_scene_file, save_scene_file
from .gradcheck import TOLERANCE, run_gradient_suite
from .network import ModelConfig, build_network, load_checkpoint, save_checkpoint
from .scenes import JitterSpec, SceneSpec, jitter_dataset, make_dataset
from .training import TrainConfig, TrainingDiverged, evaluate, train

log = logging.getLogger("mma")


def read_kv(path) -> dict[str, str]:
    """Parse a ``key=value`` file; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key = key.strip()
        if key in out:
            raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def format_kv(kv: dict[str, str]) -> str:
    return "".join(f"{k}={kv[k]}\n" for k in sorted(kv))


def _split_prefix(kv: dict[str, str], prefix: str) -> tuple[dict[str, str], dict[str, str]]:
    inner = {k[len(prefix) :]: v for k, v in kv.items() if k.startswith(prefix)}
    rest = {k: v for k, v in kv.items() if not k.startswith(prefix)}
    return inner, rest


def load_dataset(directory) -> list:
    files = sorted(Path(directory).glob("*.scene"))
    if not files:
        raise FileNotFoundError(f"no .scene files in {directory}")
    return [load_scene_file(f) for f in files]


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _jsonable(metrics: dict) -> dict:
    """Flatten nested lists to ``name.i.j`` keys with plain int/float values."""
    out = {}
    for k, v in metrics.items():
        if isinstance(v, (list, tuple, np.ndarray)):
            for i, item in enumerate(v):
                out.update(_jsonable({f"{k}.{i}": item}))
        elif isinstance(v, (np.floating, float)):
            out[k] = float(v)
        elif isinstance(v, (np.integer, int)):
            out[k] = int(v)
        else:
            out[k] = v
    return out


# -- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    kv = read_kv(args.spec) if args.spec else {}
    jkv, kv = _split_prefix(kv, "jitter.")
    balanced = kv.pop("balanced", "false").lower() in ("1", "true", "yes")
    spec = replace(SceneSpec.from_kv(kv), seed=args.seed)
    scenes = make_dataset(spec, args.scenes, balanced=balanced)
    if jkv:
        jitter = JitterSpec(
            float(jkv.get("fraction", 0.0)), jkv.get("distribution", "uniform-ball"), int(jkv.get("seed", args.seed))
        )
        scenes = jitter_dataset(scenes, jitter)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, pc in enumerate(scenes):
        save_scene_file(pc, out / f"scene_{i:05d}.scene")
    print(f"wrote {len(scenes)} scenes to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    results = run_gradient_suite(args.seed)
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<28} {r.error:.3e}")
    worst = max(r.error for r in results)
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:g}) in {time.perf_counter() - start:.1f}s")
    return 0 if all(r.passed for r in results) else 1


def cmd_train(args) -> int:
    kv = read_kv(args.config) if args.config else {}
    tkv, mkv = _split_prefix(kv, "train.")
    cfg = ModelConfig.from_kv(mkv)
    tcfg = TrainConfig.from_kv(tkv)
    data = load_dataset(args.data)
    model = build_network(cfg)
    try:
        report = train(model, data, tcfg)
    except TrainingDiverged as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return 2
    final = report.epoch_losses[-1] if report.epoch_losses else report.initial_loss
    save_checkpoint(model, args.out, {"epochs": len(report.epoch_losses), "seed": tcfg.seed, "loss": final})
    print(f"trained {len(report.epoch_losses)} epochs, loss {final:.6g}, saved {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    metrics = _jsonable(evaluate(model, load_dataset(args.data)))
    text = json.dumps(metrics, sort_keys=True) + "\n"
    if args.json:
        write_text(args.json, text)
    sys.stdout.write(text)
    return 0


def _setup(args) -> ExperimentSetup:
    base = ExperimentSetup()
    kw = {}
    if args.epochs is not None:
        kw["train"] = replace(base.train, epochs=args.epochs)
    if args.train_scenes is not None:
        kw["train_scenes"] = args.train_scenes
    if args.test_scenes is not None:
        kw["test_scenes"] = args.test_scenes
    if args.points is not None:
        kw["scene"] = replace(base.scene, num_points=args.points)
    return replace(base, **kw)


def cmd_jitter_sweep(args) -> int:
    rows = jitter_sweep(experiment_model(), _floats(args.levels), args.seeds, _setup(args))
    text = sweep_csv(rows)
    if args.csv:
        write_text(args.csv, text)
    sys.stdout.write(text)
    return 0


def cmd_ablate(args) -> int:
    cells = ablation_grid(_ints(args.aaa), _ints(args.fdc), args.seeds, _setup(args))
    table = table_csv(cells)
    if args.csv:
        out = Path(args.csv)
        write_text(out, table)
        write_text(out.with_name(out.stem + ".cells.csv"), cells_csv(cells))
    sys.stdout.write(table)
    return 0


def _experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, help="override training epochs")
    p.add_argument("--train-scenes", type=int, help="override training set size")
    p.add_argument("--test-scenes", type=int, help="override test set size")
    p.add_argument("--points", type=int, help="override points per scene")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mma", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic scene files")
    p.add_argument("--spec", help="key=value scene spec (jitter.* keys add weak-label jitter)")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train a model and save a checkpoint")
    p.add_argument("--config", help="key=value model config; train.* keys configure the optimiser")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("jitter-sweep", help="attention model vs MLP baseline under label jitter")
    p.add_argument("--levels", default="0,0.1,0.2,0.3,0.5")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--csv")
    _experiment_flags(p)
    p.set_defaults(func=cmd_jitter_sweep)

    p = sub.add_parser("ablate", help="AAA x FDC module-count grid")
    p.add_argument("--aaa", default="3,4,5")
    p.add_argument("--fdc", default="2,3,4")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--csv")
    _experiment_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as err:
        print(f"mma {args.command}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

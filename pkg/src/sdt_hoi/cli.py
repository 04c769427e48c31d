"""Command-line entry point: ``sdt-hoi {gen,train,eval,ablate,inspect}``.

Every command reads one JSON run config (``--config``; defaults if omitted),
applies ``--set key=value`` overrides in order, then the dedicated flags, and
writes its outputs under the run directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import RunConfig, apply_override
from .inference_eval import attention_distance_stats, class_counts
from .scene_io import FeasibilityTable, SceneFormatError, build_world, generate_scenes, load_scenes, save_scenes
from .train import (
    ARM_SETS,
    evaluate_model,
    interactive_attention,
    load_model,
    run_ablation,
    save_model,
    train,
    write_csv,
)


# ---------------------------------------------------------------------------
# config and data


def build_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        apply_override(config, key.strip(), value.strip())
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("run_dir", "run_dir")):
        value = getattr(args, flag, None)
        if value is not None:
            apply_override(config, key, str(value))
    if getattr(args, "seed", None) is not None:
        config.synth.seed = config.seed
    return config


def load_data(config: RunConfig):
    """``(train, test, feasibility)`` from the configured paths or the generator."""
    world = None
    if config.train_scenes is None or config.test_scenes is None or config.feasibility is None:
        world = build_world(config.synth)
    if config.train_scenes:
        train_set = load_scenes(config.train_scenes)
    else:
        train_set = generate_scenes(config.synth, world)
    if config.test_scenes:
        test_set = load_scenes(config.test_scenes)
    else:
        test_set = generate_scenes(replace(config.synth, split="test", num_scenes=config.synth_test_scenes), world)
    feas = FeasibilityTable.load(config.feasibility) if config.feasibility else world.feasibility
    return train_set, test_set, feas


def _run_dir(config: RunConfig) -> Path:
    path = Path(config.run_dir)
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.json").write_text(config.dumps() + "\n")
    return path


def _write_report(out: Path, metrics) -> None:
    doc = {
        "default": metrics.report.to_json(),
        "known_object": metrics.known_object.to_json(),
        "map_near": metrics.near_map,
        "map_distant": metrics.distant_map,
    }
    (out / "metrics.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    (out / "classes.csv").write_text(metrics.report.classes_csv())
    (out / "bins.csv").write_text(metrics.report.bins_csv())


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    config = build_config(args)
    out = _run_dir(config)
    world = build_world(config.synth)
    train_set = generate_scenes(config.synth, world)
    test_set = generate_scenes(replace(config.synth, split="test", num_scenes=config.synth_test_scenes), world)
    save_scenes(train_set, out / "train.jsonl")
    save_scenes(test_set, out / "test.jsonl")
    world.feasibility.save(out / "feasibility.json")
    print(f"wrote {len(train_set)} train and {len(test_set)} test scenes to {out}")
    return 0


def cmd_train(args) -> int:
    config = build_config(args)
    out = _run_dir(config)
    train_set, test_set, feas = load_data(config)
    with open(out / "train_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "lr", "loss", "grad_norm", "alpha", "beta"])

        def on_epoch(e):
            writer.writerow([e.epoch, f"{e.lr:.6g}", f"{e.loss:.6f}", f"{e.grad_norm:.6f}", f"{e.alpha:.6f}", f"{e.beta:.6f}"])
            fh.flush()

        result = train(config, train_set, on_epoch=on_epoch)
    save_model(result.model, out / "checkpoint.json")
    if not args.no_eval:
        counts = class_counts({s.id: s.ground_truth for s in train_set})
        metrics = evaluate_model(result.model, test_set, feas, counts)
        _write_report(out, metrics)
        print(f"mAP {metrics.report.map_full:.4f}  distant {metrics.distant_map:.4f}  near {metrics.near_map:.4f}")
    print(f"checkpoint: {out / 'checkpoint.json'}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    config = model.config
    scenes = load_scenes(args.scenes)
    if args.feasibility:
        feas = FeasibilityTable.load(args.feasibility)
    elif config.feasibility:
        feas = FeasibilityTable.load(config.feasibility)
    else:
        feas = build_world(config.synth).feasibility
    counts = None
    if args.train_scenes:
        counts = class_counts({s.id: s.ground_truth for s in load_scenes(args.train_scenes)})
    metrics = evaluate_model(model, scenes, feas, counts)
    out = Path(args.out or config.run_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_report(out, metrics)
    print(f"mAP {metrics.report.map_full:.4f}  rare {metrics.report.map_rare:.4f}  non-rare {metrics.report.map_nonrare:.4f}")
    return 0


def cmd_ablate(args) -> int:
    config = build_config(args)
    out = _run_dir(config)
    tables = [t.strip() for t in args.tables.split(",") if t.strip()]
    for t in tables:
        if t not in ARM_SETS:
            raise ValueError(f"unknown arm set {t!r}; choose from {sorted(ARM_SETS)}")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [config.seed]
    rows = []
    for seed in seeds:
        cfg = replace(config, seed=seed, synth=replace(config.synth, seed=seed))
        train_set, test_set, feas = load_data(cfg)
        counts = class_counts({s.id: s.ground_truth for s in train_set})
        rows.extend(run_ablation(cfg, train_set, test_set, feas, tables, counts))
    write_csv(rows, out / "ablation.csv")
    (out / "metrics.json").write_text(json.dumps({"rows": rows}, indent=1, sort_keys=True, default=float) + "\n")
    for r in rows:
        print(f"{r['table']:7s} seed {r['seed']:<3d} {r['arm']:12s} mAP {r['map_full']:.4f}  distant {r['map_distant']:.4f}")
    return 0


ATTN_KINDS = {"far": "far_block", "near": "near_block", "combined": "combined"}


def cmd_inspect(args) -> int:
    model = load_model(args.checkpoint)
    config = model.config
    scenes = load_scenes(args.scenes)[: args.limit]
    prepared = model.prepare(scenes)
    out = Path(args.out or config.run_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "masks.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene_id", "i", "j", "D_ij", "far", "near"])
        for p in prepared:
            for i in range(p.n):
                for j in range(p.n):
                    w.writerow([p.scene.id, i, j, f"{p.D[i, j]:.9g}", int(p.far[i, j]), int(p.near[i, j])])
    rows = []
    if config.toggles.t_encoder:
        kinds = ATTN_KINDS.items() if config.toggles.fnda else [("combined", "baseline_mhsa")]
        for block, label in kinds:
            records = interactive_attention(model, prepared, block)
            if not records:
                continue
            for b in attention_distance_stats(records):
                rows.append([f"{b.bin_low:.2f}", f"{b.mean:.9g}", f"{b.variance:.9g}", b.count, label])
    with open(out / "attn_stats.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_low", "mean", "variance", "count", "attention_kind"])
        w.writerows(rows)
    print(f"wrote {out / 'masks.csv'} and {out / 'attn_stats.csv'}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config (defaults when omitted)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. toggles.fnda=false")
    p.add_argument("--seed", type=int, help="run seed (also reseeds the generator)")
    p.add_argument("--run-dir", dest="run_dir", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdt-hoi", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write synthetic train/test scenes and the feasibility table")
    _common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model, checkpoint it and evaluate on the test scenes")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-eval", action="store_true", help="skip test-set evaluation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a scene file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--feasibility", help="feasibility JSON (default: from the checkpoint config)")
    p.add_argument("--train-scenes", help="training scenes used to decide rare classes")
    p.add_argument("--out", help="output directory (default: the checkpoint's run_dir)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train every arm of the module and attention ablations")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--tables", default="table2,table4", help="comma list of arm sets: table2, table4")
    p.add_argument("--seeds", help="comma list of seeds (default: the config seed)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="dump far/near masks and attention-by-distance statistics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--limit", type=int, default=None, help="only the first N scenes")
    p.add_argument("--out", help="output directory (default: the checkpoint's run_dir)")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, SceneFormatError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"sdt-hoi {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

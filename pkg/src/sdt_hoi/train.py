"""Training loop, inference over scene sets and the ablation harness."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn_core as nn
from .config import RunConfig
from .fnda import MaskPair, TokenEncoderConfig, full_masks, record_attention
from .inference_eval import (
    Detection,
    EvalReport,
    distance_stratified_map,
    evaluate,
    range_map,
    scene_detections,
)
from .model import InteractionModel, PreparedScene, collate
from .scene_io import FeasibilityTable, Scene
from .token_post import ClassMemory

log = logging.getLogger(__name__)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    grad_norm: float
    alpha: float
    beta: float


@dataclass
class TrainResult:
    model: InteractionModel
    history: list[EpochLog] = field(default_factory=list)


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start : start + size]


def train(
    config: RunConfig,
    scenes: Sequence[Scene] | Sequence[PreparedScene],
    model: InteractionModel | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Train for ``config.epochs`` epochs with AdamW and a step learning-rate drop.

    Batches are fixed-order slices of a seeded permutation; gradients of a
    batch come from one graph, so the summation order is deterministic.
    Scenes without any human-object pair are skipped.
    """
    model = model or InteractionModel(config)
    prepared = [p if isinstance(p, PreparedScene) else model.prepare([p])[0] for p in scenes]
    prepared = [p for p in prepared if p.pairs]
    rng = np.random.default_rng([config.seed, 7])
    state = nn.AdamWState()
    result = TrainResult(model)
    for epoch in range(config.epochs):
        lr = nn.step_lr(config.lr, epoch, config.lr_drop_epoch)
        order = rng.permutation(len(prepared))
        total, norm, steps = 0.0, 0.0, 0
        for idx in _batches(order, config.batch_size):
            batch = collate([prepared[i] for i in idx], config.d, config.num_verbs)
            loss = model.loss(batch, train=True, rng=rng)
            grads = nn.backward(loss, model.params)
            nn.optimizer_step(model.params, grads, state, lr=lr, weight_decay=config.weight_decay)
            model.update_memory(batch)
            total += float(loss.data)
            norm += math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            steps += 1
        entry = EpochLog(
            epoch=epoch,
            lr=lr,
            loss=total / max(steps, 1),
            grad_norm=norm / max(steps, 1),
            alpha=float(model.params["da.alpha"].data),
            beta=float(model.params["da.beta"].data),
        )
        result.history.append(entry)
        log.info("epoch %d lr %.2e loss %.5f grad-norm %.4f", epoch, lr, entry.loss, entry.grad_norm)
        if on_epoch:
            on_epoch(entry)
    return result


def predict(
    model: InteractionModel,
    scenes: Sequence[Scene] | Sequence[PreparedScene],
    feasibility: FeasibilityTable,
    lam: float | None = None,
    batch_size: int = 32,
) -> list[Detection]:
    """Scored, feasibility-filtered triplets for every scene."""
    lam = model.config.lambda_infer if lam is None else lam
    prepared = [p if isinstance(p, PreparedScene) else model.prepare([p])[0] for p in scenes]
    prepared = [p for p in prepared if p.pairs]
    out: list[Detection] = []
    for start in range(0, len(prepared), batch_size):
        chunk = prepared[start : start + batch_size]
        deltas = model.predict(collate(chunk, model.config.d, model.config.num_verbs))
        for p, delta in zip(chunk, deltas):
            out.extend(scene_detections(p.scene.id, p.tokens, p.pairs, delta, feasibility, lam))
    return out


@dataclass
class RunMetrics:
    report: EvalReport
    known_object: EvalReport
    distant_map: float
    near_map: float


def evaluate_model(
    model: InteractionModel,
    test: Sequence[Scene] | Sequence[PreparedScene],
    feasibility: FeasibilityTable,
    train_counts=None,
) -> RunMetrics:
    scenes = [p.scene if isinstance(p, PreparedScene) else p for p in test]
    dets = predict(model, test, feasibility)
    gts = {s.id: s.ground_truth for s in scenes}
    report = evaluate(dets, gts, "default", train_counts)
    report.bins = distance_stratified_map(dets, gts, train_counts=train_counts)
    thr = model.config.distant_threshold
    return RunMetrics(
        report=report,
        known_object=evaluate(dets, gts, "known-object", train_counts),
        distant_map=range_map(dets, gts, thr, train_counts=train_counts),
        near_map=range_map(dets, gts, 0.0, thr, train_counts=train_counts),
    )


def interactive_attention(
    model: InteractionModel,
    prepared: Sequence[PreparedScene],
    block_kind: str = "combined",
) -> list[tuple[int, int, float, float]]:
    """Token-encoder attention on GT-matched human-object pairs, both directions."""
    cfg = model.config
    if not cfg.toggles.t_encoder:
        return []
    enc = TokenEncoderConfig(cfg.L_T, cfg.heads, cfg.hidden, cfg.mask_mode, 0.0)
    records = []
    for p in prepared:
        if not p.pairs or not p.targets.any():
            continue
        X = model.post_process(collate([p], cfg.d, cfg.num_verbs)).data[0]
        masks = MaskPair(p.far, p.near) if cfg.toggles.fnda else full_masks(p.n)
        recs = record_attention(X, masks, model.params, enc, p.D, block_kind)
        table = {(r.i, r.j): r for r in recs}
        for k, (i, j) in enumerate(p.pairs):
            if p.targets[k].any():
                records.append(table[(i, j)])
                records.append(table[(j, i)])
    return records


# ---------------------------------------------------------------------------
# ablations

TABLE2_ARMS: list[tuple[str, dict]] = [
    ("baseline", dict(t_encoder=False, i_encoder=False, da_loss=False)),
    ("T", dict(t_encoder=True, i_encoder=False, da_loss=False)),
    ("I", dict(t_encoder=False, i_encoder=True, da_loss=False)),
    ("DA", dict(t_encoder=False, i_encoder=False, da_loss=True)),
    ("T+I", dict(t_encoder=True, i_encoder=True, da_loss=False)),
    ("T+DA", dict(t_encoder=True, i_encoder=False, da_loss=True)),
    ("I+DA", dict(t_encoder=False, i_encoder=True, da_loss=True)),
    ("T+I+DA", dict(t_encoder=True, i_encoder=True, da_loss=True)),
]

TABLE4_ARMS: list[tuple[str, dict]] = [
    ("MHSA", dict(fnda=False, spatial_fusion=False, icd=False)),
    ("MHSA+SF", dict(fnda=False, spatial_fusion=True, icd=False)),
    ("MHSA+SF+ICD", dict(fnda=False, spatial_fusion=True, icd=True)),
    ("FNDA", dict(fnda=True, spatial_fusion=False, icd=False)),
    ("FNDA+SF", dict(fnda=True, spatial_fusion=True, icd=False)),
    ("FNDA+SF+ICD", dict(fnda=True, spatial_fusion=True, icd=True)),
]


def arm_config(base: RunConfig, **toggles) -> RunConfig:
    cfg = replace(base, toggles=replace(base.toggles, **toggles))
    cfg.check()
    return cfg


@dataclass
class ArmResult:
    name: str
    metrics: RunMetrics
    history: list[EpochLog]
    model: InteractionModel


def run_arm(name: str, config: RunConfig, train_set, test_set, feasibility, train_counts=None) -> ArmResult:
    res = train(config, train_set)
    metrics = evaluate_model(res.model, test_set, feasibility, train_counts)
    log.info("arm %s: mAP %.4f distant %.4f", name, metrics.report.map_full, metrics.distant_map)
    return ArmResult(name, metrics, res.history, res.model)


def metrics_row(arm: ArmResult) -> dict:
    r, k = arm.metrics.report, arm.metrics.known_object
    t = arm.model.config.toggles
    return {
        "arm": arm.name,
        "t_encoder": int(t.t_encoder),
        "i_encoder": int(t.i_encoder),
        "da_loss": int(t.da_loss),
        "fnda": int(t.fnda),
        "spatial_fusion": int(t.spatial_fusion),
        "icd": int(t.icd),
        "map_full": r.map_full,
        "map_rare": r.map_rare,
        "map_nonrare": r.map_nonrare,
        "ko_full": k.map_full,
        "ko_rare": k.map_rare,
        "ko_nonrare": k.map_nonrare,
        "map_near": arm.metrics.near_map,
        "map_distant": arm.metrics.distant_map,
        "final_loss": arm.history[-1].loss if arm.history else float("nan"),
    }


ARM_SETS = {"table2": TABLE2_ARMS, "table4": TABLE4_ARMS}
CSV_FLOAT = "{:.6f}"


def run_ablation(
    base: RunConfig,
    train_set: Sequence[Scene],
    test_set: Sequence[Scene],
    feasibility: FeasibilityTable,
    arm_sets: Sequence[str] = ("table2", "table4"),
    train_counts=None,
) -> list[dict]:
    """Train and evaluate every arm of the requested sets; one row per arm.

    Arms whose toggles coincide with an earlier arm reuse its result, so a
    row is never trained twice under one seed.
    """
    done: dict[tuple, ArmResult] = {}
    rows = []
    for set_name in arm_sets:
        for name, toggles in ARM_SETS[set_name]:
            cfg = arm_config(base, **toggles)
            key = tuple(sorted(vars(cfg.toggles).items()))
            if key not in done:
                done[key] = run_arm(name, cfg, train_set, test_set, feasibility, train_counts)
            row = metrics_row(done[key])
            row["arm"] = name
            rows.append({"table": set_name, "seed": base.seed, **row})
    return rows


def format_rows(rows: Sequence[dict]) -> list[dict]:
    """Fixed-precision string rows so equal runs give byte-identical CSVs."""
    out = []
    for row in rows:
        out.append({k: CSV_FLOAT.format(v) if isinstance(v, float) else str(v) for k, v in row.items()})
    return out


def write_csv(rows: Sequence[dict], path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(format_rows(rows))


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: InteractionModel, path) -> None:
    """Parameters, class memory and the full run config in one JSON file."""
    nn.save_checkpoint(
        path,
        model.params,
        model.config.model_dict(),
        extra={"run_config": model.config.to_json(), "memory": model.memory.to_json()},
    )


def load_model(path) -> InteractionModel:
    doc = nn.load_checkpoint(path)
    try:
        config = RunConfig.from_json(doc["run_config"])
    except KeyError:
        raise ValueError(f"{path}: not a model checkpoint (no run_config)") from None
    if nn.config_hash(config.model_dict()) != doc["config_hash"]:
        raise ValueError(f"{path}: config hash does not match the stored model config")
    model = InteractionModel(config)
    model.params.load_arrays(doc["arrays"])
    if "memory" in doc:
        model.memory = ClassMemory.from_json(doc["memory"])
    return model

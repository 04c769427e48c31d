"""Token filtering, interaction scoring, triplet matching and (distance-binned) mAP."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .geometry import iou

IOU_THRESHOLD = 0.5
DIST_BIN = 0.05
MAX_DIST = math.sqrt(2.0)
RARE_LIMIT = 10


def filter_tokens(detections: Sequence, min_score: float = 0.2, min_keep: int = 3, max_keep: int = 15) -> list[int]:
    """Indices of the tokens to keep, in their original order.

    Humans and objects are filtered separately: tokens scoring below
    ``min_score`` are dropped unless fewer than ``min_keep`` would remain, in
    which case the best-scoring ones are kept up to ``min_keep``; at most
    ``max_keep`` survive per group.
    """
    kept: list[int] = []
    for human in (True, False):
        idx = [i for i, t in enumerate(detections) if bool(t.is_human) == human]
        idx.sort(key=lambda i: -detections[i].score)  # stable on ties
        above = [i for i in idx if detections[i].score >= min_score]
        if len(above) < min_keep:
            above = idx[:min_keep]
        kept.extend(above[:max_keep])
    return sorted(kept)


def final_score(s_i, s_j, delta, lam: float):
    """Interaction score ``s_i^lam * s_j^lam * delta``."""
    return (np.asarray(s_i, dtype=np.float64) ** lam) * (np.asarray(s_j, dtype=np.float64) ** lam) * delta


@dataclass(frozen=True)
class Detection:
    scene_id: str
    human_box: tuple
    object_box: tuple
    object_class: int
    verb_id: int
    score: float

    @property
    def distance(self) -> float:
        return _center_distance(self.human_box, self.object_box)


def _center_distance(a, b) -> float:
    return math.hypot((b[0] + b[2] - a[0] - a[2]) / 2.0, (b[1] + b[3] - a[1] - a[3]) / 2.0)


def pair_match_score(hbox, obox, gt) -> float:
    return min(iou(hbox, gt.human_box), iou(obox, gt.object_box))


def match_pairs_to_gt(pairs: Sequence[tuple[int, int]], boxes, gts: Sequence, num_verbs: int) -> np.ndarray:
    """Binary ``(len(pairs), C)`` targets: verb ``c`` is on when a GT triplet
    containing ``c`` overlaps both boxes of the pair with IoU >= 0.5."""
    y = np.zeros((len(pairs), num_verbs))
    for p, (i, j) in enumerate(pairs):
        for g in gts:
            if pair_match_score(boxes[i], boxes[j], g) >= IOU_THRESHOLD:
                for v in g.verb_ids:
                    y[p, v] = 1.0
    return y


def scene_detections(
    scene_id: str,
    tokens: Sequence,
    pairs: Sequence[tuple[int, int]],
    delta: np.ndarray,
    feasibility: Mapping[int, frozenset],
    lam: float = 2.8,
) -> list[Detection]:
    """Turn per-pair verb scores into scored triplets, dropping infeasible verbs."""
    out = []
    for p, (i, j) in enumerate(pairs):
        h, o = tokens[i], tokens[j]
        for v in sorted(feasibility.get(int(o.class_id), ())):
            z = float(final_score(h.score, o.score, delta[p, v], lam))
            out.append(Detection(scene_id, tuple(h.box), tuple(o.box), int(o.class_id), int(v), z))
    return out


def average_precision(tp: Sequence[bool], num_gt: int) -> float:
    """All-points interpolated AP of a ranked TP/FP list."""
    if num_gt == 0:
        return float("nan")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    rec = ctp / num_gt
    prec = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def class_counts(gts: Mapping[str, Sequence]) -> dict[tuple[int, int], int]:
    """Instances per interaction class ``(object_class, verb)``."""
    counts: dict[tuple[int, int], int] = defaultdict(int)
    for triplets in gts.values():
        for g in triplets:
            for v in g.verb_ids:
                counts[(g.object_class, v)] += 1
    return dict(counts)


@dataclass
class EvalReport:
    setting: str
    ap: dict[tuple[int, int], float]
    map_full: float
    map_rare: float
    map_nonrare: float
    num_gt: dict[tuple[int, int], int] = field(default_factory=dict)
    rare: set = field(default_factory=set)
    bins: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        def num(x):
            return None if x is None or (isinstance(x, float) and math.isnan(x)) else round(float(x), 12)

        return {
            "setting": self.setting,
            "map_full": num(self.map_full),
            "map_rare": num(self.map_rare),
            "map_nonrare": num(self.map_nonrare),
            "classes": [
                {"object_class": o, "verb": v, "ap": num(a), "num_gt": self.num_gt.get((o, v), 0), "rare": (o, v) in self.rare}
                for (o, v), a in sorted(self.ap.items())
            ],
            "bins": [{k: num(val) if isinstance(val, float) else val for k, val in b.items()} for b in self.bins],
        }

    def classes_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["object_class", "verb", "ap", "num_gt", "rare"])
        for (o, v), a in sorted(self.ap.items()):
            w.writerow([o, v, f"{a:.6f}", self.num_gt.get((o, v), 0), int((o, v) in self.rare)])
        return buf.getvalue()

    def bins_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "map", "gt_count"])
        for b in self.bins:
            m = "" if b["map"] is None or math.isnan(b["map"]) else f"{b['map']:.6f}"
            w.writerow([f"{b['bin_low']:.2f}", f"{b['bin_high']:.2f}", m, b["gt_count"]])
        return buf.getvalue()

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)


def _nanmean(values: Iterable[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def evaluate(
    detections: Sequence[Detection],
    gts: Mapping[str, Sequence],
    setting: str = "default",
    train_counts: Mapping[tuple[int, int], int] | None = None,
) -> EvalReport:
    """Per-class AP and mAP over scored triplets.

    For each interaction class ``(object_class, verb)`` with ground truth,
    detections are ranked by score (ties keep input order) and each one is
    compared with the GT of its scene with the highest ``min(IoU_h, IoU_o)``:
    a hit above 0.5 on a not-yet-matched GT is a true positive, anything else
    a false positive. ``known-object`` restricts every class to the scenes
    whose ground truth contains its object class. Rare classes have fewer than
    10 instances in ``train_counts`` (or in ``gts`` when not given).
    """
    if setting not in ("default", "known-object"):
        raise ValueError(f"unknown setting {setting!r}")
    gt_by_class: dict[tuple[int, int], dict[str, list]] = defaultdict(lambda: defaultdict(list))
    scenes_with_object: dict[int, set[str]] = defaultdict(set)
    for sid, triplets in gts.items():
        for g in triplets:
            scenes_with_object[g.object_class].add(sid)
            for v in g.verb_ids:
                gt_by_class[(g.object_class, v)][sid].append(g)

    det_by_class: dict[tuple[int, int], list[tuple[int, Detection]]] = defaultdict(list)
    for k, det in enumerate(detections):
        det_by_class[(det.object_class, det.verb_id)].append((k, det))

    ap: dict[tuple[int, int], float] = {}
    num_gt: dict[tuple[int, int], int] = {}
    for cls, per_scene in sorted(gt_by_class.items()):
        n = sum(len(v) for v in per_scene.values())
        dets = det_by_class.get(cls, [])
        if setting == "known-object":
            allowed = scenes_with_object[cls[0]]
            dets = [(k, d) for k, d in dets if d.scene_id in allowed]
        dets = sorted(dets, key=lambda kd: (-kd[1].score, kd[0]))
        used = {sid: [False] * len(v) for sid, v in per_scene.items()}
        flags = []
        for _, det in dets:
            cands = per_scene.get(det.scene_id, [])
            best, best_k = -1.0, -1
            for k, g in enumerate(cands):
                s = pair_match_score(det.human_box, det.object_box, g)
                if s > best:
                    best, best_k = s, k
            hit = best > IOU_THRESHOLD and not used[det.scene_id][best_k]
            if hit:
                used[det.scene_id][best_k] = True
            flags.append(hit)
        ap[cls] = average_precision(flags, n)
        num_gt[cls] = n

    counts = train_counts if train_counts is not None else class_counts(gts)
    rare = {c for c in ap if counts.get(c, 0) < RARE_LIMIT}
    return EvalReport(
        setting=setting,
        ap=ap,
        map_full=_nanmean(ap.values()),
        map_rare=_nanmean(a for c, a in ap.items() if c in rare),
        map_nonrare=_nanmean(a for c, a in ap.items() if c not in rare),
        num_gt=num_gt,
        rare=rare,
    )


def distance_bin(dist: float, width: float = DIST_BIN) -> int:
    return int(math.floor(dist / width))


def distance_slice(detections, gts, lo: float, hi: float):
    """Detections and GT whose own pair distance lies in ``[lo, hi)``."""
    dets = [d for d in detections if lo <= d.distance < hi]
    sub = {sid: [g for g in ts if lo <= g.distance < hi] for sid, ts in gts.items()}
    return dets, {sid: ts for sid, ts in sub.items() if ts}


def distance_stratified_map(
    detections: Sequence[Detection],
    gts: Mapping[str, Sequence],
    width: float = DIST_BIN,
    setting: str = "default",
    train_counts=None,
) -> list[dict]:
    """mAP and GT count per distance bin ``[k*width, (k+1)*width)`` over ``[0, sqrt 2]``."""
    nbins = int(math.ceil(MAX_DIST / width))
    det_bins: dict[int, list] = defaultdict(list)
    for d in detections:
        det_bins[distance_bin(d.distance, width)].append(d)
    gt_bins: dict[int, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    for sid, ts in gts.items():
        for g in ts:
            gt_bins[distance_bin(g.distance, width)][sid].append(g)
    out = []
    for b in range(nbins):
        count = sum(len(v) for v in gt_bins[b].values()) if b in gt_bins else 0
        m = float("nan")
        if count:
            m = evaluate(det_bins.get(b, []), gt_bins[b], setting, train_counts).map_full
        out.append({"bin_low": b * width, "bin_high": (b + 1) * width, "map": m, "gt_count": count})
    return out


def range_map(detections, gts, lo: float, hi: float = float("inf"), setting: str = "default", train_counts=None) -> float:
    """mAP over the pooled distance range ``[lo, hi)``."""
    dets, sub = distance_slice(detections, gts, lo, hi)
    if not sub:
        return float("nan")
    return evaluate(dets, sub, setting, train_counts).map_full


class BinStat(NamedTuple):
    bin_low: float
    mean: float
    variance: float
    count: int


def attention_distance_stats(records: Iterable, width: float = DIST_BIN) -> list[BinStat]:
    """Mean and (population) variance of attention weights per distance bin.

    ``records`` are ``(i, j, distance, weight)`` tuples, already restricted
    to the pairs of interest. Empty bins are omitted.
    """
    groups: dict[int, list[float]] = defaultdict(list)
    for rec in records:
        groups[distance_bin(rec[2], width)].append(float(rec[3]))
    if not groups:
        raise ValueError("attention_distance_stats needs at least one record")
    out = []
    for b in sorted(groups):
        w = np.asarray(groups[b])
        out.append(BinStat(b * width, float(w.mean()), float(w.var()), len(w)))
    return out

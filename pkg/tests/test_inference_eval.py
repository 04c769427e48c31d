import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdt_hoi.fnda import AttentionRecord
from sdt_hoi.inference_eval import (
    Detection,
    attention_distance_stats,
    average_precision,
    class_counts,
    distance_bin,
    distance_stratified_map,
    evaluate,
    filter_tokens,
    final_score,
    match_pairs_to_gt,
    range_map,
    scene_detections,
)
from sdt_hoi.scene_io import GtTriplet, Token

H = (0.10, 0.10, 0.30, 0.50)
O = (0.40, 0.20, 0.60, 0.40)


def token(score, human):
    return Token(np.zeros(2), H if human else O, score, 0 if human else 1, human)


def det(sid="s", h=H, o=O, score=0.9, cls=1, verb=0):
    return Detection(sid, h, o, cls, verb, score)


def gt(h=H, o=O, cls=1, verbs=(0,)):
    return GtTriplet(h, o, cls, frozenset(verbs))


def shifted(box, dx):
    return (box[0] + dx, box[1], box[2] + dx, box[3])


# ---------------------------------------------------------------------------
# filtering and scoring


def test_filter_tokens_examples():
    assert filter_tokens([token(0.9, True)] * 20 + [token(0.9, False)]) == list(range(15)) + [20]
    assert filter_tokens([token(0.1, True), token(0.1, True)]) == [0, 1]
    objs = [token(s, False) for s in (0.5, 0.3, 0.25, 0.1)]
    assert filter_tokens(objs) == [0, 1, 2]
    mixed = [token(s, False) for s in (0.1, 0.9, 0.05, 0.15)]
    assert filter_tokens(mixed) == [0, 1, 3]


@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), max_size=40))
def test_filter_tokens_bounds(spec):
    toks = [token(s, h) for s, h in spec]
    keep = filter_tokens(toks)
    assert keep == sorted(set(keep))
    for human in (True, False):
        group = [i for i, t in enumerate(toks) if t.is_human == human]
        kept = [i for i in keep if toks[i].is_human == human]
        assert len(kept) <= 15
        assert len(kept) >= min(3, len(group))
        above = sum(toks[i].score >= 0.2 for i in group)
        if above >= 3:
            assert all(toks[i].score >= 0.2 for i in kept)


def test_final_score_examples():
    assert final_score(1.0, 1.0, 0.37, 1.0) == 0.37
    assert final_score(0.9, 0.8, 0.5, 1.0) == 0.9 * 0.8 * 0.5
    assert abs(final_score(0.9, 0.8, 0.5, 2.8) - 0.19930) <= 1e-5
    assert abs(final_score(0.9, 0.8, 0.5, 2.8) - 0.5 * math.exp(2.8 * math.log(0.72))) <= 1e-15


@given(st.floats(0, 0.999), st.floats(0, 0.999), st.floats(0.01, 0.99), st.floats(1, 5), st.floats(0, 3))
def test_final_score_non_increasing_in_lambda(si, sj, d, lam, step):
    assert final_score(si, sj, d, lam + step) <= final_score(si, sj, d, lam)


def test_scene_detections_feasibility_filter():
    toks = [token(0.9, True), token(0.8, False)]
    delta = np.array([[0.1, 0.2, 0.3]])
    dets = scene_detections("s", toks, [(0, 1)], delta, {1: frozenset({0, 2})}, lam=1.0)
    assert [(d.verb_id, d.object_class) for d in dets] == [(0, 1), (2, 1)]
    assert math.isclose(dets[1].score, 0.9 * 0.8 * 0.3)
    assert scene_detections("s", toks, [(0, 1)], delta, {}, lam=1.0) == []


def test_match_pairs_to_gt():
    boxes = [H, O, shifted(O, 0.3)]
    y = match_pairs_to_gt([(0, 1), (0, 2)], boxes, [gt(verbs=(1, 3))], 4)
    assert y.tolist() == [[0, 1, 0, 1], [0, 0, 0, 0]]


# ---------------------------------------------------------------------------
# AP


def ap_oracle(flags, num_gt):
    """Loop form: sum over recall steps of the best precision at or beyond each step."""
    if num_gt == 0:
        return float("nan")
    prec, rec, tp = [], [], 0
    for k, f in enumerate(flags, 1):
        tp += f
        prec.append(tp / k)
        rec.append(tp / num_gt)
    total, prev = 0.0, 0.0
    for k in range(len(flags)):
        if rec[k] > prev:
            total += (rec[k] - prev) * max(prec[k:])
            prev = rec[k]
    return total


def test_ap_hand_cases():
    assert average_precision([True], 1) == 1.0
    assert average_precision([], 3) == 0.0
    assert abs(average_precision([True, False, True], 2) - 0.8333) <= 1e-4
    assert abs(average_precision([True, False, True], 2) - 5 / 6) <= 1e-12
    assert math.isnan(average_precision([False], 0))


@given(st.lists(st.booleans(), max_size=30), st.integers(0, 10))
def test_ap_matches_loop_oracle(flags, extra):
    n = sum(flags) + extra
    if n == 0:
        return
    assert abs(average_precision(flags, n) - ap_oracle(flags, n)) <= 1e-12


def test_evaluate_hand_cases():
    gts = {"s": [gt()]}
    assert evaluate([det()], gts).map_full == 1.0
    assert evaluate([], gts).map_full == 0.0
    gts2 = {"a": [gt()], "b": [gt()]}
    dets = [det("a", score=0.9), det("a", o=shifted(O, 0.4), score=0.8), det("b", score=0.7)]
    assert abs(evaluate(dets, gts2).map_full - 5 / 6) <= 1e-6


def _random_case(rng):
    gts, dets = {}, []
    for s in range(int(rng.integers(1, 5))):
        sid = f"s{s}"
        boxes = []
        for _ in range(int(rng.integers(1, 4))):
            h = shifted(H, float(rng.uniform(-0.1, 0.4)))
            o = shifted(O, float(rng.uniform(-0.3, 0.3)))
            boxes.append((h, o))
        gts[sid] = [gt(h, o) for h, o in boxes]
        for _ in range(int(rng.integers(0, 6))):
            h, o = boxes[int(rng.integers(len(boxes)))]
            jit = float(rng.normal(0, 0.05))
            dets.append(det(sid, shifted(h, jit), o, float(rng.uniform(0.05, 0.95))))
    return dets, gts


def test_evaluator_properties_randomized():
    rng = np.random.default_rng(7)
    for _ in range(200):
        dets, gts = _random_case(rng)
        base = evaluate(dets, gts).map_full
        assert 0.0 <= base <= 1.0
        # a duplicate of a detection just below it adds no TP
        if dets:
            k = int(rng.integers(len(dets)))
            dup = det(dets[k].scene_id, dets[k].human_box, dets[k].object_box, dets[k].score - 1e-9)
            assert evaluate(dets + [dup], gts).map_full <= base + 1e-12
            single = {dets[k].scene_id: gts[dets[k].scene_id]}
            ranked = evaluate([dets[k], dup], single)
            assert ranked.map_full <= evaluate([dets[k]], single).map_full + 1e-12
        # a lowest-ranked false positive never raises AP
        fp = det("s0", (0.0, 0.9, 0.01, 0.91), (0.98, 0.0, 0.99, 0.01), 0.0)
        assert evaluate(dets + [fp], gts).map_full <= base + 1e-12
        # input order does not matter when scores are distinct
        perm = [dets[i] for i in rng.permutation(len(dets))]
        assert evaluate(perm, gts).map_full == base


def test_equal_scores_break_ties_by_index():
    gts = {"s": [gt()]}
    tp, fp = det(score=0.5), det(o=shifted(O, 0.4), score=0.5)
    assert evaluate([tp, fp], gts).map_full == 1.0
    assert evaluate([fp, tp], gts).map_full == 0.5
    assert evaluate([fp, tp], gts).map_full == evaluate([fp, tp], gts).map_full


def test_iou_threshold_is_strict():
    # dyadic boxes so the IoU is exactly 0.5
    h, o = (0.0, 0.0, 0.5, 0.5), (0.5, 0.5, 1.0, 1.0)
    half = (0.0, 0.0, 0.5, 0.25)
    assert evaluate([det(h=half, o=o)], {"s": [gt(h, o)]}).map_full == 0.0
    assert evaluate([det(h=(0.0, 0.0, 0.5, 0.3), o=o)], {"s": [gt(h, o)]}).map_full == 1.0


def test_known_object_and_rare_split():
    gts = {"a": [gt(cls=1)], "b": [gt(cls=2)]}
    dets = [det("b", cls=1, score=0.9), det("a", cls=1, score=0.5), det("b", cls=2, score=0.4)]
    default = evaluate(dets, gts)
    known = evaluate(dets, gts, "known-object")
    assert default.ap[(1, 0)] == 0.5 and known.ap[(1, 0)] == 1.0
    counts = {(1, 0): 10, (2, 0): 9}
    r = evaluate(dets, gts, train_counts=counts)
    assert r.rare == {(2, 0)}
    assert r.map_rare == r.ap[(2, 0)] and r.map_nonrare == r.ap[(1, 0)]
    assert class_counts(gts) == {(1, 0): 1, (2, 0): 1}
    with pytest.raises(ValueError):
        evaluate(dets, gts, "other")


def test_report_serialization():
    r = evaluate([det()], {"s": [gt(verbs=(0, 1))]})
    assert r.classes_csv().splitlines() == ["object_class,verb,ap,num_gt,rare", "1,0,1.000000,1,1", "1,1,0.000000,1,1"]
    doc = r.to_json()
    assert doc["map_full"] == 0.5 and len(doc["classes"]) == 2


# ---------------------------------------------------------------------------
# distance bins


def test_distance_bins():
    assert distance_bin(0.0) == 0 and distance_bin(0.049) == 0 and distance_bin(0.05) == 1
    assert distance_bin(0.5) == 10
    near = (0.10, 0.10, 0.30, 0.50)
    close_o = shifted(near, 0.01)
    bins = distance_stratified_map([det(h=near, o=close_o)], {"s": [gt(near, close_o)]})
    assert bins[0]["gt_count"] == 1 and bins[0]["map"] == 1.0
    assert sum(b["gt_count"] for b in bins) == 1
    assert len(bins) == 29 and bins[-1]["bin_high"] >= math.sqrt(2)


def test_bin_counts_follow_gt_histogram():
    rng = np.random.default_rng(3)
    gts, hist = {}, {}
    for k in range(300):
        dx = float(rng.uniform(0.0, 0.7))
        o = shifted(H, dx)
        gts[f"s{k}"] = [gt(H, o)]
        b = distance_bin(gt(H, o).distance)
        hist[b] = hist.get(b, 0) + 1
    bins = distance_stratified_map([], gts)
    assert {i: b["gt_count"] for i, b in enumerate(bins) if b["gt_count"]} == hist


def test_range_map_pools_bins():
    far_o = shifted(O, 0.5)
    gts = {"s": [gt(), gt(o=far_o)]}
    dets = [det(o=far_o, score=0.9)]
    assert range_map(dets, gts, 0.5) == 1.0
    assert range_map(dets, gts, 0.0, 0.5) == 0.0
    assert math.isnan(range_map(dets, gts, 1.3))


def test_attention_stats():
    [b] = attention_distance_stats([AttentionRecord(0, 1, 0.12, 0.3)])
    assert (b.bin_low, b.mean, b.variance, b.count) == (0.1, 0.3, 0.0, 1)
    [b] = attention_distance_stats([AttentionRecord(0, 1, 0.51, 0.2), AttentionRecord(1, 0, 0.53, 0.6)])
    assert math.isclose(b.mean, 0.4) and math.isclose(b.variance, 0.04)
    with pytest.raises(ValueError):
        attention_distance_stats([])


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(0, 1.41), st.floats(0, 1)), min_size=1, max_size=40))
def test_attention_stats_match_grouped_oracle(recs):
    out = attention_distance_stats([(0, 1, d, w) for d, w in recs])
    table = {}
    for d, w in recs:
        table.setdefault(math.floor(d / 0.05), []).append(w)
    assert [round(b.bin_low / 0.05) for b in out] == sorted(table)
    for b in out:
        ws = table[round(b.bin_low / 0.05)]
        m = sum(ws) / len(ws)
        assert math.isclose(b.mean, m, rel_tol=1e-12, abs_tol=1e-15)
        assert math.isclose(b.variance, sum((w - m) ** 2 for w in ws) / len(ws), rel_tol=1e-9, abs_tol=1e-15)
        assert b.count == len(ws)

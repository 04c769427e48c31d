import math
import time

import numpy as np
import pytest

from sdt_hoi import nn_core as nn
from sdt_hoi.config import RunConfig
from sdt_hoi.model import InteractionModel, collate
from sdt_hoi.objective import batch_loss
from sdt_hoi.scene_io import build_world, generate_scenes
from sdt_hoi.train import (
    TABLE2_ARMS,
    TABLE4_ARMS,
    evaluate_model,
    interactive_attention,
    load_model,
    predict,
    save_model,
    train,
)


def tiny_config(**kw):
    base = dict(
        d=16, num_verbs=4, L_T=1, L_I=1, heads=2, hidden=8, dropout=0.0, epochs=2, lr_drop_epoch=1,
        batch_size=4, icd_samples=3, memory_threshold=0.0,
        synth=dict(num_scenes=16, tokens_min=3, tokens_max=5, distance_scale=0.4, distance_exponent=2.0),
    )
    base.update(kw)
    return RunConfig(**base)


def composed_setup():
    """Model with every module on, a primed class memory and one batch of n <= 5 scenes."""
    cfg = tiny_config()
    scenes = generate_scenes(cfg.synth)
    model = InteractionModel(cfg)
    prepared = model.prepare(scenes[:4])
    assert all(p.n <= 5 for p in prepared)
    batch = collate(prepared, cfg.d, cfg.num_verbs)
    model.update_memory(batch)
    model.params["da.alpha"].data = np.array(1.7)
    model.params["da.beta"].data = np.array(-0.3)
    return model, batch


def test_composed_model_gradients():
    model, batch = composed_setup()
    start = time.perf_counter()
    err, per = nn.grad_check(lambda: model.loss(batch), model.params, eps=1e-4, samples=200)
    assert time.perf_counter() - start < 120
    assert {"da.alpha", "da.beta", "icd.wq", "sf.ffn.w1", "tenc.0.far.wq", "ienc.0.wq", "head.w2"} <= set(per)
    assert err <= 1e-4, sorted(per.items(), key=lambda kv: -kv[1])[:5]


def test_loss_agrees_with_pair_api():
    model, batch = composed_setup()
    scenes = model.interaction_pairs(batch)
    pairs = [p for ps in scenes for p in ps]
    targets = np.vstack([p.targets for p in batch.scenes if p.pairs])
    ref = batch_loss(pairs, targets, model.params["da.alpha"], model.params["da.beta"], model.loss_config)
    assert math.isclose(float(model.loss(batch).data), float(ref.data), rel_tol=1e-9)


def test_prediction_is_padding_invariant():
    model, batch = composed_setup()
    alone = [model.predict(collate([p], 16, 4))[0] for p in batch.scenes]
    together = model.predict(batch)
    for a, b in zip(alone, together):
        assert np.allclose(a, b, atol=1e-12)


def test_training_is_deterministic_and_reduces_loss():
    cfg = tiny_config(epochs=4, lr=3e-3, lr_drop_epoch=3)
    scenes = generate_scenes(cfg.synth)
    a, b = train(cfg, scenes), train(cfg, scenes)
    assert [e.loss for e in a.history] == [e.loss for e in b.history]
    for k in a.model.params:
        assert np.array_equal(a.model.params[k].data, b.model.params[k].data)
    assert a.history[-1].loss < a.history[0].loss
    assert np.allclose([e.lr for e in a.history], [3e-3, 3e-3, 3e-3, 3e-4], rtol=1e-15)


def test_zero_epochs_keeps_initialization():
    cfg = tiny_config(epochs=0)
    res = train(cfg, generate_scenes(cfg.synth))
    init = InteractionModel(cfg)
    assert res.history == []
    for k in init.params:
        assert np.array_equal(res.model.params[k].data, init.params[k].data)


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_config()
    scenes = generate_scenes(cfg.synth)
    model = train(cfg, scenes).model
    save_model(model, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    feas = build_world(cfg.synth).feasibility
    d1, d2 = predict(model, scenes, feas), predict(back, scenes, feas)
    assert d1 == d2
    assert back.memory.to_json() == model.memory.to_json()


def test_evaluate_and_attention_records():
    cfg = tiny_config()
    scenes = generate_scenes(cfg.synth)
    model = train(cfg, scenes).model
    m = evaluate_model(model, scenes, build_world(cfg.synth).feasibility)
    assert 0 <= m.report.map_full <= 1 and len(m.report.bins) == 29
    prepared = model.prepare(scenes)
    for kind in ("far", "near", "combined", "visible"):
        recs = interactive_attention(model, prepared, kind)
        assert recs and all(0.0 <= r.weight <= 1.0 for r in recs)
    off = InteractionModel(tiny_config(toggles=dict(t_encoder=False)))
    assert interactive_attention(off, prepared) == []


@pytest.mark.parametrize("toggles", [t for _, t in TABLE2_ARMS + TABLE4_ARMS])
def test_every_arm_builds_and_runs(toggles):
    cfg = tiny_config(toggles=toggles)
    model = InteractionModel(cfg)
    batch = collate(model.prepare(generate_scenes(cfg.synth)[:3]), 16, 4)
    assert np.isfinite(model.loss(batch).data)
    names = set(model.params)
    assert any(n.startswith("tenc.") for n in names) == toggles.get("t_encoder", True)
    assert any(n.startswith("ienc.") for n in names) == toggles.get("i_encoder", True)
    assert any(n.startswith("icd.") for n in names) == toggles.get("icd", True)


def test_baseline_arm_structure():
    name, toggles = TABLE2_ARMS[0]
    assert name == "baseline"
    cfg = tiny_config(toggles=toggles)
    model = InteractionModel(cfg)
    prefixes = {k.split(".")[0] for k in model.params}
    assert prefixes == {"icd", "sf", "gctx", "head", "da"}
    assert not model.loss_config.da_enabled

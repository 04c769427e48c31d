import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from sdt_hoi import nn_core as nn
from sdt_hoi.fnda import encoder_block
from sdt_hoi.interaction import (
    fuse_pair,
    init_fuse_pair,
    init_interaction_encoder,
    init_verb_head,
    interaction_encoder,
    make_pairs,
    predict_verbs,
)


def test_make_pairs_examples():
    assert make_pairs([True, False, False]) == [(0, 1), (0, 2)]
    assert make_pairs([True, True]) == [(0, 1), (1, 0)]
    assert make_pairs([False, False]) == []


@given(st.lists(st.booleans(), max_size=12))
def test_pair_count(flags):
    pairs = make_pairs(flags)
    assert len(pairs) == sum(flags) * (len(flags) - 1) if flags else pairs == []
    assert all(flags[i] and i != j for i, j in pairs)


def _gctx(d=3, hidden=4, seed=0):
    ps = nn.ParamStore()
    init_fuse_pair(ps, d, hidden, np.random.default_rng(seed))
    return ps


def test_fuse_pair_examples(rng):
    ps = _gctx()
    ti, tj, g = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
    ctx = nn.ffn(g, ps, "gctx.ffn").data
    assert np.allclose(fuse_pair(ti, tj, g, ps).data, np.concatenate([ti, tj]) + ctx, atol=1e-15)
    assert np.allclose(fuse_pair(np.zeros(3), np.zeros(3), g, ps).data, ctx)
    assert not np.allclose(fuse_pair(ti, tj, g, ps).data, fuse_pair(tj, ti, g, ps).data)
    for k in ("gctx.ffn.w2", "gctx.ffn.b2"):
        ps[k].data[:] = 0
    assert np.array_equal(fuse_pair(ti, tj, g, ps).data, np.concatenate([ti, tj]))


def _ienc(width=8, layers=2, seed=0):
    ps = nn.ParamStore()
    rng = np.random.default_rng(seed)
    init_interaction_encoder(ps, width, 16, layers, rng)
    for k in ps:
        if k.endswith(".wo"):
            ps[k].data = rng.normal(0, 0.4, ps[k].shape)
    return ps


def test_interaction_encoder_identity_and_single_pair(rng):
    H = rng.normal(size=(4, 8))
    assert np.array_equal(interaction_encoder(H, nn.ParamStore(), 0, 2).data, H)
    ps = _ienc(layers=1)
    h = rng.normal(size=(1, 8))
    ref, _ = encoder_block(h, np.ones((1, 1)), ps, "ienc.0", 2)
    assert np.array_equal(interaction_encoder(h, ps, 1, 2).data, ref.data)


@given(st.integers(1, 6), st.integers(0, 2**31))
def test_interaction_encoder_equivariance(m, seed):
    rng = np.random.default_rng(seed)
    ps = _ienc()
    H = rng.normal(size=(m, 8))
    perm = rng.permutation(m)
    assert np.allclose(interaction_encoder(H[perm], ps, 2, 2).data, interaction_encoder(H, ps, 2, 2).data[perm], atol=1e-10)


def _head(width=6, hidden=5, C=4, seed=0):
    ps = nn.ParamStore()
    init_verb_head(ps, width, hidden, C, np.random.default_rng(seed))
    return ps


def test_verb_head_examples(rng):
    ps = _head()
    for k in ps:
        ps[k].data[:] = 0
    assert np.array_equal(predict_verbs(rng.normal(size=6), ps).data, np.full(4, 0.5))
    ps["head.b2"].data[2] = 50.0
    assert predict_verbs(rng.normal(size=6), ps).data[2] > 1 - 1e-12


def test_verb_head_scalar_oracle(rng):
    ps = _head(seed=7)
    h = rng.normal(size=6)
    W1, b1, W2, b2 = (ps[f"head.{k}"].data for k in ("w1", "b1", "w2", "b2"))
    hidden = [max(0.0, sum(h[a] * W1[a, u] for a in range(6)) + b1[u]) for u in range(5)]
    for c in range(4):
        z = sum(hidden[u] * W2[u, c] for u in range(5)) + b2[c]
        assert predict_verbs(h, ps).data[c] == np.float64(1 / (1 + np.exp(-z))).item() or abs(
            predict_verbs(h, ps).data[c] - 1 / (1 + np.exp(-z))
        ) < 1e-14


@given(st.integers(0, 2**31), st.floats(-1e3, 1e3))
def test_scores_strictly_inside_unit_interval(seed, scale):
    rng = np.random.default_rng(seed)
    d = predict_verbs(rng.normal(size=(3, 6)) * scale, _head(seed=seed % 100)).data
    assert np.all(np.isfinite(d)) and np.all(d >= 0) and np.all(d <= 1)
    if abs(scale) < 1:
        assert np.all((d > 0) & (d < 1))

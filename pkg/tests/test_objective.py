import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sdt_hoi import nn_core as nn
from sdt_hoi.interaction import InteractionPair
from sdt_hoi.objective import LossConfig, batch_loss, da_weight, focal_terms, focal_terms_from_logits, pair_loss


def test_da_weight_examples():
    assert da_weight(0.0, 1.0, 0.0).data == 0.5
    w = da_weight(np.linspace(0, 1.4, 7), 0.0, 0.3).data
    assert np.all(w == w[0]) and math.isclose(w[0], 1 / (1 + math.exp(-0.3)))
    assert da_weight(0.8, 1.0, 0.0).data > da_weight(0.2, 1.0, 0.0).data


@given(st.floats(1e-3, 20), st.floats(-5, 5))
def test_da_weight_increasing_on_grid(alpha, beta):
    w = da_weight(np.linspace(0, math.sqrt(2), 100), alpha, beta).data
    assert np.all(np.diff(w) > 0) or np.all(w[1:] >= w[:-1])
    assert np.all((w > 0) & (w <= 1))


def test_da_weight_derivative():
    # central differences on the closed form, which has no autodiff in it
    f = lambda D, a, b: 1.0 / (1.0 + math.exp(-(a * D + b)))
    for D, a, b in [(0.1, 1.0, 0.0), (0.7, 2.5, -1.0), (1.3, 0.4, 0.8)]:
        w = f(D, a, b)
        h = 1e-6
        fd = (f(D + h, a, b) - f(D - h, a, b)) / (2 * h)
        assert abs(a * w * (1 - w) - fd) <= 1e-7
        alpha = nn.Tensor(a, requires_grad=True)
        beta = nn.Tensor(b, requires_grad=True)
        da_weight(D, alpha, beta).backward()
        assert abs(alpha.grad - D * w * (1 - w)) <= 1e-12
        assert abs(beta.grad - w * (1 - w)) <= 1e-12


def test_focal_hand_value():
    val = pair_loss(np.array([0.5]), np.array([1.0]), 1.0, LossConfig(2.0, 0.25)).data
    assert abs(val - 0.25 * 0.25 * math.log(2.0)) <= 1e-15
    assert abs(val - 0.043322) <= 1e-6


def test_focal_reduces_to_half_bce(rng):
    delta = rng.uniform(0.01, 0.99, 6)
    y = (rng.random(6) < 0.5).astype(float)
    bce = -np.sum(y * np.log(delta) + (1 - y) * np.log(1 - delta))
    assert abs(pair_loss(delta, y, 1.0, LossConfig(0.0, 0.5)).data - 0.5 * bce) <= 1e-12


def test_perfect_prediction_and_linearity(rng):
    y = np.array([1.0, 0.0, 1.0, 0.0])
    delta = np.where(y > 0, 1 - 1e-9, 1e-9)
    assert pair_loss(delta, y, 1.0).data <= 1e-6 * 4
    d = rng.uniform(0.05, 0.95, 4)
    base = pair_loss(d, y, 1.0).data
    assert pair_loss(d, y, 2.0).data == 2 * base
    for w in (0.0, 0.3, 0.77):
        assert math.isclose(pair_loss(d, y, w).data, w * base, rel_tol=1e-15)


def test_bad_targets_raise():
    with pytest.raises(ValueError):
        pair_loss(np.array([0.4, 0.6]), np.array([1.0, 0.5]), 1.0)
    with pytest.raises(ValueError):
        LossConfig(focal_gamma=-1)
    with pytest.raises(ValueError):
        LossConfig(focal_balance=1.5)


def test_logit_form_matches_probability_form(rng):
    x = rng.normal(0, 3, (5, 4))
    y = (rng.random((5, 4)) < 0.3).astype(float)
    cfg = LossConfig()
    a = focal_terms_from_logits(x, y, cfg).data
    b = focal_terms(1 / (1 + np.exp(-x)), y, cfg).data
    assert np.allclose(a, b, rtol=1e-10, atol=1e-14)
    assert np.all(np.isfinite(focal_terms_from_logits(np.array([800.0, -800.0]), np.array([0.0, 1.0]), cfg).data))


def _pair(delta, D):
    return InteractionPair(0, 1, None, nn.Tensor(np.asarray(delta, dtype=float)), D)


def test_batch_loss_examples():
    cfg = LossConfig()
    d, y = np.array([0.3, 0.8]), np.array([[0.0, 1.0]])
    w = da_weight(0.6, 1.5, -0.2).data
    single = batch_loss([_pair(d, 0.6)], y, 1.5, -0.2, cfg).data
    assert math.isclose(single, pair_loss(d, y[0], w, cfg).data, rel_tol=1e-15)
    none = LossConfig(normalization="none")
    two = batch_loss([_pair(d, 0.6), _pair(d, 0.6)], np.vstack([y, y]), 1.5, -0.2, none).data
    assert math.isclose(two, 2 * batch_loss([_pair(d, 0.6)], y, 1.5, -0.2, none).data, rel_tol=1e-15)
    off = batch_loss([_pair(d, 0.6)], y, 1.5, -0.2, LossConfig(da_enabled=False)).data
    assert math.isclose(off, pair_loss(d, y[0], 1.0, cfg).data, rel_tol=1e-15)
    tiny = batch_loss([_pair([1e-9, 1e-9], 0.2)], np.zeros((1, 2)), 1.0, 0.0, cfg).data
    assert 0 <= tiny < 1e-12
    assert batch_loss([], np.zeros((0, 2)), 1.0, 0.0).data == 0.0


@given(st.integers(0, 2**31))
def test_batch_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 6))
    pairs = [_pair(rng.uniform(1e-6, 1 - 1e-6, 3), float(rng.uniform(0, 1.4))) for _ in range(m)]
    y = (rng.random((m, 3)) < 0.4).astype(float)
    assert batch_loss(pairs, y, float(rng.normal()), float(rng.normal())).data >= 0


def test_batch_loss_gradients(rng):
    ps = nn.ParamStore()
    ps.add("delta", rng.uniform(0.1, 0.9, (3, 4)))
    ps.add("alpha", 1.3)
    ps.add("beta", -0.4)
    y = (rng.random((3, 4)) < 0.5).astype(float)
    dist = [0.1, 0.6, 1.1]

    def loss():
        pairs = [_pair(None, D) for D in dist]
        for k, p in enumerate(pairs):
            pairs[k] = InteractionPair(0, 1, None, ps["delta"][k], p.pair_distance)
        return batch_loss(pairs, y, ps["alpha"], ps["beta"])

    err, per = nn.grad_check(loss, ps)
    assert err <= 1e-6 and set(per) == {"delta", "alpha", "beta"}

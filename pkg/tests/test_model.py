import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypo_ood.geometry import DegenerateNorm
from hypo_ood.model import (EMA, LEARNABLE, MlpEncoder, PrototypeBank, embed, ema_stream,
                            ema_update, init_prototypes, normalization_backward, predict)


def test_identity_encoder_reduces_to_normalize():
    enc = MlpEncoder([np.eye(2)], [np.zeros(2)])
    z, _ = embed(enc, np.array([3.0, 4.0]))
    np.testing.assert_allclose(z, [0.6, 0.8], atol=1e-15)


def test_zero_encoder_raises():
    enc = MlpEncoder([np.zeros((2, 3))], [np.zeros(2)])
    with pytest.raises(DegenerateNorm):
        embed(enc, np.array([1.0, 2.0, 3.0]))


def test_embed_deterministic():
    enc = MlpEncoder.init([5, 7, 4], np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal(5)
    a, _ = embed(enc, x)
    b, _ = embed(enc, x)
    np.testing.assert_array_equal(a, b)


def test_glorot_init_bounds():
    enc = MlpEncoder.init([10, 30, 6], np.random.default_rng(0))
    for w, b in zip(enc.weights, enc.biases):
        fan_out, fan_in = w.shape
        assert np.max(np.abs(w)) <= math.sqrt(6.0 / (fan_in + fan_out))
        assert not b.any()
    assert enc.layer_dims == [10, 30, 6]


def test_predict_examples():
    mu = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    assert predict(mu[1], mu) == 1
    antipodal = np.array([[1.0, 0.0], [-1.0, 0.0]])
    t = math.radians(89)
    assert predict(np.array([math.cos(t), math.sin(t)]), antipodal) == 0
    # exact tie between the two prototypes goes to the lower index
    assert predict(np.array([0.0, 1.0]), antipodal) == 0


def test_ema_examples():
    bank = PrototypeBank(np.array([[1.0, 0.0], [0.0, 1.0]]), EMA, 0.95)
    ema_update(bank, np.array([0.0, 1.0]), 0)
    # oracle: normalize(0.95, 0.05) evaluated by hand
    n = math.hypot(0.95, 0.05)
    np.testing.assert_allclose(bank.mu[0], [0.95 / n, 0.05 / n], atol=1e-15)
    # 0.95 / sqrt(0.905) = 0.998618..., the second entry is 0.052559...
    np.testing.assert_allclose(bank.mu[0], [0.998618, 0.052559], atol=1e-6)
    np.testing.assert_array_equal(bank.mu[1], [0.0, 1.0])

    same = PrototypeBank(np.array([[1.0, 0.0], [0.0, 1.0]]), EMA, 1.0)
    ema_update(same, np.array([0.0, 1.0]), 0)
    np.testing.assert_array_equal(same.mu[0], [1.0, 0.0])
    full = PrototypeBank(np.array([[1.0, 0.0], [0.0, 1.0]]), EMA, 0.0)
    ema_update(full, np.array([0.6, 0.8]), 0)
    np.testing.assert_allclose(full.mu[0], [0.6, 0.8], atol=1e-15)


def test_ema_antipodal_collapse_and_mode():
    bank = PrototypeBank(np.array([[1.0, 0.0], [0.0, 1.0]]), EMA, 0.5)
    with pytest.raises(DegenerateNorm):
        ema_update(bank, np.array([-1.0, 0.0]), 0)
    with pytest.raises(ValueError):
        ema_update(PrototypeBank(np.eye(2), LEARNABLE), np.array([1.0, 0.0]), 0)


def test_ema_stream_matches_repeated_updates():
    rng = np.random.default_rng(2)
    Z = rng.standard_normal((30, 4))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    labels = rng.integers(0, 3, 30)
    a = init_prototypes(3, 4, np.random.default_rng(0))
    b = a.copy()
    ema_stream(a, Z, labels)
    for z, c in zip(Z, labels):
        ema_update(b, z, c)
    np.testing.assert_array_equal(a.mu, b.mu)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 0.999))
def test_bank_stays_unit_under_ema(seed, alpha):
    rng = np.random.default_rng(seed)
    bank = init_prototypes(4, 5, rng, EMA, alpha)
    Z = rng.standard_normal((300, 5))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    try:
        ema_stream(bank, Z, rng.integers(0, 4, 300))
    except DegenerateNorm:
        return
    assert np.max(np.abs(np.linalg.norm(bank.mu, axis=1) - 1.0)) <= 1e-12


def test_init_prototypes_examples():
    bank = init_prototypes(7, 512, np.random.default_rng(3))
    assert np.max(np.abs(np.linalg.norm(bank.mu, axis=1) - 1.0)) <= 1e-12
    np.testing.assert_array_equal(bank.mu, init_prototypes(7, 512, np.random.default_rng(3)).mu)
    sims = [float(np.prod(init_prototypes(2, 2, np.random.default_rng(s)).mu, axis=0).sum())
            for s in range(1000)]
    assert abs(np.mean(sims)) < 0.1
    with pytest.raises(ValueError):
        init_prototypes(1, 3, np.random.default_rng(0))


def test_normalization_backward_example():
    a, b = 0.7, -1.3
    out = normalization_backward(np.array([1.0, 0.0]), np.array([1.0]), np.array([a, b]))
    np.testing.assert_allclose(out, [[0.0, b]], atol=1e-15)


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_prediction_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    enc = MlpEncoder.init([4, 6, 3], rng)
    bank = init_prototypes(3, 3, rng)
    enc.biases[-1][:] = rng.standard_normal(3)
    X = rng.standard_normal((20, 4))
    z1 = enc.forward(X)[0]
    scaled = enc.copy()
    scaled.weights[-1] *= scale
    scaled.biases[-1] *= scale
    z2 = scaled.forward(X)[0]
    np.testing.assert_array_equal(predict(z1, bank), predict(z2, bank))

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypo_ood import losses
from hypo_ood.geometry import vmf_posterior
from hypo_ood.gradcheck import check_instance, rel_error
from hypo_ood.model import EMA, LEARNABLE, MlpEncoder, PrototypeBank
from hypo_ood.losses import (Batch, LossConfig, cross_entropy_baseline,
                             hard_negative_variation_loss, separation_loss, total_loss,
                             variation_loss)

ANTIPODAL = np.array([[1.0, 0.0], [-1.0, 0.0]])
ETF3 = np.array([[1.0, 0.0], [-0.5, math.sqrt(3) / 2], [-0.5, -math.sqrt(3) / 2]])
TAU1 = LossConfig(tau=1.0)


def unit(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# reference formulas written as plain loops, independent of the vectorized code

def ref_variation(Z, y, mu, tau, envs=None):
    total = 0.0
    for i in range(len(Z)):
        terms = [math.exp(Z[i] @ mu[j] / tau) for j in range(len(mu))]
        if envs is not None:
            terms += [math.exp(Z[i] @ Z[k] / tau) for k in range(len(Z))
                      if y[k] != y[i] and envs[k] == envs[i]]
        total += -math.log(math.exp(Z[i] @ mu[y[i]] / tau) / sum(terms))
    return total / len(Z)


def ref_separation(mu, tau):
    c = len(mu)
    out = 0.0
    for i in range(c):
        out += math.log(sum(math.exp(mu[i] @ mu[j] / tau) for j in range(c) if j != i) / (c - 1))
    return out / c


def test_variation_examples():
    z = ANTIPODAL[:1]
    assert variation_loss(Batch(z, [0]), ANTIPODAL, TAU1) == pytest.approx(
        -math.log(math.e / (math.e + 1 / math.e)), abs=1e-15)
    assert variation_loss(Batch(z, [0]), ANTIPODAL, TAU1) == pytest.approx(0.12693, abs=5e-6)
    assert variation_loss(Batch([[0.0, 1.0]], [1]), ANTIPODAL, TAU1) == pytest.approx(
        math.log(2), abs=1e-15)
    # equal similarity to three prototypes gives log C
    mu = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0], [0, 0, 1.0, 0]])
    assert variation_loss(Batch([[0, 0, 0, 1.0]], [2]), mu, TAU1) == pytest.approx(math.log(3))


def test_separation_examples():
    assert separation_loss(ANTIPODAL, TAU1) == pytest.approx(-1.0, abs=1e-15)
    assert separation_loss(ETF3, TAU1) == pytest.approx(-0.5, abs=1e-15)
    same = np.array([[0.0, 1.0]] * 4)
    assert separation_loss(same, TAU1) == pytest.approx(1.0, abs=1e-15)


def test_hard_negative_examples():
    z = np.array([[1.0, 0.0], [1.0, 0.0]])
    b = Batch(z, [0, 1], [0, 0])
    e = math.e
    term1 = -math.log(e / (e + 1 / e + e))
    # log(2 + e^-2)
    assert term1 == pytest.approx(0.758624, abs=1e-6)
    # sample 2 (class 1, prototype (-1,0)): numerator e^-1, denominator e + e^-1 + e
    term2 = -math.log((1 / e) / (e + 1 / e + e))
    assert hard_negative_variation_loss(b, ANTIPODAL, TAU1) == pytest.approx(
        (term1 + term2) / 2, abs=1e-14)
    # single env, single class: no hard negatives at all
    rng = np.random.default_rng(0)
    one = Batch(unit(rng, 5, 2), [1] * 5, [3] * 5)
    assert hard_negative_variation_loss(one, ANTIPODAL, TAU1) == variation_loss(one, ANTIPODAL, TAU1)


def test_total_loss_combines_terms():
    rng = np.random.default_rng(1)
    b = Batch(unit(rng, 6, 3), [0, 1, 2, 0, 1, 2], [0, 0, 0, 1, 1, 1])
    mu = unit(rng, 3, 3)
    for lam in (1.0, 2.0, 4.0):
        cfg = LossConfig(tau=0.5, lam=lam)
        v, s = variation_loss(b, mu, cfg), separation_loss(mu, cfg)
        assert total_loss(b, mu, cfg) == pytest.approx(lam * v + s, abs=1e-14)
        off = LossConfig(tau=0.5, lam=lam, separation_enabled=False)
        assert total_loss(b, mu, off) == lam * v


@pytest.mark.parametrize("lam, expected", [(1.0, -0.5), (2.0, 0.0)])
def test_total_loss_weighting(monkeypatch, lam, expected):
    mu = ANTIPODAL
    monkeypatch.setattr(losses, "variation_loss_grad",
                        lambda Z, y, m, t: (0.5, np.zeros_like(Z), np.zeros_like(m)))
    monkeypatch.setattr(losses, "separation_loss_grad", lambda m, t: (-1.0, np.zeros_like(m)))
    assert total_loss(Batch([[1.0, 0.0]], [0]), mu, LossConfig(lam=lam)) == expected


def test_cross_entropy_examples():
    assert cross_entropy_baseline(np.zeros((1, 4)), [2]) == pytest.approx(math.log(4))
    assert cross_entropy_baseline(np.array([[50.0, 0.0, 0.0]]), [0]) < 1e-20
    la = cross_entropy_baseline(np.array([[1.0, 2.0]]), [0])
    lb = cross_entropy_baseline(np.array([[0.5, -1.0]]), [1])
    both = cross_entropy_baseline(np.array([[1.0, 2.0], [0.5, -1.0]]), [0, 1])
    assert both == pytest.approx((la + lb) / 2, abs=1e-15)


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(tau=0.0)
    with pytest.raises(ValueError):
        LossConfig(lam=-1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 5), st.integers(2, 6), st.sampled_from([0.1, 0.5, 1.0]))
def test_values_match_reference(seed, c, d, tau):
    rng = np.random.default_rng(seed)
    Z = unit(rng, 7, d)
    y = rng.integers(0, c, 7)
    envs = rng.integers(0, 2, 7)
    mu = unit(rng, c, d)
    cfg = LossConfig(tau=tau)
    b = Batch(Z, y, envs)
    assert variation_loss(b, mu, cfg) == pytest.approx(ref_variation(Z, y, mu, tau), rel=1e-12)
    assert hard_negative_variation_loss(b, mu, cfg) == pytest.approx(
        ref_variation(Z, y, mu, tau, envs), rel=1e-12)
    assert separation_loss(mu, cfg) == pytest.approx(ref_separation(mu, tau), rel=1e-12, abs=1e-12)
    # consistency with the posterior
    post = vmf_posterior(Z, mu, tau)
    direct = -np.mean(np.log(post[np.arange(7), y]))
    assert abs(variation_loss(b, mu, cfg) - direct) <= 1e-12
    assert hard_negative_variation_loss(b, mu, cfg) >= variation_loss(b, mu, cfg)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_total_loss_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    Z = unit(rng, 9, 4)
    y = rng.integers(0, 3, 9)
    e = rng.integers(0, 3, 9)
    mu = unit(rng, 3, 4)
    perm = rng.permutation(9)
    for hn in (False, True):
        cfg = LossConfig(tau=0.1, hard_negatives=hn)
        a = total_loss(Batch(Z, y, e), mu, cfg)
        b = total_loss(Batch(Z[perm], y[perm], e[perm]), mu, cfg)
        assert abs(a - b) <= 1e-12


def test_variation_decreases_along_geodesic():
    rng = np.random.default_rng(4)
    mu = unit(rng, 3, 5)
    z0 = unit(rng, 1, 5)[0]
    target = mu[1]
    # geodesic from z0 to mu[1]
    omega = math.acos(np.clip(z0 @ target, -1, 1))
    vals = []
    for t in np.linspace(0.0, 1.0, 10):
        z = (math.sin((1 - t) * omega) * z0 + math.sin(t * omega) * target) / math.sin(omega)
        vals.append(variation_loss(Batch(z[None, :], [1]), mu, LossConfig(tau=0.1)))
    assert all(b < a for a, b in zip(vals, vals[1:]))


def _numeric_grad(f, x, step=1e-6):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


@pytest.mark.parametrize("tau", [0.1, 1.0])
@pytest.mark.parametrize("hard", [False, True])
def test_embedding_and_prototype_gradients_against_reference(tau, hard):
    rng = np.random.default_rng(11)
    Z = unit(rng, 6, 3)
    y = np.array([0, 1, 2, 0, 1, 1])
    envs = np.array([0, 0, 1, 1, 0, 1])
    mu = unit(rng, 3, 3)
    cfg = LossConfig(tau=tau, lam=2.0, hard_negatives=hard)
    _, _, dz, dmu = losses.total_loss_grad(Batch(Z, y, envs), mu, cfg)

    def ref():
        return 2.0 * ref_variation(Z, y, mu, tau, envs if hard else None) + ref_separation(mu, tau)

    assert rel_error(dz, _numeric_grad(ref, Z)) < 1e-6
    assert rel_error(dmu, _numeric_grad(ref, mu)) < 1e-6


def test_backward_against_reference_encoder():
    """Encoder weight gradients on a random 2-env, C=3, d=4 batch."""
    rng = np.random.default_rng(7)
    enc = MlpEncoder.init([5, 6, 4], rng)
    enc.biases = [rng.normal(scale=0.1, size=b.shape) for b in enc.biases]
    X = rng.standard_normal((10, 5))
    y = rng.integers(0, 3, 10)
    envs = rng.integers(0, 2, 10)
    mu = unit(rng, 3, 4)
    cfg = LossConfig(tau=0.5)
    z, trace = enc.forward(X)
    _, _, grads = losses.backward(Batch(z, y, envs), PrototypeBank(mu), cfg, trace, enc)

    def ref():
        h = X
        for l, (w, b) in enumerate(zip(enc.weights, enc.biases)):
            h = h @ w.T + b
            if l < len(enc.weights) - 1:
                h = np.maximum(h, 0.0)
        zz = h / np.linalg.norm(h, axis=1, keepdims=True)
        return ref_variation(zz, y, mu, 0.5) + ref_separation(mu, 0.5)

    for l in range(2):
        assert rel_error(grads[f"W{l}"], _numeric_grad(ref, enc.weights[l])) < 1e-5
        assert rel_error(grads[f"b{l}"], _numeric_grad(ref, enc.biases[l])) < 1e-5


def test_ema_mode_separation_gives_no_encoder_or_prototype_gradient():
    rng = np.random.default_rng(3)
    enc = MlpEncoder.init([4, 5, 3], rng)
    X = rng.standard_normal((8, 4))
    y = np.arange(8) % 3
    mu = unit(rng, 3, 3)
    z, trace = enc.forward(X)
    b = Batch(z, y)
    with_sep = losses.backward(b, PrototypeBank(mu, EMA), LossConfig(), trace, enc)[2]
    without = losses.backward(b, PrototypeBank(mu, EMA),
                              LossConfig(separation_enabled=False), trace, enc)[2]
    for k in with_sep:
        np.testing.assert_array_equal(with_sep[k], without[k])
    assert not with_sep["prototypes"].any()
    learn = losses.backward(b, PrototypeBank(mu, LEARNABLE), LossConfig(), trace, enc)[2]
    assert np.abs(learn["prototypes"]).max() > 0


@pytest.mark.parametrize("kind", ["var", "sep", "hard_negative", "total", "ce"])
def test_gradcheck_instances(kind):
    for seed, (c, d, tau) in enumerate([(2, 3, 0.1), (3, 8, 1.0), (5, 3, 0.1)]):
        assert check_instance(kind, seed, c, d, tau).max_rel_error < 1e-5

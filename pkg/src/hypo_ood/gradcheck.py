"""Analytic-vs-central-difference gradient comparison on random small instances."""
from dataclasses import dataclass

import numpy as np

from . import losses
from .geometry import random_unit_directions
from .model import EMA, LEARNABLE, LinearHead, MlpEncoder, PrototypeBank

LOSS_KINDS = ("var", "sep", "hard_negative", "total", "ce")


@dataclass
class GradCheckResult:
    kind: str
    seed: int
    n_classes: int
    dim: int
    tau: float
    max_rel_error: float
    n_params: int


def rel_error(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def _instance(seed, n_classes, dim, d_in=4, hidden=6, n=12):
    rng = np.random.default_rng(seed)
    enc = MlpEncoder.init([d_in, hidden, dim], rng)
    # nonzero biases so the bias paths are exercised
    enc.biases = [rng.normal(scale=0.1, size=b.shape) for b in enc.biases]
    X = rng.standard_normal((n, d_in))
    labels = rng.integers(0, n_classes, size=n)
    labels[:n_classes] = np.arange(n_classes)
    envs = rng.integers(0, 2, size=n)
    mu = random_unit_directions(n_classes, dim, rng)
    head = LinearHead.init(n_classes, dim, rng)
    return enc, X, labels, envs, mu, head


def _params(enc, mu, head, kind):
    p = {}
    for l, (w, b) in enumerate(zip(enc.weights, enc.biases)):
        p[f"W{l}"] = w
        p[f"b{l}"] = b
    if kind == "ce":
        p["head_W"] = head.weight
        p["head_b"] = head.bias
    else:
        p["prototypes"] = mu
    return p


def _cfg(kind, tau, lam):
    if kind == "var":
        return losses.LossConfig(tau=tau, lam=lam, separation_enabled=False)
    if kind == "hard_negative":
        return losses.LossConfig(tau=tau, lam=lam, hard_negatives=True, separation_enabled=False)
    return losses.LossConfig(tau=tau, lam=lam, hard_negatives=True, separation_enabled=True)


def _value_and_grads(kind, enc, X, labels, envs, mu, head, tau, lam, mode):
    if kind == "ce":
        trace = enc.forward_raw(X)
        return losses.erm_backward(trace, labels, enc, head)
    if kind == "sep":
        value, dmu = losses.separation_loss_grad(mu, tau)
        grads = {f"{k}{l}": np.zeros_like(a)
                 for l, (w, b) in enumerate(zip(enc.weights, enc.biases))
                 for k, a in (("W", w), ("b", b))}
        grads["prototypes"] = dmu if mode == LEARNABLE else np.zeros_like(mu)
        return value, grads
    z, trace = enc.forward(X)
    bank = PrototypeBank(mu, mode=mode)
    bank.mu = mu  # share storage so finite differences see perturbations
    value, _, grads = losses.backward(losses.Batch(z, labels, envs), bank, _cfg(kind, tau, lam),
                                      trace, enc)
    return value, grads


def check_instance(kind, seed, n_classes=3, dim=4, tau=0.5, lam=1.0, step=1e-6):
    """Max relative error over every parameter entry for one random instance."""
    enc, X, labels, envs, mu, head = _instance(seed, n_classes, dim)
    _, grads = _value_and_grads(kind, enc, X, labels, envs, mu, head, tau, lam, LEARNABLE)
    params = _params(enc, mu, head, kind)
    worst = 0.0
    count = 0
    for name, arr in params.items():
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = _value_and_grads(kind, enc, X, labels, envs, mu, head, tau, lam, LEARNABLE)[0]
            flat[i] = orig - step
            fm = _value_and_grads(kind, enc, X, labels, envs, mu, head, tau, lam, LEARNABLE)[0]
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
        worst = max(worst, rel_error(grads[name], numeric))
        count += arr.size
    return GradCheckResult(kind, seed, n_classes, dim, tau, worst, count)


def run_grad_check(seeds=20, taus=(0.1, 1.0), classes=(2, 3, 5), dims=(3, 8), kinds=LOSS_KINDS,
                   base_seed=0):
    """Cycle through the (C, d, tau) grid for ``seeds`` instances per loss kind."""
    grid = [(c, d, t) for c in classes for d in dims for t in taus]
    results = []
    for k in range(seeds):
        c, d, t = grid[k % len(grid)]
        for kind in kinds:
            results.append(check_instance(kind, base_seed + k, c, d, t))
    return results

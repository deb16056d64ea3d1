"""HYPO objective, hard-negative variant, cross-entropy baseline and their gradients.

Every ``*_grad`` function returns the loss value together with gradients
with respect to its array inputs. Prototype gradients are returned
unconditionally; whether they are used depends on the bank mode.
"""
from dataclasses import dataclass

import numpy as np

from .geometry import logsumexp, softmax
from .model import LEARNABLE


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    lam: float = 1.0
    hard_negatives: bool = False
    separation_enabled: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")


@dataclass
class Batch:
    z: np.ndarray
    labels: np.ndarray
    envs: np.ndarray = None

    def __post_init__(self):
        self.z = np.atleast_2d(np.asarray(self.z, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.envs is None:
            self.envs = np.zeros(len(self.labels), dtype=np.int64)
        self.envs = np.asarray(self.envs, dtype=np.int64).reshape(-1)
        n = self.z.shape[0]
        if n < 1 or len(self.labels) != n or len(self.envs) != n:
            raise ValueError("batch arrays must be parallel and nonempty")


def _mu(bank):
    return np.asarray(getattr(bank, "mu", bank), dtype=np.float64)


def variation_loss_grad(Z, labels, mu, tau):
    n = Z.shape[0]
    s = Z @ mu.T / tau
    rows = np.arange(n)
    value = np.mean(logsumexp(s, axis=1) - s[rows, labels])
    ds = softmax(s, axis=1)
    ds[rows, labels] -= 1.0
    ds /= n
    return float(value), ds @ mu / tau, ds.T @ Z / tau


def variation_loss(batch, bank, cfg):
    """Mean negative log vMF posterior of the true class."""
    return variation_loss_grad(batch.z, batch.labels, _mu(bank), cfg.tau)[0]


def hard_negative_mask(labels, envs):
    """M[i, j] = 1 when j is a different-class sample from the same environment."""
    return (labels[:, None] != labels[None, :]) & (envs[:, None] == envs[None, :])


def hard_negative_variation_loss_grad(Z, labels, envs, mu, tau):
    n = Z.shape[0]
    rows = np.arange(n)
    s = Z @ mu.T / tau
    k = Z @ Z.T / tau
    mask = hard_negative_mask(labels, envs)
    k_masked = np.where(mask, k, -np.inf)
    m = np.maximum(s.max(axis=1), k_masked.max(axis=1))
    es = np.exp(s - m[:, None])
    ek = np.where(mask, np.exp(k_masked - m[:, None]), 0.0)
    denom = es.sum(axis=1) + ek.sum(axis=1)
    value = np.mean(m + np.log(denom) - s[rows, labels])
    ps = es / denom[:, None]
    pk = ek / denom[:, None]
    ps[rows, labels] -= 1.0
    ps /= n
    pk /= n
    dz = ps @ mu / tau + (pk + pk.T) @ Z / tau
    return float(value), dz, ps.T @ Z / tau


def hard_negative_variation_loss(batch, bank, cfg):
    """Variation loss whose denominator also holds same-env, other-class pairs."""
    return hard_negative_variation_loss_grad(
        batch.z, batch.labels, batch.envs, _mu(bank), cfg.tau)[0]


def separation_loss_grad(mu, tau):
    c = mu.shape[0]
    g = mu @ mu.T / tau
    off = ~np.eye(c, dtype=bool)
    g_off = np.where(off, g, -np.inf)
    per_proto = logsumexp(g_off, axis=1) - np.log(c - 1)
    p = softmax(g_off, axis=1)
    dmu = (p + p.T) @ mu / (tau * c)
    return float(np.mean(per_proto)), dmu


def separation_loss(bank, cfg):
    """Mean over prototypes of the log-mean-exp similarity to the others."""
    return separation_loss_grad(_mu(bank), cfg.tau)[0]


def total_loss_grad(batch, bank, cfg):
    """Returns (value, parts, dL/dZ, dL/dmu) for lambda * L_var + L_sep."""
    mu = _mu(bank)
    if cfg.hard_negatives:
        var, dz, dmu = hard_negative_variation_loss_grad(
            batch.z, batch.labels, batch.envs, mu, cfg.tau)
    else:
        var, dz, dmu = variation_loss_grad(batch.z, batch.labels, mu, cfg.tau)
    sep, dmu_sep = separation_loss_grad(mu, cfg.tau)
    dz = cfg.lam * dz
    dmu = cfg.lam * dmu
    value = cfg.lam * var
    if cfg.separation_enabled:
        value = value + sep
        dmu = dmu + dmu_sep
    return value, {"var": var, "sep": sep}, dz, dmu


def total_loss(batch, bank, cfg):
    return total_loss_grad(batch, bank, cfg)[0]


def cross_entropy_grad(logits, labels):
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = logits.shape[0]
    rows = np.arange(n)
    value = np.mean(logsumexp(logits, axis=1) - logits[rows, labels])
    d = softmax(logits, axis=1)
    d[rows, labels] -= 1.0
    return float(value), d / n


def cross_entropy_baseline(logits, labels):
    """Mean negative log-softmax at the true label."""
    return cross_entropy_grad(logits, labels)[0]


def backward(batch, bank, cfg, trace, encoder):
    """Analytic gradient of ``total_loss`` for all encoder parameters.

    ``trace`` must be the forward trace that produced ``batch.z``. The
    ``"prototypes"`` entry is zero for EMA banks (stop-gradient).
    Returns (value, parts, grads) with grads keyed like the trainer's params.
    """
    value, parts, dz, dmu = total_loss_grad(batch, bank, cfg)
    gw, gb, _ = encoder.backward(trace, dz)
    grads = {}
    for l, (w, b) in enumerate(zip(gw, gb)):
        grads[f"W{l}"] = w
        grads[f"b{l}"] = b
    if getattr(bank, "mode", None) == LEARNABLE:
        grads["prototypes"] = dmu
    else:
        grads["prototypes"] = np.zeros_like(_mu(bank))
    return value, parts, grads


def erm_backward(X_trace, labels, encoder, head):
    """Gradient of cross-entropy on a linear head over the raw encoder output."""
    logits = head.logits(X_trace.h)
    value, dlogits = cross_entropy_grad(logits, labels)
    grads = {"head_W": dlogits.T @ X_trace.h, "head_b": dlogits.sum(axis=0)}
    gw, gb = encoder.backward_raw(X_trace, dlogits @ head.weight)
    for l, (w, b) in enumerate(zip(gw, gb)):
        grads[f"W{l}"] = w
        grads[f"b{l}"] = b
    return value, grads

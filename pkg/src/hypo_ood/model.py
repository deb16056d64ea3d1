"""MLP encoder with a hyperspherical output, class prototypes and a linear head."""
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .geometry import EPS_NORM, DegenerateNorm, normalize_rows, random_unit_directions

EMA = "ema"
LEARNABLE = "learnable"


@dataclass
class ForwardTrace:
    """Activations kept for backpropagation (rows are samples)."""

    inputs: np.ndarray
    pre: List[np.ndarray]
    post: List[np.ndarray]
    h: np.ndarray
    h_norm: np.ndarray
    z: np.ndarray


class MlpEncoder:
    """Fully connected ReLU network ``h: R^d_in -> R^d``; identity on the output layer."""

    def __init__(self, weights, biases):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        if len(self.weights) < 1 or len(self.weights) != len(self.biases):
            raise ValueError("need at least one layer with matching weights and biases")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {l}: bad shapes {w.shape}, {b.shape}")
            if l and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l}: input dim {w.shape[1]} does not match "
                                 f"previous output {self.weights[l - 1].shape[0]}")

    @classmethod
    def init(cls, layer_dims, rng):
        """Glorot-uniform weights, zero biases."""
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 2 or min(layer_dims) < 1:
            raise ValueError("layer_dims needs >= 2 positive entries")
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def layer_dims(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def d_in(self):
        return self.weights[0].shape[1]

    @property
    def d_out(self):
        return self.weights[-1].shape[0]

    def copy(self):
        return MlpEncoder([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def raw(self, X):
        """Unnormalized output h(X) plus the per-layer trace."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.d_in:
            raise ValueError(f"input dim {X.shape[1]} != encoder d_in {self.d_in}")
        pre, post = [], []
        a = X
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            p = a @ w.T + b
            a = p if l == last else np.maximum(p, 0.0)
            pre.append(p)
            post.append(a)
        return a, pre, post

    def forward(self, X):
        """Embed a batch: returns (Z, trace) with unit-norm rows Z."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        h, pre, post = self.raw(X)
        z, norms = normalize_rows(h)
        return z, ForwardTrace(X, pre, post, h, norms, z)

    def forward_raw(self, X):
        """Trace without the normalization step (``z`` and ``h_norm`` left unset)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        h, pre, post = self.raw(X)
        return ForwardTrace(X, pre, post, h, None, None)

    def backward(self, trace, grad_z):
        """Backpropagate dL/dZ through normalization and the MLP.

        Returns (weight grads, bias grads, dL/dh).
        """
        grad_h = normalization_backward(trace.z, trace.h_norm, grad_z)
        gw, gb = self.backward_raw(trace, grad_h)
        return gw, gb, grad_h

    def backward_raw(self, trace, grad_h):
        n_layers = len(self.weights)
        gw = [None] * n_layers
        gb = [None] * n_layers
        delta = np.asarray(grad_h, dtype=np.float64)
        for l in range(n_layers - 1, -1, -1):
            if l != n_layers - 1:
                delta = delta * (trace.pre[l] > 0.0)
            a_prev = trace.inputs if l == 0 else trace.post[l - 1]
            gw[l] = delta.T @ a_prev
            gb[l] = delta.sum(axis=0)
            if l:
                delta = delta @ self.weights[l]
        return gw, gb


def normalization_backward(z, h_norm, grad_z):
    """Apply the Jacobian (I - z z^T)/||h|| of h -> h/||h|| row-wise."""
    z = np.atleast_2d(z)
    grad_z = np.atleast_2d(grad_z)
    radial = np.sum(grad_z * z, axis=1, keepdims=True)
    return (grad_z - radial * z) / np.reshape(h_norm, (-1, 1))


def embed(enc, x):
    """Single-input or batch embedding; single inputs return a 1-D z."""
    x = np.asarray(x, dtype=np.float64)
    z, trace = enc.forward(x)
    return (z[0] if x.ndim == 1 else z), trace


@dataclass
class PrototypeBank:
    mu: np.ndarray
    mode: str = EMA
    alpha: float = 0.95

    def __post_init__(self):
        self.mu = np.array(self.mu, dtype=np.float64)
        if self.mu.ndim != 2 or self.mu.shape[0] < 2 or self.mu.shape[1] < 2:
            raise ValueError("prototype bank needs shape (C >= 2, d >= 2)")
        if self.mode not in (EMA, LEARNABLE):
            raise ValueError(f"unknown prototype mode {self.mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    @property
    def n_classes(self):
        return self.mu.shape[0]

    @property
    def dim(self):
        return self.mu.shape[1]

    def copy(self):
        return PrototypeBank(self.mu.copy(), self.mode, self.alpha)

    def renormalize(self):
        self.mu = normalize_rows(self.mu)[0]


def init_prototypes(n_classes, d, rng, mode=EMA, alpha=0.95):
    if n_classes < 2 or d < 2:
        raise ValueError("need C >= 2 and d >= 2")
    return PrototypeBank(random_unit_directions(n_classes, d, rng), mode, alpha)


def ema_update(bank, z, c):
    """mu_c <- normalize(alpha mu_c + (1 - alpha) z), in place; returns the bank."""
    return ema_stream(bank, np.asarray(z, dtype=np.float64)[None, :], [c])


def ema_stream(bank, Z, labels):
    """Sequential per-sample EMA updates in row order."""
    if bank.mode != EMA:
        raise ValueError("EMA updates require an EMA-mode bank")
    a, b = bank.alpha, 1.0 - bank.alpha
    mu = bank.mu
    for z, c in zip(Z, labels):
        v = a * mu[c] + b * z
        n = np.sqrt(v @ v)
        if not n > EPS_NORM:
            raise DegenerateNorm(f"EMA update of class {c} collapsed (norm {n:.3e})")
        mu[c] = v / n
    return bank


def predict(z, bank):
    """Nearest prototype by inner product; ties go to the lowest index."""
    mu = getattr(bank, "mu", bank)
    sims = np.asarray(z) @ np.asarray(mu).T
    return np.argmax(sims, axis=-1)


@dataclass
class LinearHead:
    """Linear classifier on the raw encoder output (ERM baseline)."""

    weight: np.ndarray
    bias: np.ndarray = field(default=None)

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64)
        if self.bias is None:
            self.bias = np.zeros(self.weight.shape[0])
        self.bias = np.array(self.bias, dtype=np.float64)

    @classmethod
    def init(cls, n_classes, d, rng):
        bound = np.sqrt(6.0 / (n_classes + d))
        return cls(rng.uniform(-bound, bound, size=(n_classes, d)), np.zeros(n_classes))

    @property
    def n_classes(self):
        return self.weight.shape[0]

    def logits(self, H):
        return np.atleast_2d(H) @ self.weight.T + self.bias

    def copy(self):
        return LinearHead(self.weight.copy(), self.bias.copy())


def predict_head(H, head: Optional[LinearHead]):
    return np.argmax(head.logits(H), axis=-1)

"""Hypersphere primitives: normalization, random directions, vMF class posterior."""
import numpy as np

EPS_NORM = 1e-12


class DegenerateNorm(ValueError):
    """Raised when a vector is too short to be projected onto the sphere."""

    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


def normalize(v):
    """Project ``v`` onto the unit sphere, rejecting (near-)zero vectors."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not n > EPS_NORM:
        raise DegenerateNorm(f"cannot normalize vector with norm {n:.3e}")
    return v / n


def normalize_rows(V):
    """Row-wise ``normalize``; returns (unit rows, row norms)."""
    V = np.asarray(V, dtype=np.float64)
    norms = np.linalg.norm(V, axis=1)
    bad = np.flatnonzero(~(norms > EPS_NORM))
    if bad.size:
        raise DegenerateNorm(
            f"row {bad[0]} has norm {norms[bad[0]]:.3e} <= {EPS_NORM:g}")
    return V / norms[:, None], norms


def is_unit(v, atol=1e-9):
    return bool(np.all(np.abs(np.linalg.norm(np.atleast_2d(v), axis=1) - 1.0) <= atol))


def random_unit_direction(d, rng):
    """Uniform draw on S^{d-1} (Gaussian sample, then normalize)."""
    if d < 2:
        raise ValueError("dimension must be >= 2")
    return normalize(rng.standard_normal(d))


def random_unit_directions(m, d, rng):
    """``m`` uniform directions as rows; the first k rows do not depend on m."""
    if d < 2:
        raise ValueError("dimension must be >= 2")
    if m == 0:
        return np.zeros((0, d))
    return normalize_rows(rng.standard_normal((m, d)))[0]


def logsumexp(a, axis=-1):
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def softmax(a, axis=-1):
    a = np.asarray(a, dtype=np.float64)
    e = np.exp(a - np.max(a, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def vmf_posterior(z, prototypes, tau):
    """Class posterior of a vMF mixture with shared concentration 1/tau.

    ``z`` may be a single unit vector or a stack of them (rows). The
    normalizer Z_d(kappa) cancels, so no Bessel functions are involved.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    mu = getattr(prototypes, "mu", prototypes)
    sims = np.asarray(z, dtype=np.float64) @ np.asarray(mu).T
    return softmax(sims / tau, axis=-1)


def vmf_log_density_unnormalized(z, mean_direction, kappa):
    """log p(z | mu, kappa) up to the additive constant log Z_d(kappa)."""
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    return kappa * float(np.dot(mean_direction, z))

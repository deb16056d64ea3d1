"""Empirical estimators: 1-D Wasserstein-1, Sinkhorn divergence, intra-class
variation, directional sup-variation, inter-class separation, alignment slack
and worst-environment accuracy."""
import csv
import itertools
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .geometry import is_unit, logsumexp, normalize_rows, random_unit_directions

SINKHORN = "sinkhorn"
W1_PROJ = "w1proj"


class NoConvergence(RuntimeError):
    pass


class EmptyCell(ValueError):
    def __init__(self, env, label):
        super().__init__(f"no samples for env={env}, label={label}")
        self.env = env
        self.label = label


@dataclass(frozen=True)
class SinkhornConfig:
    reg: float = 0.05
    max_iters: int = 2000
    tol: float = 1e-6
    newton_every: int = 20

    def __post_init__(self):
        if not self.reg > 0:
            raise ValueError("reg must be positive")
        if self.max_iters < 1 or not self.tol > 0:
            raise ValueError("max_iters >= 1 and tol > 0 required")


@dataclass
class EmbeddingDump:
    z: np.ndarray
    labels: np.ndarray
    envs: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.z = np.atleast_2d(np.asarray(self.z, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.envs = np.asarray(self.envs, dtype=np.int64).reshape(-1)
        if not (len(self.z) == len(self.labels) == len(self.envs)):
            raise ValueError("dump arrays must be parallel")
        if len(self.z) and not is_unit(self.z):
            raise ValueError("dump embeddings must be unit norm")

    @property
    def env_ids(self):
        return sorted(np.unique(self.envs).tolist())

    @property
    def classes(self):
        return sorted(np.unique(self.labels).tolist())

    @property
    def dim(self):
        return self.z.shape[1]

    def cell(self, env, label):
        rows = self.z[(self.envs == env) & (self.labels == label)]
        if not len(rows):
            raise EmptyCell(env, label)
        return rows

    def cell_sizes(self, classes=None):
        classes = self.classes if classes is None else classes
        return {(e, y): int(np.sum((self.envs == e) & (self.labels == y)))
                for e in self.env_ids for y in classes}

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["env", "label"] + [f"z{i + 1}" for i in range(self.dim)])
            for z, y, e in zip(self.z, self.labels, self.envs):
                w.writerow([int(e), int(y)] + [format(v, ".17g") for v in z])

    @classmethod
    def load_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        body = np.array([[float(v) for v in r] for r in rows[1:]])
        return cls(body[:, 2:], body[:, 1].astype(int), body[:, 0].astype(int), str(path))


def w1_1d(a, b):
    """Exact W1 between two empirical laws on the line, via quantile functions."""
    a = np.sort(np.asarray(a, dtype=np.float64).reshape(-1))
    b = np.sort(np.asarray(b, dtype=np.float64).reshape(-1))
    n, m = len(a), len(b)
    if not n or not m:
        raise ValueError("both samples must be nonempty")
    if n == m:
        return float(np.mean(np.abs(a - b)))
    grid = np.union1d(np.arange(n + 1) / n, np.arange(m + 1) / m)
    widths = np.diff(grid)
    mids = 0.5 * (grid[:-1] + grid[1:])
    qa = a[np.minimum((mids * n).astype(np.int64), n - 1)]
    qb = b[np.minimum((mids * m).astype(np.int64), m - 1)]
    return float(np.sum(widths * np.abs(qa - qb)))


def pairwise_distances(A, B):
    sq = np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2.0 * A @ B.T
    return np.sqrt(np.maximum(sq, 0.0))


def _marginal_violation(f, g, cost, loga, logb, eps):
    logp = (f[:, None] + g[None, :] - cost) / eps + loga[:, None] + logb[None, :]
    return float(np.sum(np.abs(np.exp(logsumexp(logp, axis=1)) - np.exp(loga))))


def _as_clouds(A, B):
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim == 1:
        A = A.reshape(-1, 1)
    if B.ndim == 1:
        B = B.reshape(-1, 1)
    if not len(A) or not len(B):
        raise ValueError("point sets must be nonempty")
    if A.shape[1] != B.shape[1]:
        raise ValueError("point sets live in different dimensions")
    return A, B


def _eps_schedule(cost, reg):
    """Geometric annealing from the cost scale down to ``reg``."""
    eps = max(float(cost.max()), reg)
    steps = []
    while eps > reg:
        steps.append(eps)
        eps *= 0.5
    return steps


def _dual_value(f, g, cost, loga, logb, eps):
    with np.errstate(over="ignore", invalid="ignore"):
        logp = (f[:, None] + g[None, :] - cost) / eps + loga[:, None] + logb[None, :]
        P = np.exp(logp)
    return float(f @ np.exp(loga) + g @ np.exp(logb) - eps * P.sum()), P


def _newton_step(f, g, cost, loga, logb, eps):
    """One damped Newton ascent step on the entropic dual; None if unusable."""
    n, m = cost.shape
    a, b = np.exp(loga), np.exp(logb)
    _, P = _dual_value(f, g, cost, loga, logb, eps)
    r = a - P.sum(axis=1)
    s = b - P.sum(axis=0)
    # g[-1] is pinned: the dual is invariant to (f + c, g - c)
    H = np.empty((n + m - 1, n + m - 1))
    H[:n, :n] = np.diag(P.sum(axis=1))
    H[:n, n:] = P[:, : m - 1]
    H[n:, :n] = P[:, : m - 1].T
    H[n:, n:] = np.diag(P.sum(axis=0)[: m - 1])
    rhs = eps * np.concatenate([r, s[: m - 1]])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            d = scipy.linalg.solve(H, rhs, assume_a="pos")
        except (np.linalg.LinAlgError, ValueError):
            try:
                d = scipy.linalg.lstsq(H, rhs)[0]
            except (np.linalg.LinAlgError, ValueError):
                return None
    if not np.all(np.isfinite(d)):
        return None
    df, dg = d[:n], np.append(d[n:], 0.0)
    base = np.abs(r).sum() + np.abs(s).sum()
    t = 1.0
    while t > 1e-8:
        _, P2 = _dual_value(f + t * df, g + t * dg, cost, loga, logb, eps)
        with np.errstate(over="ignore", invalid="ignore"):
            viol = np.abs(a - P2.sum(axis=1)).sum() + np.abs(b - P2.sum(axis=0)).sum()
        if np.isfinite(viol) and viol < base:
            return f + t * df, g + t * dg
        t *= 0.5
    return None


def entropic_ot(A, B, cfg=None):
    """Regularized OT value (dual objective) between uniform point clouds.

    Log-domain Sinkhorn-Knopp sweeps with Euclidean cost, warm-started by
    annealing the regularization. Every ``newton_every`` sweeps a damped
    Newton step on the dual is tried and kept only if it lowers the marginal
    violation. Stops once the L1 violation of the row marginal is below
    ``cfg.tol``; sweeps and Newton steps both count toward ``cfg.max_iters``.
    """
    cfg = cfg or SinkhornConfig()
    A, B = _as_clouds(A, B)
    n, m = len(A), len(B)
    cost = pairwise_distances(A, B)
    loga = np.full(n, -np.log(n))
    logb = np.full(m, -np.log(m))
    f = np.zeros(n)
    g = np.zeros(m)

    def sweep(f, g, eps):
        f = -eps * logsumexp((g[None, :] - cost) / eps + logb[None, :], axis=1)
        g = -eps * logsumexp((f[:, None] - cost) / eps + loga[:, None], axis=0)
        return f, g

    for eps in _eps_schedule(cost, cfg.reg):
        for _ in range(5):
            f, g = sweep(f, g, eps)
        step = _newton_step(f, g, cost, loga, logb, eps)
        if step is not None:
            f, g = sweep(*step, eps)
    eps = cfg.reg
    err = np.inf
    it = 0
    while it < cfg.max_iters:
        f, g = sweep(f, g, eps)
        it += 1
        err = _marginal_violation(f, g, cost, loga, logb, eps)
        if err < cfg.tol:
            return float(np.mean(f) + np.mean(g))
        if cfg.newton_every and it % cfg.newton_every == 0 and it < cfg.max_iters:
            step = _newton_step(f, g, cost, loga, logb, eps)
            it += 1
            if step is not None:
                fn, gn = sweep(*step, eps)
                err_n = _marginal_violation(fn, gn, cost, loga, logb, eps)
                if err_n < err:
                    f, g, err = fn, gn, err_n
                    if err < cfg.tol:
                        return float(np.mean(f) + np.mean(g))
    raise NoConvergence(f"marginal violation {err:.3e} >= tol {cfg.tol:g} "
                        f"after {cfg.max_iters} iterations (reg={eps:g})")


def self_entropic_ot(A, cfg=None):
    """OT_eps(A, A) via the symmetric (averaged) log-domain fixed point.

    The plain alternating iteration has a slowly decaying oscillating mode
    on symmetric problems; averaging removes it.
    """
    cfg = cfg or SinkhornConfig()
    A, _ = _as_clouds(A, A)
    n = len(A)
    cost = pairwise_distances(A, A)
    loga = np.full(n, -np.log(n))
    eps = cfg.reg
    f = np.zeros(n)
    err = np.inf
    for _ in range(cfg.max_iters):
        f = 0.5 * (f - eps * logsumexp((f[None, :] - cost) / eps + loga[None, :], axis=1))
        err = _marginal_violation(f, f, cost, loga, loga, eps)
        if err < cfg.tol:
            return float(2.0 * np.mean(f))
    raise NoConvergence(f"marginal violation {err:.3e} >= tol {cfg.tol:g} "
                        f"after {cfg.max_iters} iterations (reg={eps:g})")


def _same_multiset(A, B):
    if A.shape != B.shape:
        return False
    return np.array_equal(A[np.lexsort(A.T[::-1])], B[np.lexsort(B.T[::-1])])


def sinkhorn_divergence(A, B, cfg=None):
    """Debiased OT_eps(A,B) - (OT_eps(A,A) + OT_eps(B,B))/2, clamped at 0."""
    cfg = cfg or SinkhornConfig()
    A, B = _as_clouds(A, B)
    if _same_multiset(A, B):
        return 0.0
    ab = entropic_ot(A, B, cfg)
    aa = self_entropic_ot(A, cfg)
    bb = self_entropic_ot(B, cfg)
    return max(0.0, ab - 0.5 * (aa + bb))


def _env_pairs(dump):
    envs = dump.env_ids
    if len(envs) < 2:
        raise ValueError("variation needs at least two environments")
    return list(itertools.combinations(envs, 2))


def _projected_w1(P, Q, directions):
    pp = P @ directions.T
    qq = Q @ directions.T
    return max(w1_1d(pp[:, k], qq[:, k]) for k in range(directions.shape[0]))


def estimator_directions(dump, n_directions, rng, bank=None):
    dirs = random_unit_directions(n_directions, dump.dim, rng)
    if bank is not None:
        dirs = np.vstack([dirs, getattr(bank, "mu", bank)])
    if not len(dirs):
        raise ValueError("need at least one direction")
    return dirs


def variation_estimate(dump, rho=SINKHORN, cfg=None, n_directions=256, rng=0,
                       bank=None):
    """Per (class, env pair) distances and their max.

    ``rho=W1_PROJ`` measures each cell by the max over directions of the
    projected W1 (a Monte-Carlo lower bound of the directional sup).
    """
    pairs = _env_pairs(dump)
    classes = dump.classes
    if rho == W1_PROJ:
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        dirs = estimator_directions(dump, n_directions, rng, bank)
    elif rho != SINKHORN:
        raise ValueError(f"unknown rho {rho!r}")
    cells = []
    matrix = np.zeros((len(pairs), len(classes)))
    for i, (e1, e2) in enumerate(pairs):
        for j, y in enumerate(classes):
            P, Q = dump.cell(e1, y), dump.cell(e2, y)
            v = sinkhorn_divergence(P, Q, cfg) if rho == SINKHORN else _projected_w1(P, Q, dirs)
            matrix[i, j] = v
            cells.append({"label": int(y), "env_a": int(e1), "env_b": int(e2), "value": float(v)})
    return {
        "rho": rho,
        "cells": cells,
        "matrix": matrix.tolist(),
        "env_pairs": [list(p) for p in pairs],
        "classes": [int(c) for c in classes],
        "aggregate": float(matrix.max()),
    }


def vsup_estimate(dump, n_directions, rng, bank=None):
    """Monte-Carlo lower bound of sup over unit directions of the projected
    variation; prototype directions are added when a bank is given."""
    if n_directions < 0:
        raise ValueError("direction count must be nonnegative")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    dirs = estimator_directions(dump, n_directions, rng, bank)
    best = 0.0
    for e1, e2 in _env_pairs(dump):
        for y in dump.classes:
            best = max(best, _projected_w1(dump.cell(e1, y), dump.cell(e2, y), dirs))
    return best


def separation_estimate(dump, rho=SINKHORN, cfg=None, n_directions=256, rng=0,
                        bank=None):
    """(1/(C(C-1))) sum over ordered class pairs of the min over envs distance."""
    classes = dump.classes
    c = len(classes)
    if c < 2:
        raise ValueError("separation needs at least two classes")
    if rho == W1_PROJ:
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        dirs = estimator_directions(dump, n_directions, rng, bank)
    total = 0.0
    for y1, y2 in itertools.combinations(classes, 2):
        vals = []
        for e in dump.env_ids:
            P, Q = dump.cell(e, y1), dump.cell(e, y2)
            vals.append(sinkhorn_divergence(P, Q, cfg) if rho == SINKHORN
                        else _projected_w1(P, Q, dirs))
        total += 2.0 * min(vals)
    return total / (c * (c - 1))


def epsilon_hat(dump, bank):
    """1 minus the mean similarity between each embedding and its class prototype."""
    mu = np.asarray(getattr(bank, "mu", bank))
    if dump.labels.max() >= len(mu) or dump.labels.min() < 0:
        raise ValueError("dump labels exceed the prototype bank")
    return float(1.0 - np.mean(np.sum(dump.z * mu[dump.labels], axis=1)))


def worst_env_error(accuracies):
    return max(1.0 - a for a in accuracies.values()) if accuracies else None


def evaluate(state, dataset, split=None):
    """Per-environment accuracy with ID and OOD blocks reported separately.

    ``split`` (from ``split_id_ood``) restricts TRAIN environments to their
    held-out validation rows; without it every row of every env is scored.
    """
    report = {}
    if split is None:
        id_sets = {e: dataset.env_subset([e]) for e in dataset.envs_with_role("train")}
        ood_sets = {e: dataset.env_subset([e]) for e in dataset.envs_with_role("ood")}
    else:
        id_sets, ood_sets = split.val, split.ood
        report["train"] = {"accuracy": accuracy(state, split.train), "n": len(split.train)}
    id_acc = {int(e): accuracy(state, d) for e, d in sorted(id_sets.items()) if len(d)}
    report["id"] = {"accuracy": {str(e): a for e, a in id_acc.items()},
                    "mean_accuracy": float(np.mean(list(id_acc.values()))) if id_acc else None,
                    "worst_env_error": worst_env_error(id_acc)}
    ood_acc = {int(e): accuracy(state, d) for e, d in sorted(ood_sets.items()) if len(d)}
    if ood_acc:
        report["ood"] = {"accuracy": {str(e): a for e, a in ood_acc.items()},
                         "mean_accuracy": float(np.mean(list(ood_acc.values()))),
                         "worst_env_error": worst_env_error(ood_acc)}
    report["worst_env_error"] = worst_env_error({**id_acc, **ood_acc})
    return report


def accuracy(state, ds):
    return float(np.mean(state.predict(ds.X) == ds.y))


def embedding_dump(state, ds, source=""):
    """Normalized encoder outputs (HYPO and ERM alike) of every row in ``ds``."""
    return EmbeddingDump(state.embed(ds.X), ds.y, ds.e, source)


def write_heatmap_csv(variation, path):
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "env_a", "env_b", "value"])
        for c in variation["cells"]:
            w.writerow([c["label"], c["env_a"], c["env_b"], format(c["value"], ".17g")])


def reference_prototypes(state, dump):
    """Prototype directions for prototype-based reports.

    HYPO uses its bank. ERM has none, so its normalized class-mean
    embeddings stand in.
    """
    if state.bank is not None:
        return state.bank.mu
    n = state.n_classes
    means = np.zeros((n, dump.dim))
    for y in range(n):
        rows = dump.z[dump.labels == y]
        if not len(rows):
            raise EmptyCell(None, y)
        means[y] = rows.mean(axis=0)
    return normalize_rows(means)[0]

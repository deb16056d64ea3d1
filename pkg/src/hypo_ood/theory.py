"""Executable checks of the alignment lemmas and of simplex-ETF optimality
of the separation loss."""
import itertools
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import normalize_rows, random_unit_directions
from .losses import separation_loss_grad
from .metrics import w1_1d

SLACK = 1e-12


class NonUniformCells(ValueError):
    pass


@dataclass
class LemmaReport:
    lemma: str
    gamma: float
    cells: list = field(default_factory=list)
    passed: bool = True

    def add(self, lhs, rhs, **where):
        ok = bool(lhs <= rhs + SLACK)
        self.cells.append({**where, "lhs": float(lhs), "rhs": float(rhs),
                           "margin": float(rhs - lhs), "ok": ok})
        self.passed = self.passed and ok

    def to_dict(self):
        return asdict(self)


def _mu(bank):
    return np.asarray(getattr(bank, "mu", bank), dtype=np.float64)


def _uniform_cells(dump, n_classes):
    sizes = dump.cell_sizes(range(n_classes))
    if len(set(sizes.values())) != 1 or 0 in sizes.values():
        raise NonUniformCells(f"cell sizes differ or are empty: "
                              f"{ {f'{e},{y}': n for (e, y), n in sizes.items()} }")
    return len(dump.env_ids)


def alignment_gamma(dump, bank):
    """1 minus the global mean true-class prototype similarity."""
    mu = _mu(bank)
    return float(1.0 - np.mean(np.sum(dump.z * mu[dump.labels], axis=1)))


def verify_lemma_subclasses(dump, bank):
    """Every (env, class) cell mean alignment is at least 1 - C E gamma."""
    mu = _mu(bank)
    c = len(mu)
    n_env = _uniform_cells(dump, c)
    gamma = alignment_gamma(dump, bank)
    report = LemmaReport("subclasses", gamma)
    bound = 1.0 - c * n_env * gamma
    for e in dump.env_ids:
        for y in range(c):
            cell_mean = float(np.mean(dump.cell(e, y) @ mu[y]))
            report.add(bound, cell_mean, env=int(e), label=int(y))
    return report


def verify_lemma_markov(dump, bank, eta):
    """Fraction of a cell with ||z - mu_y|| >= eta is at most 2 C E gamma / eta^2."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    mu = _mu(bank)
    c = len(mu)
    n_env = _uniform_cells(dump, c)
    gamma = alignment_gamma(dump, bank)
    report = LemmaReport(f"markov(eta={eta:g})", gamma)
    bound = 2.0 * c * n_env * gamma / eta ** 2
    for e in dump.env_ids:
        for y in range(c):
            dist = np.linalg.norm(dump.cell(e, y) - mu[y], axis=1)
            report.add(float(np.mean(dist >= eta)), bound, env=int(e), label=int(y))
    return report


def verify_lemma_wasserstein(dump, bank, n_directions, rng):
    """Projected W1 between envs of one class is at most 10 (C E gamma)^(1/3)."""
    mu = _mu(bank)
    c = len(mu)
    n_env = _uniform_cells(dump, c)
    gamma = alignment_gamma(dump, bank)
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    dirs = random_unit_directions(n_directions, dump.dim, rng)
    report = LemmaReport("wasserstein", gamma)
    bound = 10.0 * max(c * n_env * gamma, 0.0) ** (1.0 / 3.0)
    proj = {(e, y): dump.cell(e, y) @ dirs.T for e in dump.env_ids for y in range(c)}
    for k in range(n_directions):
        for y in range(c):
            for e1, e2 in itertools.combinations(dump.env_ids, 2):
                lhs = w1_1d(proj[e1, y][:, k], proj[e2, y][:, k])
                report.add(lhs, bound, direction=k, label=int(y), env_a=int(e1), env_b=int(e2))
    return report


def verify_all(dump, bank, etas=(0.1, 0.5, 1.0), n_directions=64, rng=0):
    reports = [verify_lemma_subclasses(dump, bank)]
    reports += [verify_lemma_markov(dump, bank, eta) for eta in etas]
    reports.append(verify_lemma_wasserstein(dump, bank, n_directions, rng))
    return reports


def etf_deviation(mu):
    mu = np.asarray(mu)
    c = len(mu)
    g = mu @ mu.T
    off = ~np.eye(c, dtype=bool)
    return float(np.max(np.abs(g[off] + 1.0 / (c - 1))))


def etf_optimize(n_classes, d, tau=1.0, steps=5000, lr=0.5, rng=0):
    """Projected gradient descent of the separation loss over free prototypes.

    Returns (prototypes, max |mu_i . mu_j + 1/(C-1)| over i != j).
    """
    if not 2 <= n_classes <= d + 1:
        raise ValueError("requires 2 <= C <= d + 1")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    mu = random_unit_directions(n_classes, d, rng)
    for _ in range(steps):
        _, grad = separation_loss_grad(mu, tau)
        mu = normalize_rows(mu - lr * grad)[0]
    return mu, etf_deviation(mu)

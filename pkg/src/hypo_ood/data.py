"""Synthetic multi-environment classification data and CSV ingestion."""
import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

TRAIN = "train"
OOD = "ood"

ROTATION = "rotation"
MEAN_SHIFT = "mean_shift"
NOISE_SCALE = "noise_scale"
SHIFT_KINDS = (ROTATION, MEAN_SHIFT, NOISE_SCALE)


class InvalidSpec(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class ShiftSpec:
    """Per-environment transform. ``magnitude`` is degrees for rotations,
    a displacement length for mean shifts and a relative noise increase
    (sigma * (1 + magnitude)) for noise scaling."""

    kind: str
    magnitude: float
    role: str = TRAIN

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise InvalidSpec(f"unknown shift kind {self.kind!r}")
        if self.role not in (TRAIN, OOD):
            raise InvalidSpec(f"unknown environment role {self.role!r}")
        if self.kind == NOISE_SCALE and self.magnitude <= -1:
            raise InvalidSpec("noise_scale magnitude must exceed -1")


@dataclass
class EnvDataset:
    X: np.ndarray
    y: np.ndarray
    e: np.ndarray
    n_classes: int
    env_roles: Dict[int, str]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        self.e = np.asarray(self.e, dtype=np.int64).reshape(-1)
        self.env_roles = {int(k): v for k, v in self.env_roles.items()}
        if not (len(self.X) == len(self.y) == len(self.e)):
            raise ValueError("X, y, e must have equal length")

    def __len__(self):
        return len(self.y)

    @property
    def d_in(self):
        return self.X.shape[1]

    @property
    def envs(self):
        return sorted(self.env_roles)

    def envs_with_role(self, role):
        return [k for k in self.envs if self.env_roles[k] == role]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return EnvDataset(self.X[idx], self.y[idx], self.e[idx], self.n_classes,
                          dict(self.env_roles), dict(self.metadata))

    def env_subset(self, envs):
        return self.subset(np.flatnonzero(np.isin(self.e, list(envs))))

    def equals(self, other):
        return (self.n_classes == other.n_classes and self.env_roles == other.env_roles
                and self.X.shape == other.X.shape and np.array_equal(self.X, other.X)
                and np.array_equal(self.y, other.y) and np.array_equal(self.e, other.e))


def class_means(n_classes, d_in):
    """Unit mean directions: a simplex ETF when C <= d_in + 1, otherwise a
    repulsion-spread configuration."""
    if n_classes <= d_in + 1:
        centered = np.eye(n_classes) - 1.0 / n_classes
        # orthonormal coordinates of the (C-1)-dim centered simplex
        u, s, vt = np.linalg.svd(centered)
        coords = u[:, : n_classes - 1] * s[: n_classes - 1]
        means = np.zeros((n_classes, d_in))
        means[:, : n_classes - 1] = coords
        return means / np.linalg.norm(means, axis=1, keepdims=True)
    rng = np.random.default_rng(0)
    means = rng.standard_normal((n_classes, d_in))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    for _ in range(2000):
        g = means @ means.T
        np.fill_diagonal(g, -np.inf)
        w = np.exp(4.0 * (g - g.max(axis=1, keepdims=True)))
        means -= 0.05 * (w / w.sum(axis=1, keepdims=True)) @ means
        means /= np.linalg.norm(means, axis=1, keepdims=True)
    return means


def rotation_matrix(d_in, degrees, plane=(0, -1)):
    i, j = plane[0] % d_in, plane[1] % d_in
    t = np.deg2rad(degrees)
    r = np.eye(d_in)
    r[i, i] = r[j, j] = np.cos(t)
    r[i, j] = -np.sin(t)
    r[j, i] = np.sin(t)
    return r


def shift_direction(d_in):
    """Unit nuisance axis used by mean shifts (the last coordinate)."""
    v = np.zeros(d_in)
    v[-1] = 1.0
    return v


def check_ood_hull(env_specs):
    """OOD magnitudes must fall outside the closed interval spanned by TRAIN
    magnitudes of the same kind (no TRAIN env of that kind counts as {0})."""
    for k, spec in enumerate(env_specs):
        if spec.role != OOD:
            continue
        train = [s.magnitude for s in env_specs if s.role == TRAIN and s.kind == spec.kind] or [0.0]
        if min(train) <= spec.magnitude <= max(train):
            raise InvalidSpec(
                f"OOD env {k} ({spec.kind} {spec.magnitude:g}) lies inside the TRAIN range "
                f"[{min(train):g}, {max(train):g}]")


def sample_base(n_classes, d_in, n, sigma, rng):
    """Untransformed class-conditional Gaussian draw, class-major order."""
    means = class_means(n_classes, d_in)
    noise = rng.standard_normal((n_classes * n, d_in))
    y = np.repeat(np.arange(n_classes), n)
    return means[y], noise, y


def generate(n_classes, d_in, n_per_class_per_env, env_specs, label_noise=0.0, rng=0,
             sigma=0.3, rotation_plane=(0, -1)):
    """Draw an ``EnvDataset`` with one environment per entry of ``env_specs``.

    Each environment draws fresh isotropic Gaussian samples around the shared
    class means, then applies its shift. Labels are flipped to a uniformly
    chosen other class with probability ``label_noise``.
    """
    if n_classes < 2 or d_in < 2 or n_per_class_per_env < 1:
        raise InvalidSpec("need C >= 2, d_in >= 2, n >= 1")
    if not 0.0 <= label_noise < 1.0:
        raise InvalidSpec("label_noise must lie in [0, 1)")
    env_specs = [s if isinstance(s, ShiftSpec) else ShiftSpec(**s) for s in env_specs]
    check_ood_hull(env_specs)
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = np.random.default_rng(rng) if seed is not None else rng

    Xs, ys, es = [], [], []
    for k, spec in enumerate(env_specs):
        means, noise, y = sample_base(n_classes, d_in, n_per_class_per_env, sigma, rng)
        scale = sigma * (1.0 + spec.magnitude) if spec.kind == NOISE_SCALE else sigma
        x = means + scale * noise
        if spec.kind == ROTATION:
            x = x @ rotation_matrix(d_in, spec.magnitude, rotation_plane).T
        elif spec.kind == MEAN_SHIFT:
            x = x + spec.magnitude * shift_direction(d_in)
        flip = rng.random(len(y)) < label_noise
        offset = rng.integers(1, n_classes, size=len(y))
        y = np.where(flip, (y + offset) % n_classes, y)
        Xs.append(x)
        ys.append(y)
        es.append(np.full(len(y), k))
    meta = {
        "C": n_classes, "d_in": d_in, "n_per_class_per_env": n_per_class_per_env,
        "sigma": sigma, "label_noise": label_noise, "seed": seed,
        "rotation_plane": list(rotation_plane),
        "shift_specs": [asdict(s) for s in env_specs],
    }
    return EnvDataset(np.vstack(Xs), np.concatenate(ys), np.concatenate(es), n_classes,
                      {k: s.role for k, s in enumerate(env_specs)}, meta)


PRESETS = {
    "default": dict(
        n_classes=3, d_in=6, n_per_class_per_env=200, sigma=0.3, label_noise=0.0,
        env_specs=[ShiftSpec(ROTATION, 0.0), ShiftSpec(ROTATION, 15.0),
                   ShiftSpec(ROTATION, 30.0), ShiftSpec(ROTATION, 60.0, OOD)],
    ),
}


def preset(name="default", seed=0, **overrides):
    if name not in PRESETS:
        raise InvalidSpec(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    ds = generate(rng=seed, **kw)
    ds.metadata["preset"] = name
    return ds


@dataclass
class Split:
    train: EnvDataset
    val: Dict[int, EnvDataset]
    ood: Dict[int, EnvDataset]


def split_id_ood(ds, val_fraction=0.2, seed=0):
    """TRAIN envs lose ``val_fraction`` of their rows to a per-env validation
    set; OOD envs are kept whole for evaluation."""
    rng = np.random.default_rng(seed)
    train_idx, val, ood = [], {}, {}
    for env in ds.envs:
        idx = np.flatnonzero(ds.e == env)
        if ds.env_roles[env] == OOD:
            ood[env] = ds.subset(idx)
            continue
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(val_fraction * len(idx)))
        val[env] = ds.subset(np.sort(idx[:n_val]))
        train_idx.append(np.sort(idx[n_val:]))
    train_idx = np.concatenate(train_idx) if train_idx else np.zeros(0, dtype=np.int64)
    return Split(ds.subset(np.sort(train_idx)), val, ood)


def manifest_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


def _fmt(x):
    return format(float(x), ".17g")


def save_csv(ds, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["env", "label"] + [f"x{i + 1}" for i in range(ds.d_in)])
        for x, y, e in zip(ds.X, ds.y, ds.e):
            w.writerow([int(e), int(y)] + [_fmt(v) for v in x])
    manifest = {
        "C": ds.n_classes, "d_in": ds.d_in,
        "env_roles": {str(k): v for k, v in sorted(ds.env_roles.items())},
        "shift_specs": ds.metadata.get("shift_specs"),
        "seed": ds.metadata.get("seed"),
        "metadata": ds.metadata,
    }
    with open(manifest_path(path), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_csv(path):
    path = Path(path)
    mpath = manifest_path(path)
    manifest = json.loads(mpath.read_text()) if mpath.exists() else None
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header = rows[0]
    if header[:2] != ["env", "label"] or len(header) < 4:
        raise SchemaError(f"{path}: header must be env,label,x1,...,xd; got {header[:3]}")
    d = len(header) - 2
    if header[2:] != [f"x{i + 1}" for i in range(d)]:
        raise SchemaError(f"{path}: feature columns must be x1..x{d}")
    if len(rows) == 1:
        raise SchemaError(f"{path}: dataset has no samples")
    X = np.empty((len(rows) - 1, d))
    y = np.empty(len(rows) - 1, dtype=np.int64)
    e = np.empty(len(rows) - 1, dtype=np.int64)
    for i, row in enumerate(rows[1:]):
        line = i + 2
        if len(row) != d + 2:
            raise ParseError(f"expected {d + 2} fields, got {len(row)}", line)
        try:
            e[i], y[i] = int(row[0]), int(row[1])
            X[i] = [float(v) for v in row[2:]]
        except ValueError as exc:
            raise ParseError(str(exc), line) from None
        if e[i] < 0 or y[i] < 0:
            raise ParseError("env and label must be nonnegative", line)
    if manifest is not None:
        roles = {int(k): v for k, v in manifest["env_roles"].items()}
        n_classes = int(manifest["C"])
        if int(manifest["d_in"]) != d:
            raise SchemaError(f"manifest d_in={manifest['d_in']} but CSV has {d} features")
        missing = sorted(set(e.tolist()) - set(roles))
        if missing:
            raise SchemaError(f"env {missing[0]} is not listed in the manifest")
        if y.max() >= n_classes:
            raise SchemaError(f"label {int(y.max())} >= C={n_classes}")
        meta = manifest.get("metadata") or {}
    else:
        roles = {int(k): TRAIN for k in np.unique(e)}
        n_classes = int(y.max()) + 1
        meta = {}
    return EnvDataset(X, y, e, n_classes, roles, meta)

"""Training loop for HYPO and the cross-entropy ERM baseline, plus checkpoints."""
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import losses
from .data import split_id_ood
from .geometry import DegenerateNorm
from .model import (EMA, LEARNABLE, LinearHead, MlpEncoder, PrototypeBank, ema_stream,
                    init_prototypes, predict, predict_head)

log = logging.getLogger(__name__)

HYPO = "hypo"
ERM = "erm"
SCHEMA_VERSION = 1
CSV_HEADER = ["epoch", "lr", "total_loss", "var_loss", "sep_loss", "train_acc"]


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_schedule: str = "cosine"
    alpha: float = 0.95
    tau: float = 0.1
    lam: float = 1.0
    seed: int = 0
    augment_sigma: float = 0.05
    method: str = HYPO
    prototype_mode: str = EMA
    hard_negatives: bool = False
    separation_enabled: bool = True
    hidden_dims: tuple = (64,)
    embed_dim: int = 16
    val_fraction: float = 0.2
    checkpoint_every: int = 0

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.method not in (HYPO, ERM):
            raise ValueError(f"unknown method {self.method!r}")
        if self.prototype_mode not in (EMA, LEARNABLE):
            raise ValueError(f"unknown prototype_mode {self.prototype_mode!r}")
        if self.augment_sigma < 0:
            raise ValueError("augment_sigma must be nonnegative")
        losses.LossConfig(self.tau, self.lam)

    def loss_config(self):
        return losses.LossConfig(self.tau, self.lam, self.hard_negatives, self.separation_enabled)

    def to_dict(self):
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrainState:
    encoder: MlpEncoder
    bank: Optional[PrototypeBank]
    head: Optional[LinearHead]
    buffers: dict
    rng: np.random.Generator
    config: TrainConfig
    epoch: int = 0
    history: list = field(default_factory=list)
    n_classes: int = 0

    def params(self):
        p = {}
        for l, (w, b) in enumerate(zip(self.encoder.weights, self.encoder.biases)):
            p[f"W{l}"] = w
            p[f"b{l}"] = b
        if self.head is not None:
            p["head_W"] = self.head.weight
            p["head_b"] = self.head.bias
        if self.bank is not None and self.bank.mode == LEARNABLE:
            p["prototypes"] = self.bank.mu
        return p

    def embed(self, X):
        return self.encoder.forward(X)[0]

    def predict(self, X):
        if self.config.method == ERM:
            return predict_head(self.encoder.raw(X)[0], self.head)
        return predict(self.embed(X), self.bank)

    @property
    def method(self):
        return self.config.method


def init_state(cfg, d_in, n_classes):
    rng = np.random.default_rng(cfg.seed)
    dims = [d_in, *cfg.hidden_dims, cfg.embed_dim]
    enc = MlpEncoder.init(dims, rng)
    bank = head = None
    if cfg.method == HYPO:
        bank = init_prototypes(n_classes, cfg.embed_dim, rng, cfg.prototype_mode, cfg.alpha)
    else:
        head = LinearHead.init(n_classes, cfg.embed_dim, rng)
    state = TrainState(enc, bank, head, {}, rng, cfg, 0, [], n_classes)
    state.buffers = {k: np.zeros_like(v) for k, v in state.params().items()}
    return state


def cosine_lr(epoch, total_epochs, base_lr):
    if not 0 <= epoch < total_epochs:
        raise ValueError("epoch must lie in [0, total_epochs)")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def epoch_lr(cfg, epoch):
    if cfg.lr_schedule == "cosine":
        return cosine_lr(epoch, cfg.epochs, cfg.learning_rate)
    return cfg.learning_rate


def sgd_step(params, grads, buffers, lr, momentum, weight_decay, no_decay=("prototypes",)):
    """Classical momentum SGD, in place. Weight decay skips ``no_decay`` keys."""
    for name, p in params.items():
        g = grads[name]
        if weight_decay and name not in no_decay:
            g = g + weight_decay * p
        buf = buffers[name]
        buf *= momentum
        buf += g
        p -= lr * buf
    return params, buffers


def _augment(xb, sigma, rng):
    noise = rng.standard_normal((2,) + xb.shape)
    return np.concatenate([xb + sigma * noise[0], xb + sigma * noise[1]])


def train_epoch(state, data, cfg=None):
    """One shuffled pass over ``data`` (the training subset). Returns a summary row."""
    cfg = cfg or state.config
    lcfg = cfg.loss_config()
    lr = epoch_lr(cfg, state.epoch)
    n = len(data)
    order = state.rng.permutation(n)
    sums = {"total": 0.0, "var": 0.0, "sep": 0.0}
    for k, start in enumerate(range(0, n, cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        Xa = _augment(data.X[idx], cfg.augment_sigma, state.rng)
        ya = np.concatenate([data.y[idx], data.y[idx]])
        ea = np.concatenate([data.e[idx], data.e[idx]])
        try:
            if cfg.method == ERM:
                trace = state.encoder.forward_raw(Xa)
                value, grads = losses.erm_backward(trace, ya, state.encoder, state.head)
                parts = {}
            else:
                z, trace = state.encoder.forward(Xa)
                snapshot = state.bank.copy()
                if state.bank.mode == EMA:
                    ema_stream(state.bank, z, ya)
                value, parts, grads = losses.backward(losses.Batch(z, ya, ea), snapshot, lcfg,
                                                      trace, state.encoder)
        except DegenerateNorm as exc:
            raise DegenerateNorm(f"epoch {state.epoch} batch {k}: {exc}", batch_index=k) from None
        params = state.params()
        sgd_step(params, grads, state.buffers, lr, cfg.momentum, cfg.weight_decay)
        if state.bank is not None and state.bank.mode == LEARNABLE:
            state.bank.renormalize()
        w = len(idx) / n
        sums["total"] += w * value
        if parts:
            sums["var"] += w * parts["var"]
            sums["sep"] += w * parts["sep"]
    acc = float(np.mean(state.predict(data.X) == data.y))
    row = {"epoch": state.epoch + 1, "lr": lr, "total_loss": sums["total"],
           "var_loss": sums["var"] if cfg.method == HYPO else None,
           "sep_loss": sums["sep"] if cfg.method == HYPO else None,
           "train_acc": acc}
    state.epoch += 1
    state.history.append(row)
    return state, row


def train_run(cfg, data, out_dir=None, resume=None):
    """Train from scratch (or from ``resume``) up to ``cfg.epochs``.

    Writes ``checkpoint.json`` and ``epochs.csv`` into ``out_dir`` when given.
    """
    split = split_id_ood(data, cfg.val_fraction, cfg.seed)
    train = split.train
    if resume is not None:
        state = resume
        state.config = cfg
    else:
        state = init_state(cfg, data.d_in, data.n_classes)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    while state.epoch < cfg.epochs:
        _, row = train_epoch(state, train, cfg)
        log.info("epoch %d lr %.4g loss %.5f acc %.4f", row["epoch"], row["lr"],
                 row["total_loss"], row["train_acc"])
        if out_dir is not None and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
            save_checkpoint(state, out_dir / f"checkpoint_epoch{state.epoch:04d}.json")
    if out_dir is not None:
        save_checkpoint(state, out_dir / "checkpoint.json")
        write_epoch_csv(state.history, out_dir / "epochs.csv")
    return state


def write_epoch_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow(["" if r[k] is None else (r[k] if k == "epoch" else format(r[k], ".17g"))
                        for k in CSV_HEADER])


def read_epoch_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (int(v) if k == "epoch" else (float(v) if v != "" else None))
                    for k, v in r.items()})
    return out


def _tolist(a):
    return None if a is None else np.asarray(a).tolist()


def checkpoint_dict(state):
    cfg = state.config
    d = {
        "schema_version": SCHEMA_VERSION,
        "method": cfg.method,
        "layer_dims": state.encoder.layer_dims,
        "weights": [_tolist(w) for w in state.encoder.weights],
        "biases": [_tolist(b) for b in state.encoder.biases],
        "n_classes": state.n_classes,
        "rng_state": state.rng.bit_generator.state,
        "epoch": state.epoch,
        "momentum_buffers": {k: _tolist(v) for k, v in sorted(state.buffers.items())},
        "history": state.history,
        "config": cfg.to_dict(),
    }
    if cfg.method == HYPO:
        d.update(prototypes=_tolist(state.bank.mu), mode=state.bank.mode, alpha=state.bank.alpha)
    else:
        d.update(head={"weight": _tolist(state.head.weight), "bias": _tolist(state.head.bias)})
    return d


def state_from_dict(d):
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema {d.get('schema_version')!r}")
    cfg = TrainConfig.from_dict(d["config"])
    enc = MlpEncoder([np.array(w, dtype=np.float64) for w in d["weights"]],
                     [np.array(b, dtype=np.float64) for b in d["biases"]])
    if enc.layer_dims != list(d["layer_dims"]):
        raise ValueError("layer_dims disagree with weight shapes")
    bank = head = None
    if d["method"] == HYPO:
        bank = PrototypeBank(np.array(d["prototypes"], dtype=np.float64), d["mode"], d["alpha"])
    else:
        head = LinearHead(np.array(d["head"]["weight"]), np.array(d["head"]["bias"]))
    rng = np.random.default_rng()
    rng.bit_generator.state = d["rng_state"]
    bufs = {k: np.array(v, dtype=np.float64) for k, v in d["momentum_buffers"].items()}
    state = TrainState(enc, bank, head, {}, rng, cfg, int(d["epoch"]), list(d["history"]),
                       int(d["n_classes"]))
    params = state.params()
    # buffers must alias the same keys as params; shapes are checked here
    for k, p in params.items():
        if k not in bufs or bufs[k].shape != p.shape:
            raise ValueError(f"momentum buffer {k!r} missing or mis-shaped")
    state.buffers = {k: bufs[k] for k in params}
    return state


def save_checkpoint(state, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(state), fh)
        fh.write("\n")
    return path


def load_checkpoint(path):
    with open(path) as fh:
        return state_from_dict(json.load(fh))

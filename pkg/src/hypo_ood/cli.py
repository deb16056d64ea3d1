"""Command-line interface: ``hypo-ood <subcommand> [options]``.

Every subcommand writes ``resolved_config.json`` into its output directory.
Passing that file back through ``--config`` repeats the run exactly.

Exit codes: 0 success, 1 I/O or data error, 2 invalid configuration,
3 verification failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import gradcheck, metrics, theory
from .geometry import DegenerateNorm
from .model import EMA, LEARNABLE
from .train import ERM, HYPO, TrainConfig, load_checkpoint, train_run

log = logging.getLogger("hypo_ood")

EXIT_OK, EXIT_DATA, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2, 3
GRAD_TOL = 1e-5
ETF_TOL = 1e-3


class DataMismatch(ValueError):
    """Checkpoint and dataset disagree on input dimension or class count."""


class ConfigError(ValueError):
    pass


DATA_ERRORS = (OSError, json.JSONDecodeError, data_mod.ParseError, data_mod.SchemaError,
               DegenerateNorm, metrics.EmptyCell, metrics.NoConvergence,
               theory.NonUniformCells, DataMismatch)
CONFIG_ERRORS = (data_mod.InvalidSpec, ConfigError, ValueError, TypeError)


def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_env(text):
    """``kind:magnitude[:role]``, e.g. ``rotation:60:ood``."""
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise argparse.ArgumentTypeError(f"expected kind:magnitude[:role], got {text!r}")
    try:
        mag = float(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad magnitude in {text!r}") from None
    role = parts[2] if len(parts) == 3 else data_mod.TRAIN
    return [parts[0], mag, role]


# dataset loading shared by train/eval/metrics/verify

def _add_data_args(p, seed_help="seed for preset generation"):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--data", help="dataset CSV (manifest read from <stem>.manifest.json)")
    g.add_argument("--preset", help="synthetic preset name, e.g. default")
    p.add_argument("--seed", type=int, default=None, help=seed_help)


def _load_data(args, fallback_seed=0):
    if args.data:
        return data_mod.load_csv(args.data)
    seed = args.seed if args.seed is not None else fallback_seed
    return data_mod.preset(args.preset or "default", seed=seed)


def _check_match(state, ds):
    d_in = state.encoder.d_in
    if ds.d_in != d_in:
        raise DataMismatch(f"checkpoint expects d_in={d_in}, dataset has {ds.d_in}")
    if ds.n_classes != state.n_classes:
        raise DataMismatch(f"checkpoint has C={state.n_classes}, dataset has {ds.n_classes}")


def _train_dump(state, ds, source):
    """Embeddings of every row of the TRAIN environments."""
    tr = ds.env_subset(ds.envs_with_role(data_mod.TRAIN))
    return metrics.embedding_dump(state, tr, source)


def _require(args, name):
    # checked here rather than by argparse so --config can supply it
    if not getattr(args, name):
        raise ConfigError(f"--{name.replace('_', '-')} is required")


# subcommands

def cmd_gen_data(args):
    kw = {}
    if args.classes is not None:
        kw["n_classes"] = args.classes
    if args.dim is not None:
        kw["d_in"] = args.dim
    if args.n_per_env is not None:
        kw["n_per_class_per_env"] = args.n_per_env
    if args.sigma is not None:
        kw["sigma"] = args.sigma
    if args.label_noise is not None:
        kw["label_noise"] = args.label_noise
    if args.env:
        kw["env_specs"] = [data_mod.ShiftSpec(k, m, r) for k, m, r in args.env]
    ds = data_mod.preset(args.preset, seed=args.seed, **kw)
    out = _out_dir(args)
    path = data_mod.save_csv(ds, out / "data.csv")
    counts = {str(e): int(np.sum(ds.e == e)) for e in ds.envs}
    print(f"wrote {path} ({len(ds.y)} rows, C={ds.n_classes}, d_in={ds.d_in})")
    for e in ds.envs:
        print(f"  env {e}: role={ds.env_roles[e]} rows={counts[str(e)]}")
    return EXIT_OK


def _train_config(args):
    return TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
        momentum=args.momentum, weight_decay=args.weight_decay, lr_schedule=args.schedule,
        alpha=args.alpha, tau=args.tau, lam=args.lam, seed=args.seed,
        augment_sigma=args.augment_sigma, method=args.method,
        prototype_mode=args.prototype_mode, hard_negatives=args.hard_negatives,
        separation_enabled=not args.no_separation, hidden_dims=tuple(args.hidden),
        embed_dim=args.embed_dim, val_fraction=args.val_fraction,
        checkpoint_every=args.checkpoint_every)


def cmd_train(args):
    from .plotting import training_curves

    cfg = _train_config(args)
    ds = _load_data(args)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        _check_match(resume, ds)
    out = _out_dir(args)
    try:
        state = train_run(cfg, ds, out, resume)
    except DegenerateNorm as exc:
        log.error("degenerate normalization at batch %s: %s", exc.batch_index, exc)
        raise
    training_curves(state.history, out / "curves.png")
    last = state.history[-1] if state.history else {}
    print(f"trained {cfg.method} for {state.epoch} epochs; "
          f"final train_acc={last.get('train_acc', float('nan')):.4f}")
    print(f"wrote {out / 'checkpoint.json'}")
    return EXIT_OK


def cmd_eval(args):
    _require(args, "checkpoint")
    candidates = []
    ds = None
    for path in args.checkpoint:
        state = load_checkpoint(path)
        if ds is None:
            ds = _load_data(args, state.config.seed)
        _check_match(state, ds)
        split = data_mod.split_id_ood(ds, state.config.val_fraction, state.config.seed)
        rep = metrics.evaluate(state, ds, split)
        candidates.append((path, rep))
    # model selection on the held-out rows of the training environments
    scores = [rep["id"]["mean_accuracy"] if rep["id"]["mean_accuracy"] is not None else -1.0
              for _, rep in candidates]
    best = int(np.argmax(scores))
    report = dict(candidates[best][1])
    report["selected_checkpoint"] = str(candidates[best][0])
    report["selection"] = {"criterion": "mean id validation accuracy",
                           "scores": {str(p): s for (p, _), s in zip(candidates, scores)}}
    out = _out_dir(args)
    _dump_json(report, out / "eval_report.json")
    print(f"selected {report['selected_checkpoint']}")
    if "train" in report:
        print(f"train accuracy {report['train']['accuracy']:.6f}")
    print(f"id mean accuracy {report['id']['mean_accuracy']:.6f}")
    if "ood" in report:
        print(f"ood mean accuracy {report['ood']['mean_accuracy']:.6f}")
    print(f"worst-env error {report['worst_env_error']:.6f}")
    return EXIT_OK


def cmd_metrics(args):
    from .plotting import variation_heatmap

    _require(args, "checkpoint")
    state = load_checkpoint(args.checkpoint)
    ds = _load_data(args, state.config.seed)
    _check_match(state, ds)
    dump = _train_dump(state, ds, str(args.checkpoint))
    mu = metrics.reference_prototypes(state, dump)
    sk = metrics.SinkhornConfig(args.reg, args.max_iters, args.tol)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    variation = metrics.variation_estimate(dump, args.rho, sk, args.directions, rng, mu)
    report = {
        "source": str(args.checkpoint),
        "method": state.method,
        "epoch": state.epoch,
        "variation": variation,
        "vsup": {"value": metrics.vsup_estimate(dump, args.directions, rng, mu),
                 "directions": args.directions, "includes_prototypes": True,
                 "kind": "monte-carlo lower bound"},
        "separation": {"rho": args.rho,
                       "value": metrics.separation_estimate(dump, args.rho, sk,
                                                            args.directions, rng, mu)},
        "epsilon_hat": metrics.epsilon_hat(dump, mu),
        "prototype_source": "bank" if state.bank is not None else "class means",
        "accuracy": metrics.evaluate(state, ds),
    }
    out = _out_dir(args)
    _dump_json(report, out / "metric_report.json")
    metrics.write_heatmap_csv(variation, out / "heatmap.csv")
    dump.save_csv(out / "embeddings.csv")
    variation_heatmap(variation, out / "heatmap.png", f"{state.method} variation")
    print(f"variation ({args.rho}) aggregate {variation['aggregate']:.6f}")
    print(f"vsup lower bound {report['vsup']['value']:.6f}")
    print(f"separation {report['separation']['value']:.6f}")
    print(f"epsilon_hat {report['epsilon_hat']:.6f}")
    return EXIT_OK


def cmd_verify(args):
    if not args.checkpoint and not args.etf:
        raise ConfigError("verify needs --checkpoint and/or --etf")
    out = _out_dir(args)
    passed = True
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint)
        ds = _load_data(args, state.config.seed)
        _check_match(state, ds)
        dump = _train_dump(state, ds, str(args.checkpoint))
        mu = metrics.reference_prototypes(state, dump)
        reports = theory.verify_all(dump, mu, tuple(args.eta), args.directions,
                                    args.seed if args.seed is not None else 0)
        _dump_json({"source": str(args.checkpoint),
                    "prototype_source": "bank" if state.bank is not None else "class means",
                    "passed": all(r.passed for r in reports),
                    "reports": [r.to_dict() for r in reports]}, out / "lemma_report.json")
        for r in reports:
            worst = min(c["margin"] for c in r.cells)
            print(f"{r.lemma}: {'pass' if r.passed else 'FAIL'} "
                  f"(gamma={r.gamma:.6f}, min margin={worst:.3e}, cells={len(r.cells)})")
            passed = passed and r.passed
    if args.etf:
        mu, dev = theory.etf_optimize(args.classes, args.dim, args.etf_tau, args.steps,
                                      args.etf_lr, args.seed if args.seed is not None else 0)
        ok = dev < ETF_TOL
        _dump_json({"classes": args.classes, "dim": args.dim, "deviation": dev,
                    "target": -1.0 / (args.classes - 1), "gram": (mu @ mu.T).tolist(),
                    "passed": ok}, out / "etf_report.json")
        print(f"etf C={args.classes} d={args.dim}: deviation {dev:.3e} "
              f"{'pass' if ok else 'FAIL'}")
        passed = passed and ok
    return EXIT_OK if passed else EXIT_VERIFY


def cmd_grad_check(args):
    taus = tuple(args.tau) if args.tau else (0.1, 1.0)
    results = gradcheck.run_grad_check(seeds=args.seeds, taus=taus,
                                       base_seed=args.seed if args.seed is not None else 0)
    worst = max(r.max_rel_error for r in results)
    by_kind = {}
    for r in results:
        by_kind[r.kind] = max(by_kind.get(r.kind, 0.0), r.max_rel_error)
    ok = worst < GRAD_TOL
    out = _out_dir(args)
    _dump_json({"instances": len(results), "taus": list(taus), "max_rel_error": worst,
                "by_kind": by_kind, "tolerance": GRAD_TOL, "passed": ok},
               out / "grad_check.json")
    for kind, err in by_kind.items():
        print(f"{kind}: max rel err {err:.3e}")
    print(f"max relative error {worst:.3e} over {len(results)} instances: "
          f"{'pass' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VERIFY


# parser

def build_parser():
    parser = argparse.ArgumentParser(prog="hypo-ood",
                                     description="Hyperspherical prototype learning for "
                                                 "out-of-distribution generalization.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--config", help="resolved_config.json of an earlier run")
        p.add_argument("--out", default=".", help="output directory")
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic multi-environment dataset")
    p.add_argument("--preset", default="default")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int)
    p.add_argument("--dim", type=int, help="input dimension")
    p.add_argument("--n-per-env", type=int, help="samples per class per environment")
    p.add_argument("--sigma", type=float)
    p.add_argument("--label-noise", type=float)
    p.add_argument("--env", action="append", type=_parse_env,
                   help="kind:magnitude[:role]; repeat to replace the preset environments")

    d = TrainConfig()
    p = add("train", cmd_train, "train HYPO or the ERM baseline")
    _add_data_args(p, "seed for data, initialization, shuffling and augmentation")
    p.set_defaults(seed=d.seed)
    p.add_argument("--method", choices=[HYPO, ERM], default=d.method)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--schedule", choices=["cosine", "constant"], default=d.lr_schedule)
    p.add_argument("--tau", type=float, default=d.tau)
    p.add_argument("--alpha", type=float, default=d.alpha)
    p.add_argument("--lambda", dest="lam", type=float, default=d.lam)
    p.add_argument("--hard-negatives", action="store_true")
    p.add_argument("--no-separation", action="store_true")
    p.add_argument("--prototype-mode", choices=[EMA, LEARNABLE], default=d.prototype_mode)
    p.add_argument("--augment-sigma", type=float, default=d.augment_sigma)
    p.add_argument("--hidden", type=int, nargs="*", default=list(d.hidden_dims))
    p.add_argument("--embed-dim", type=int, default=d.embed_dim)
    p.add_argument("--val-fraction", type=float, default=d.val_fraction)
    p.add_argument("--checkpoint-every", type=int, default=d.checkpoint_every)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = add("eval", cmd_eval, "accuracy and worst-environment error")
    p.add_argument("--checkpoint", nargs="+",
                   help="one or more checkpoints; the best on ID validation is reported")
    _add_data_args(p, "preset seed (defaults to the checkpoint's training seed)")

    p = add("metrics", cmd_metrics, "variation, separation, vsup and epsilon-hat")
    p.add_argument("--checkpoint")
    _add_data_args(p, "seed for preset data and random directions")
    p.add_argument("--rho", choices=[metrics.SINKHORN, metrics.W1_PROJ], default=metrics.SINKHORN)
    p.add_argument("--directions", type=int, default=256)
    sk = metrics.SinkhornConfig()
    p.add_argument("--reg", type=float, default=sk.reg)
    p.add_argument("--max-iters", type=int, default=sk.max_iters)
    p.add_argument("--tol", type=float, default=sk.tol)

    p = add("verify", cmd_verify, "check the alignment lemmas and/or the simplex ETF")
    p.add_argument("--checkpoint")
    _add_data_args(p, "seed for preset data and random directions")
    p.add_argument("--eta", type=float, nargs="+", default=[0.1, 0.5, 1.0])
    p.add_argument("--directions", type=int, default=64)
    p.add_argument("--etf", action="store_true", help="run the ETF optimization check")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--dim", type=int, default=3)
    p.add_argument("--etf-tau", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--etf-lr", type=float, default=0.5)

    p = add("grad-check", cmd_grad_check, "analytic vs finite-difference gradients")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tau", type=float, nargs="+")
    p.add_argument("--seed", type=int, default=0, help="first instance seed")

    return parser, sub


def _resolve(argv):
    parser, sub = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in sub.choices), None)
    if known.config and command:
        cfg = json.loads(Path(known.config).read_text())
        if cfg.get("command") != command:
            raise ConfigError(f"{known.config} belongs to {cfg.get('command')!r}, "
                              f"not {command!r}")
        sp = sub.choices[command]
        dests = {a.dest for a in sp._actions}
        sp.set_defaults(**{k: v for k, v in cfg["args"].items() if k in dests})
    return parser.parse_args(argv)


def _resolved_dict(args):
    skip = {"func", "config", "verbose"}
    return {"command": args.command,
            "args": {k: v for k, v in sorted(vars(args).items())
                     if k not in skip and k != "command"}}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _resolve(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        out = _out_dir(args)
        _dump_json(_resolved_dict(args), out / "resolved_config.json")
        return args.func(args)
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

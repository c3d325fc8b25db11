"""``synprune`` command line.

Every subcommand that takes ``--config`` also accepts one flag per config key
(``--lam 1e-3``, ``--batch-size 64``, ...) and ``--set key=value``; flags
override the file.  ``SYNPRUNE_THREADS`` caps BLAS threads.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import load_checkpoint, save_checkpoint
from .experiment import EXIT_CONFIG, EXIT_DATA, STAGE_CODES, Experiment, ExperimentConfig, StageError
from .gradcheck import finite_difference_check
from .layers import Network
from .pruning import INDICATORS, SensitivityResult, SweepArm, apply_prune, make_plan, sensitivity_sweep
from .sparse import bench, export_bcsr, read_sbcr, write_sbcr
from .training import TrainConfig, finetune, sweep_lambda, train

logger = logging.getLogger("synprune")

THREADS_ENV = "SYNPRUNE_THREADS"


def _config_keys() -> list[str]:
    own = [f.name for f in dataclasses.fields(ExperimentConfig) if f.name != "train"]
    return own + [f.name for f in dataclasses.fields(TrainConfig)]


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    g = p.add_argument_group("config keys")
    for key in _config_keys():
        g.add_argument("--" + key.replace("_", "-"), dest=f"cfg_{key}", metavar="V", default=None)


def _load_config(args) -> ExperimentConfig:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for key in _config_keys():
        v = getattr(args, f"cfg_{key}")
        if v is not None:
            overrides[key] = v
    return ExperimentConfig.load(args.config, overrides)


def _experiment(args) -> Experiment:
    return Experiment(_load_config(args))


def _variant(cfg: ExperimentConfig) -> str:
    t = cfg.train
    return {(True, True): "synaptic", (False, True): "non_fix_gamma",
            (True, False): "non_kernel_norm", (False, False): "standard"}[(t.fix_gamma, t.kernel_norm)]


def _out(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


# -- subcommands -------------------------------------------------------------

def cmd_run(args) -> int:
    exp = _experiment(args)
    exp.run()
    print(exp.out)
    return 0


def cmd_train(args) -> int:
    exp = _experiment(args)
    cfg = exp.cfg
    seed = cfg.train.seed
    net = Network(exp.spec, _variant(cfg), seed=seed, dtype=cfg.train.dtype)
    net, hist = train(net, exp.data, cfg.train.replace(seed=seed))
    save_checkpoint(net, _out(args.out), {"stage": "train", "seed": seed, "config_hash": exp.digest})
    hist.write_csv(Path(args.out).with_suffix(".csv"))
    print(f"test_acc {hist.records[-1].test_acc:.4f}" if hist.records else "no epochs")
    return 0


def cmd_sweep_lambda(args) -> int:
    exp = _experiment(args)
    base, _ = load_checkpoint(args.baseline)
    data = exp.data
    acc = base.accuracy(data.x_test.astype(base.dtype), data.y_test)
    res = sweep_lambda(exp.spec, data, exp.cfg.train, acc, _variant(exp.cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "lambda_sweep.csv").write_text(res.to_csv(), encoding="utf-8", newline="")
    if res.chosen is not None:
        save_checkpoint(res.chosen, out / "regularized.synp", {"stage": "regularized", "lam": res.chosen_lam})
    print(f"lam {res.chosen_lam:g}")
    return 0 if res.chosen is not None else STAGE_CODES["sweep"]


def cmd_prune(args) -> int:
    net, _ = load_checkpoint(args.checkpoint)
    plan = make_plan(net, args.sparsity, args.indicator)
    _, report = apply_prune(net, plan, tuple(args.input_hw))
    save_checkpoint(net, _out(args.out), {"stage": "prune"}, plan)
    if args.report:
        _out(args.report).write_text(report.to_csv(), encoding="utf-8", newline="")
    print(f"pruned {plan.pruned_count}/{plan.total} threshold {plan.threshold:.6g}")
    return 0


def cmd_finetune(args) -> int:
    exp = _experiment(args)
    net, _ = load_checkpoint(args.checkpoint)
    net, hist = finetune(net, exp.data, exp.cfg.train)
    save_checkpoint(net, _out(args.out), {"stage": "finetune", "config_hash": exp.digest})
    hist.write_csv(Path(args.out).with_suffix(".csv"))
    return 0


def cmd_eval(args) -> int:
    exp = _experiment(args)
    net, _ = load_checkpoint(args.checkpoint)
    acc = net.accuracy(exp.data.x_test.astype(net.dtype), exp.data.y_test)
    masks = list(net.masks().values())
    kept = sum(int(m.sum()) for m in masks)
    total = sum(m.size for m in masks)
    print(json.dumps({"test_acc": round(acc, 6), "error%": round(100 * (1 - acc), 4),
                      "kernels": kept, "pruned%": round(100 * (1 - kept / total), 4)}, sort_keys=True))
    return 0


def cmd_export(args) -> int:
    net, _ = load_checkpoint(args.checkpoint)
    write_sbcr(export_bcsr(net), _out(args.out))
    return 0


def cmd_bench(args) -> int:
    model = read_sbcr(args.model)
    c = model.conv_layers()[0].C
    shape = (args.batch, c, *args.input_hw)
    with threadpool_limits(1) if args.single_thread else nullcontext():
        rep = bench(model, shape, args.repetitions, seed=args.seed)
    text = rep.to_csv()
    if args.out:
        _out(args.out).write_text(text, encoding="utf-8", newline="")
    else:
        sys.stdout.write(text)
    return 0


def cmd_sensitivity(args) -> int:
    exp = _experiment(args)
    models = {}
    for i, path in enumerate(args.checkpoint):
        models[i] = load_checkpoint(path)[0]
    arms = [SweepArm(kind, kind, models) for kind in exp.cfg.indicators]
    res: SensitivityResult = sensitivity_sweep(arms, exp.data, exp.cfg.prune_grid, exp.cfg.train,
                                               finetune=not args.no_finetune)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sensitivity.csv").write_text(res.curve_csv(), encoding="utf-8", newline="")
    (out / "sensitivity_rows.csv").write_text(res.rows_csv(), encoding="utf-8", newline="")
    return 0


def cmd_gradcheck(args) -> int:
    exp = _experiment(args)
    data = exp.data
    seed = exp.cfg.train.seed
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(data.y_train), size=min(args.batch, len(data.y_train)), replace=False)
    rows = []
    for variant in args.variants.split(","):
        net = Network(exp.spec, variant, seed=seed, dtype=np.float64)
        rep = finite_difference_check(net, data.x_train[idx], data.y_train[idx], lam=exp.cfg.train.lam,
                                      eps=args.eps, n_samples=args.samples, seed=seed)
        for kind, err in rep.by_kind().items():
            rows.append((variant, kind, err))
    worst = max(e for *_, e in rows)
    for variant, kind, err in rows:
        print(f"{variant:16s} {kind:14s} {err:.3e}")
    print(f"max_rel_error {worst:.3e} tolerance {args.tolerance:g}")
    return 0 if worst <= args.tolerance else 1


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synprune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every stage of an experiment")
    _add_config(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("train", help="train one model")
    _add_config(p)
    p.add_argument("--out", required=True, help="checkpoint path (.synp); history goes next to it")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep-lambda", help="geometric lambda sweep against a baseline")
    _add_config(p)
    p.add_argument("--baseline", required=True, help="baseline checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("prune", help="globally prune the weakest kernels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sparsity", type=float, required=True, help="fraction of kernels in [0, 1)")
    p.add_argument("--indicator", choices=INDICATORS, default="synaptic")
    p.add_argument("--input-hw", type=int, nargs=2, default=(28, 28))
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="per-layer accounting CSV")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("finetune", help="retrain a pruned checkpoint")
    _add_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="test accuracy and kernel counts")
    _add_config(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-bcsr", help="write an SBCR sparse model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("bench", help="time dense, direct sparse and Winograd convolutions")
    p.add_argument("--model", required=True, help="SBCR file")
    p.add_argument("--input-hw", type=int, nargs=2, default=(28, 28))
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--single-thread", action="store_true")
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sensitivity", help="accuracy drop versus sparsity for each indicator")
    _add_config(p)
    p.add_argument("--checkpoint", action="append", required=True, help="trained model (repeat per seed)")
    p.add_argument("--no-finetune", action="store_true")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _add_config(p)
    p.add_argument("--variants", default="synaptic,non_fix_gamma,non_kernel_norm,standard")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    threads = os.environ.get(THREADS_ENV)
    try:
        limit = int(threads) if threads else None
    except ValueError:
        print(f"error: {THREADS_ENV} must be an integer, got {threads!r}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limit):
            return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

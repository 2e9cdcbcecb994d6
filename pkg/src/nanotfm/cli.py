"""Command-line entry point: ``nanotfm {generate,train,eval,curve,predict}``.

Exit codes::

    0  success
    2  bad flags or malformed CSV input
    3  I/O failure, or an unreadable dump or checkpoint
    4  training diverged (non-finite loss or gradient)
    5  evaluation: a task failed hard

Only result paths and one-line summaries go to stdout; logs go to stderr.
Every command writes ``<output>.config.json`` with the effective settings.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import _backend, __version__
from . import tensor as T
from .checkpoint import CheckpointFormatError
from .model import ConfigError, ModelConfig, NanoTabPFNModel, TableBatch, predict_proba
from .prior import DumpFormatError, PriorDumpDataLoader, SyntheticPriorConfig, default_dump_name, write_dump
from .train import TrainConfig, load_training_checkpoint, save_training_checkpoint, train

log = logging.getLogger("nanotfm")

EXIT_USAGE, EXIT_IO, EXIT_DIVERGED, EXIT_TASK = 2, 3, 4, 5


class UsageError(Exception):
    pass


def _flag(parser, name, **kw):
    """Register ``--snake_name`` plus its ``--dashed-name`` alias."""
    names = [f"--{name}"]
    if "_" in name:
        names.append(f"--{name.replace('_', '-')}")
    parser.add_argument(*names, dest=name, **kw)


def _add_model_flags(p):
    d = ModelConfig()
    g = p.add_argument_group("model (NanoTabPFNModel keywords)")
    _flag(g, "embedding_size", type=int, default=d.embedding_size)
    _flag(g, "num_attention_heads", type=int, default=d.num_attention_heads)
    _flag(g, "mlp_hidden_size", type=int, default=d.mlp_hidden_size)
    _flag(g, "num_layers", type=int, default=d.num_layers)
    _flag(g, "num_outputs", type=int, default=d.num_outputs)
    _flag(g, "clip_z", type=float, default=d.clip_z)
    _flag(g, "activation", choices=["gelu", "relu"], default=d.activation.value)


def _add_train_flags(p):
    d = TrainConfig()
    g = p.add_argument_group("training")
    _flag(g, "lr", type=float, default=d.lr)
    _flag(g, "num_steps", type=int, default=d.num_steps)
    _flag(g, "batch_size", type=int, default=d.batch_size)
    _flag(g, "warmup_steps", type=int, default=d.warmup_steps)
    _flag(g, "beta1", type=float, default=d.beta1)
    _flag(g, "beta2", type=float, default=d.beta2)
    _flag(g, "eps", type=float, default=d.eps)
    _flag(g, "weight_decay", type=float, default=d.weight_decay)
    _flag(g, "grad_accum", type=int, default=d.grad_accum)
    _flag(g, "clip_grad_norm", type=float, default=None)
    _flag(g, "checkpoint_every", type=int, default=d.checkpoint_every)
    _flag(g, "dump", default=default_dump_name(SyntheticPriorConfig()), help="prior dump to train on")
    _flag(g, "prefetch", type=int, default=2)


def _add_task_flags(p):
    g = p.add_argument_group("evaluation tasks and protocol")
    g.add_argument("tasks", nargs="*", help="task CSVs (header row, last column = integer label)")
    _flag(g, "synthetic", type=int, default=0, help="add N held-out synthetic tasks")
    _flag(g, "synthetic_seed", type=int, default=10_000)
    _flag(g, "methods", default="nano,knn,tree,forest")
    _flag(g, "folds", type=int, default=5)
    _flag(g, "repetitions", type=int, default=20)
    _flag(g, "max_rows", type=int, default=200)


def build_parser():
    p = argparse.ArgumentParser(prog="nanotfm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"nanotfm {__version__}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true", help="single-threaded, fixed-order reductions")
    p.add_argument("--precision", choices=["float32", "float64"], default="float32")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic prior dump")
    d = SyntheticPriorConfig()
    _flag(g, "datasets", type=int, default=80_000)
    _flag(g, "rows", type=int, default=d.rows)
    _flag(g, "cols", type=int, default=d.cols)
    _flag(g, "classes", type=int, default=d.num_classes)
    _flag(g, "latent_dim", type=int, default=d.latent_dim)
    _flag(g, "hidden_dim", type=int, default=d.hidden_dim)
    _flag(g, "noise_scale", type=float, default=d.noise_scale)
    _flag(g, "chunk_size", type=int, default=256)
    g.add_argument("-o", "--out", default=None, help="output path (default dump_RxC_K.h5)")

    t = sub.add_parser("train", help="pretrain on a prior dump")
    _add_model_flags(t)
    _add_train_flags(t)
    t.add_argument("-o", "--out", default="nanotfm.ckpt", help="final checkpoint path")
    _flag(t, "loss_csv", default=None, help="loss history CSV (default <out>.loss.csv)")
    _flag(t, "resume", default=None, help="training checkpoint to continue from")

    e = sub.add_parser("eval", help="cross-validated ROC AUC of a checkpoint and baselines")
    _flag(e, "checkpoint", default=None)
    _add_task_flags(e)
    _flag(e, "train_seconds", type=float, default=None,
          help="cumulative training seconds of the checkpoint (default: last row of <checkpoint>.loss.csv)")
    e.add_argument("-o", "--out", default="report.csv")
    _flag(e, "aggregate_out", default=None, help="aggregate CSV (default <out stem>.aggregate.csv)")

    c = sub.add_parser("curve", help="learning curve: AUC of training snapshots vs baselines")
    _add_model_flags(c)
    _add_train_flags(c)
    _add_task_flags(c)
    _flag(c, "schedule", default="100,250,500,1000,2500", help="comma-separated snapshot points")
    _flag(c, "unit", choices=["steps", "seconds"], default="steps")
    c.add_argument("-o", "--out", default="curve.csv")

    r = sub.add_parser("predict", help="class probabilities for a test CSV given a training CSV")
    _flag(r, "checkpoint", required=True)
    r.add_argument("--train", required=True, dest="train_csv", help="CSV with features and a label column")
    r.add_argument("--test", required=True, dest="test_csv", help="CSV with the same feature columns")
    r.add_argument("-o", "--out", default="predictions.csv")
    return p


# --- helpers --------------------------------------------------------------------------------

def _echo_config(out_path, args, **extra):
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg.update(extra)
    cfg["nanotfm_version"] = __version__
    cfg["kernel_backend"] = _backend.current()
    path = f"{out_path}.config.json"
    with open(path, "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True, default=str)
    return path


def _model_config(args):
    return ModelConfig(**{f.name: getattr(args, f.name) for f in fields(ModelConfig)})


def _train_config(args):
    names = {f.name for f in fields(TrainConfig)}
    kw = {k: getattr(args, k) for k in names if hasattr(args, k)}
    kw["seed"] = args.seed
    return TrainConfig(**kw)


def _methods(text):
    methods = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in methods if m not in ("nano", "knn", "tree", "forest")]
    if bad or not methods:
        raise UsageError(f"--methods: unknown method(s) {bad}; choose from nano,knn,tree,forest")
    return methods


def _load_tasks(args):
    from .eval import TaskError, load_csv_task, synthetic_tasks

    tasks, failures = [], []
    for path in args.tasks:
        try:
            tasks.append(load_csv_task(path, name=Path(path).stem))
        except (TaskError, OSError) as exc:
            log.error("task %s failed: %s", path, exc)
            failures.append(path)
    if args.synthetic:
        tasks.extend(synthetic_tasks(args.synthetic, seed=args.synthetic_seed))
    return tasks, failures


def _protocol(args):
    from .eval import EvalProtocol

    return EvalProtocol(k=args.folds, repetitions=args.repetitions, max_rows=args.max_rows, seed=args.seed)


def _read_numeric_csv(path, role):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise UsageError(f"{path}: empty {role} CSV") from None
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise UsageError(f"{path}: row {line_no} has {len(row)} cells, header has {len(header)}")
            vals = []
            for col, cell in zip(header, row):
                try:
                    v = float(cell)
                except ValueError:
                    v = math.nan
                if not math.isfinite(v):
                    raise UsageError(
                        f"{path}: row {line_no}, column {col!r}: {cell!r} is not a finite number. "
                        "Categorical features and missing values are not handled; "
                        "preprocess them into numbers first."
                    )
                vals.append(v)
            rows.append(vals)
    return header, np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header))


# --- commands ---------------------------------------------------------------------------------

def cmd_generate(args):
    cfg = SyntheticPriorConfig(
        rows=args.rows, cols=args.cols, num_classes=args.classes, latent_dim=args.latent_dim,
        hidden_dim=args.hidden_dim, noise_scale=args.noise_scale, seed=args.seed,
    )
    out = args.out or default_dump_name(cfg)
    write_dump(out, cfg, args.datasets, chunk_size=args.chunk_size)
    _echo_config(out, args)
    print(f"{out}\tX=({args.datasets}, {cfg.rows}, {cfg.cols}) float32\ty=({args.datasets}, {cfg.rows}) int16"
          f"\tdatasets={args.datasets}")
    return 0


def cmd_train(args):
    if args.resume:
        model, opt, cfg = load_training_checkpoint(args.resume)
        cfg = TrainConfig(**{**cfg.to_dict(), "num_steps": args.num_steps})
    else:
        model = NanoTabPFNModel(_model_config(args), seed=args.seed)
        cfg = _train_config(args)
        opt = None
    loader = PriorDumpDataLoader(args.dump, cfg.num_steps, cfg.batch_size, seed=cfg.seed, prefetch=args.prefetch)
    out = args.out
    loss_csv = args.loss_csv or f"{out}.loss.csv"
    _echo_config(out, args, model_config=model.config.to_dict(), train_config=cfg.to_dict())
    stem = out[:-5] if out.endswith(".ckpt") else out

    def snapshot(step, m, o, seconds):
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_training_checkpoint(f"{stem}.step{step:06d}.ckpt", m, o, cfg)

    try:
        _, history = train(model, loader, cfg, optimizer=opt, callback=snapshot, checkpoint_path=out, loss_csv=loss_csv)
    finally:
        loader.close()
    last = history.losses[-1] if len(history) else float("nan")
    secs = history.seconds[-1] if len(history) else 0.0
    print(f"{out}\t{loss_csv}\tsteps={len(history)}\tfinal_loss={last:.4f}\ttrain_seconds={secs:.1f}")
    return 0


def _write_reports(report, args):
    report.to_csv(args.out)
    agg = args.aggregate_out or f"{os.path.splitext(args.out)[0]}.aggregate.csv"
    report.aggregate_to_csv(agg)
    return agg


def _train_seconds(args):
    if args.train_seconds is not None:
        return args.train_seconds
    path = f"{args.checkpoint}.loss.csv" if args.checkpoint else None
    if not path or not os.path.exists(path):
        return math.nan
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return float(rows[-1]["cumulative_seconds"]) if rows else math.nan


def cmd_eval(args):
    from .eval import MetricReport, evaluate_model, load_model

    methods = _methods(args.methods)
    if "nano" in methods and not args.checkpoint:
        raise UsageError("--methods includes nano but no --checkpoint was given")
    tasks, failures = _load_tasks(args)
    if not tasks and not failures:
        raise UsageError("no tasks: pass task CSVs and/or --synthetic N")
    protocol = _protocol(args)
    report = MetricReport()
    for m in methods:
        target = m
        if m == "nano":
            target = load_model(args.checkpoint)
        report.extend(evaluate_model(target, tasks, protocol, label=m))
    report.cumulative_train_seconds = _train_seconds(args)
    agg = _write_reports(report, args)
    _echo_config(args.out, args)
    summary = "\t".join(f"{m}={report.mean_roc_auc(m):.4f}" for m in methods)
    print(f"{args.out}\t{agg}\ttasks={len(tasks)}\trows={len(report.rows)}\t{summary}")
    for name, reason in report.skipped:
        log.warning("skipped %s: %s", name, reason)
    return EXIT_TASK if failures else 0


def cmd_curve(args):
    from .eval import curve_to_csv, learning_curve

    methods = _methods(args.methods)
    tasks, failures = _load_tasks(args)
    if not tasks:
        raise UsageError("no tasks: pass task CSVs and/or --synthetic N")
    try:
        schedule = [float(s) if args.unit == "seconds" else int(s) for s in args.schedule.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--schedule: could not parse {args.schedule!r}") from None
    cfg = _train_config(args)
    model = NanoTabPFNModel(_model_config(args), seed=args.seed)
    loader = PriorDumpDataLoader(args.dump, cfg.num_steps, cfg.batch_size, seed=cfg.seed, prefetch=args.prefetch)
    try:
        points = learning_curve(
            model, loader, cfg, tasks, schedule if "nano" in methods else [], unit=args.unit,
            baselines=[m for m in methods if m != "nano"], protocol=_protocol(args),
        )
    finally:
        loader.close()
    curve_to_csv(points, args.out)
    _echo_config(args.out, args, model_config=model.config.to_dict(), train_config=cfg.to_dict())
    print(f"{args.out}\tpoints={len(points)}")
    return EXIT_TASK if failures else 0


def cmd_predict(args):
    from .eval import load_model

    model = load_model(args.checkpoint)
    header, train_arr = _read_numeric_csv(args.train_csv, "training")
    test_header, test_arr = _read_numeric_csv(args.test_csv, "test")
    n_feat = len(header) - 1
    if len(test_header) == len(header) and test_header[-1] == header[-1]:
        test_arr = test_arr[:, :-1]  # ignore a label column in the test file
    elif len(test_header) != n_feat:
        raise UsageError(
            f"{args.test_csv}: {len(test_header)} columns, expected the {n_feat} feature columns of {args.train_csv}"
        )
    x_train, y_train = train_arr[:, :-1], train_arr[:, -1]
    if len(x_train) < 2:
        raise UsageError(f"{args.train_csv}: need at least 2 training rows")
    if not np.all(y_train == np.round(y_train)) or y_train.min() < 0 or y_train.max() >= model.config.num_outputs:
        raise UsageError(
            f"{args.train_csv}: labels must be integers in [0, {model.config.num_outputs}) for this checkpoint"
        )
    x = np.concatenate([x_train, test_arr]).astype(np.float32)[None]
    y = np.concatenate([y_train, np.zeros(len(test_arr))]).astype(np.int64)[None]
    proba = predict_proba(TableBatch(x, y, len(x_train)), model.params, model.config)[0]
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"p_class_{k}" for k in range(model.config.num_outputs)])
        for row in proba:
            w.writerow([repr(float(v)) for v in row])
    _echo_config(args.out, args)
    print(f"{args.out}\trows={len(proba)}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "curve": cmd_curve,
    "predict": cmd_predict,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2) if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    T.set_default_dtype(args.precision)
    if args.deterministic:
        T.set_deterministic(True)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, ValueError) as exc:
        if isinstance(exc, (DumpFormatError, CheckpointFormatError)):
            log.error("%s", exc)
            return EXIT_IO
        log.error("%s", exc)
        return EXIT_USAGE
    except FloatingPointError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

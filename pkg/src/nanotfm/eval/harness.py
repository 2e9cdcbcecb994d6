"""Cross-validated evaluation and learning curves.

Each task is (optionally) subsampled, split by repeated stratified k-fold,
and every (repetition, fold) pair becomes one in-context prediction problem:
the fold's training part is the context, its held-out part the queries.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .. import checkpoint as ckpt_io
from ..model import ModelConfig, NanoTabPFNModel, TableBatch, predict_proba
from ..prior import SyntheticPriorConfig, dataset_rng, generate_dataset
from .baselines import forest_predict, knn_predict, tree_predict
from .metrics import accuracy, roc_auc, stratified_kfold, stratified_subsample

log = logging.getLogger(__name__)

BASELINES = ("knn", "tree", "forest")


class TaskError(ValueError):
    pass


@dataclass
class EvalTask:
    x: np.ndarray
    y: np.ndarray
    name: str

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise TaskError(f"{self.name}: x must be R x C and y length R, got {self.x.shape}, {self.y.shape}")
        if not np.isfinite(self.x).all():
            raise TaskError(f"{self.name}: features contain missing or non-finite values")
        if self.y.size and (self.y.min() < 0 or not np.all(self.y == np.round(self.y))):
            raise TaskError(f"{self.name}: labels must be non-negative integers")
        self.y = self.y.astype(np.int64)

    @property
    def num_classes(self):
        return int(self.y.max()) + 1


@dataclass
class EvalProtocol:
    k: int = 5
    repetitions: int = 20
    max_rows: int = 200
    seed: int = 0


@dataclass
class MetricRow:
    task: str
    fold: int
    repetition: int
    method: str
    roc_auc: float
    accuracy: float


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    cumulative_train_seconds: float = float("nan")

    def methods(self):
        return sorted({r.method for r in self.rows})

    def task_means(self, method):
        per = {}
        for r in self.rows:
            if r.method == method:
                per.setdefault(r.task, []).append(r.roc_auc)
        return {t: float(np.mean(v)) for t, v in per.items()}

    def mean_roc_auc(self, method):
        """Mean over tasks of the per-task mean ROC AUC."""
        means = self.task_means(method)
        return float(np.mean(list(means.values()))) if means else float("nan")

    def extend(self, other):
        self.rows.extend(other.rows)
        self.skipped.extend(other.skipped)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["task", "fold", "repetition", "method", "roc_auc", "accuracy"])
            for r in self.rows:
                w.writerow([r.task, r.fold, r.repetition, r.method, repr(r.roc_auc), repr(r.accuracy)])

    def aggregate_rows(self):
        """``(method, seconds, mean AUC)``; baselines have no pretraining time."""
        return [
            (m, math.nan if m in BASELINES else self.cumulative_train_seconds, self.mean_roc_auc(m))
            for m in self.methods()
        ]

    def aggregate_to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["method", "cumulative_train_seconds", "mean_roc_auc"])
            for m, s, auc in self.aggregate_rows():
                w.writerow([m, "" if math.isnan(s) else f"{s:.6f}", repr(auc)])


# --- task sources ---------------------------------------------------------------------

def synthetic_tasks(n_tasks, cfg=None, seed=10_000):
    """Held-out tables from the synthetic prior under a seed distinct from training."""
    cfg = cfg or SyntheticPriorConfig()
    tasks = []
    for i in range(n_tasks):
        x, y = generate_dataset(cfg, dataset_rng(seed, i))
        tasks.append(EvalTask(x, y, f"synthetic-{seed}-{i}"))
    return tasks


def load_csv_task(path, name=None):
    """Numeric CSV with a header row; the last column holds integer labels."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise TaskError(f"{path}: empty file") from None
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise TaskError(f"{path}:{line_no}: expected {len(header)} cells, found {len(row)}")
            vals = []
            for col, cell in zip(header, row):
                try:
                    v = float(cell)
                except ValueError:
                    v = math.nan
                if not math.isfinite(v):
                    raise TaskError(
                        f"{path}:{line_no}: column {col!r} holds {cell!r}; categorical and missing "
                        "values must be preprocessed into numbers before evaluation"
                    )
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise TaskError(f"{path}: no data rows")
    arr = np.asarray(rows)
    return EvalTask(arr[:, :-1], arr[:, -1], name or str(path))


# --- predictors -------------------------------------------------------------------------

def load_model(path):
    c = ckpt_io.load(path)
    model = NanoTabPFNModel(ModelConfig.from_dict(c.model_config))
    model.load_state_dict(c.params)
    return model


def _resolve(method):
    if isinstance(method, NanoTabPFNModel):
        return "nano", method
    if isinstance(method, str) and method in BASELINES:
        return method, None
    if isinstance(method, str):
        return "nano", load_model(method)
    raise TypeError(f"cannot evaluate {method!r}")


def _baseline(name, tx, ty, qx, n_classes, seed):
    if name == "knn":
        return knn_predict(tx, ty, qx, k=min(5, len(tx)), n_classes=n_classes)
    if name == "tree":
        return tree_predict(tx, ty, qx, n_classes=n_classes, seed=seed)
    return forest_predict(tx, ty, qx, n_classes=n_classes, seed=seed)


def _splits(task, protocol, task_index):
    keep = stratified_subsample(task.y, protocol.max_rows, seed=[protocol.seed, task_index])
    x, y = task.x[keep], task.y[keep]
    folds = stratified_kfold(y, protocol.k, protocol.repetitions, seed=protocol.seed + task_index)
    for rep in range(protocol.repetitions):
        for fold in range(protocol.k):
            test = folds[rep] == fold
            yield rep, fold, x[~test], y[~test], x[test], y[test]


def _nano_predict_many(model, problems, max_batch=64):
    """Probabilities for a list of (train_x, train_y, test_x); same-shape problems share a batch."""
    out = [None] * len(problems)
    groups = {}
    for i, (tx, ty, qx) in enumerate(problems):
        groups.setdefault((len(tx), len(qx)), []).append(i)
    for (n_train, _), members in groups.items():
        for lo in range(0, len(members), max_batch):
            chunk = members[lo : lo + max_batch]
            xs = np.stack([np.concatenate([problems[i][0], problems[i][2]]) for i in chunk]).astype(np.float32)
            ys = np.stack(
                [np.concatenate([problems[i][1], np.zeros(len(problems[i][2]), dtype=np.int64)]) for i in chunk]
            )
            proba = predict_proba(TableBatch(xs, ys, n_train), model.params, model.config)
            for j, i in enumerate(chunk):
                out[i] = proba[j].astype(np.float64)
    return out


def evaluate_model(method, tasks, protocol=None, label=None):
    """Score ``method`` (a model, checkpoint path, or baseline name) on ``tasks``.

    Produces one row per (task, repetition, fold). Tasks that are not binary,
    or that the model cannot represent, are skipped with a warning and listed
    in ``report.skipped``.
    """
    protocol = protocol or EvalProtocol()
    kind, model = _resolve(method)
    name = label or kind
    report = MetricReport()
    for ti, task in enumerate(tasks):
        reason = None
        if task.num_classes != 2 or len(np.unique(task.y)) != 2:
            reason = "ROC AUC evaluation needs exactly two classes"
        elif model is not None and task.num_classes > model.config.num_outputs:
            reason = f"{task.num_classes} classes exceed num_outputs={model.config.num_outputs}"
        elif np.bincount(task.y).min() < protocol.k:
            reason = f"a class has fewer than k={protocol.k} members"
        if reason:
            warnings.warn(f"skipping task {task.name}: {reason}")
            report.skipped.append((task.name, reason))
            continue
        splits = list(_splits(task, protocol, ti))
        if kind == "nano":
            if min(len(s[2]) for s in splits) < 2:
                report.skipped.append((task.name, "fewer than 2 training rows per fold"))
                continue
            probas = _nano_predict_many(model, [(s[2], s[3], s[4]) for s in splits])
        else:
            probas = [
                _baseline(kind, s[2], s[3], s[4], 2, seed=protocol.seed * 1_000_003 + ti * 1009 + s[0] * 31 + s[1])
                for s in splits
            ]
        for (rep, fold, _, _, _, qy), proba in zip(splits, probas):
            report.rows.append(MetricRow(task.name, fold, rep, name, roc_auc(proba[:, 1], qy), accuracy(proba, qy)))
    return report


# --- learning curve ----------------------------------------------------------------------

@dataclass
class CurvePoint:
    kind: str  # "snapshot" or "baseline"
    step: int | None
    cumulative_seconds: float | None
    method: str
    mean_roc_auc: float


def curve_to_csv(points, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["kind", "step", "cumulative_seconds", "method", "mean_roc_auc"])
        for p in points:
            w.writerow([
                p.kind,
                "" if p.step is None else p.step,
                "" if p.cumulative_seconds is None else f"{p.cumulative_seconds:.6f}",
                p.method,
                repr(p.mean_roc_auc),
            ])


def learning_curve(model, loader, train_config, eval_tasks, schedule, unit="steps",
                   baselines=BASELINES, protocol=None):
    """Train while snapshotting the averaged weights, then score every snapshot.

    ``schedule`` lists step numbers (``unit="steps"``, reproducible) or
    cumulative training seconds (``unit="seconds"``). Evaluation happens
    after training, so it never touches the training clock. Baselines need no
    pretraining and contribute one row each.
    """
    from ..train import train

    if unit not in ("steps", "seconds"):
        raise ValueError(f"unit must be 'steps' or 'seconds', got {unit!r}")
    marks = sorted(schedule)
    snapshots = []

    def on_step(step, m, opt, seconds):
        due = step if unit == "steps" else seconds
        if marks and due >= marks[0]:
            while marks and due >= marks[0]:
                marks.pop(0)
            snapshots.append((step, seconds, opt.averaged()))

    train(model, loader, train_config, callback=on_step)
    points = []
    snap_model = NanoTabPFNModel(model.config, dtype=np.float32)
    for step, seconds, state in snapshots:
        snap_model.load_state_dict(state)
        rep = evaluate_model(snap_model, eval_tasks, protocol, label="nano")
        points.append(CurvePoint("snapshot", step, seconds, "nano", rep.mean_roc_auc("nano")))
    for name in baselines:
        rep = evaluate_model(name, eval_tasks, protocol)
        points.append(CurvePoint("baseline", None, None, name, rep.mean_roc_auc(name)))
    return points

"""Pretraining loop over a prior dump."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .model import ModelConfig, NanoTabPFNModel, TableBatch, forward
from .optim import ScheduleFreeAdamW, clip_grad_norm

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, loss):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class TrainConfig:
    lr: float = 4e-3
    num_steps: int = 2500
    batch_size: int = 32
    warmup_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0
    grad_accum: int = 1
    clip_grad_norm: float | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.num_steps < 0 or self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("num_steps >= 0, batch_size >= 1 and grad_accum >= 1 required")
        if self.batch_size % self.grad_accum:
            raise ValueError(f"batch_size={self.batch_size} not divisible by grad_accum={self.grad_accum}")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def __len__(self):
        return len(self.losses)

    def append(self, step, loss, seconds):
        self.steps.append(step)
        self.losses.append(loss)
        self.seconds.append(seconds)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss", "cumulative_seconds"])
            for row in zip(self.steps, self.losses, self.seconds):
                w.writerow([row[0], repr(row[1]), f"{row[2]:.6f}"])


def make_optimizer(model, cfg):
    return ScheduleFreeAdamW(
        model.params,
        lr=cfg.lr,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
        warmup_steps=cfg.warmup_steps,
        weight_decay=cfg.weight_decay,
    )


def batch_loss(model, batch, grad_accum=1):
    """Mean test-cell cross-entropy of ``batch``; gradients accumulate into the model.

    With ``grad_accum > 1`` the batch is processed in equal micro-batches;
    the summed gradient equals the full-batch gradient.
    """
    B = batch.x.shape[0]
    step = B // grad_accum
    total = 0.0
    for lo in range(0, B, step):
        mb = TableBatch(batch.x[lo : lo + step], batch.y[lo : lo + step], batch.split)
        logits = forward(mb, model.params, model.config)
        loss = T.cross_entropy(logits, mb.y_test) * (step / B)
        loss.backward()
        total += float(loss.item())
    return total


def save_training_checkpoint(path, model, opt, cfg):
    ckpt_io.save(path, model.config.to_dict(), opt.averaged(), cfg.to_dict(), opt.state_dict())


def load_training_checkpoint(path):
    """Rebuild ``(model, optimizer, train_config)`` from a training checkpoint.

    The model's arrays are set to the evaluation point implied by ``z`` and
    ``x``, exactly as they were when the checkpoint was written.
    """
    c = ckpt_io.load(path)
    if not c.is_training:
        raise ckpt_io.CheckpointFormatError(f"{path}: model-only checkpoint cannot be resumed")
    cfg = TrainConfig(**c.train_config)
    model = NanoTabPFNModel(ModelConfig.from_dict(c.model_config), dtype=np.float32)
    opt = make_optimizer(model, cfg)
    opt.load_state_dict({"t": c.step, "gamma_sq_sum": c.gamma_sq_sum, "z": c.z, "x": c.params, "v": c.v})
    return model, opt, cfg


def train(model, loader, config=None, *, optimizer=None, callback=None, checkpoint_path=None,
          loss_csv=None, elapsed_offset=0.0, **overrides):
    """Train ``model`` on batches from ``loader``; returns ``(model, history)``.

    ``overrides`` patch fields of ``config`` (``train(model, prior, lr=4e-3)``).
    Pass ``optimizer`` (e.g. from :func:`load_training_checkpoint`) to
    resume; training continues at step ``optimizer.t``. On return the model
    holds the averaged ``x`` weights. ``callback(step, model, optimizer,
    seconds)`` runs after each step outside the timed region.
    """
    cfg = config or TrainConfig(num_steps=len(loader), batch_size=loader.batch_size)
    if overrides:
        cfg = TrainConfig(**{**cfg.to_dict(), **overrides})
    if len(loader) < cfg.num_steps:
        raise ValueError(f"loader provides {len(loader)} batches but num_steps={cfg.num_steps}")
    if loader.batch_size != cfg.batch_size:
        raise ValueError(f"loader batch_size {loader.batch_size} != config batch_size {cfg.batch_size}")
    if loader.header.num_classes > model.config.num_outputs:
        raise ValueError(
            f"dump has {loader.header.num_classes} classes but the model has {model.config.num_outputs} outputs"
        )
    opt = optimizer or make_optimizer(model, cfg)
    if opt.t:
        for p in model.parameters():
            p.data = opt.eval_point(p.name)
    start = opt.t
    history = TrainHistory()
    elapsed = float(elapsed_offset)
    batches = loader.iterate(start)
    last_good = None
    try:
        for step in range(start + 1, cfg.num_steps + 1):
            t0 = time.perf_counter()
            try:
                batch = next(batches)
            except StopIteration:
                raise RuntimeError(f"loader exhausted after {step - 1} of {cfg.num_steps} steps") from None
            model.zero_grad()
            loss = batch_loss(model, batch, cfg.grad_accum)
            if not math.isfinite(loss):
                raise TrainingDiverged(step, loss)
            if cfg.clip_grad_norm:
                clip_grad_norm(model.parameters(), cfg.clip_grad_norm)
            opt.step()
            elapsed += time.perf_counter() - t0
            history.append(step, loss, elapsed)
            if step % 100 == 0 or step == cfg.num_steps:
                log.info("step %d/%d loss %.4f (%.1fs)", step, cfg.num_steps, loss, elapsed)
            if checkpoint_path and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_training_checkpoint(checkpoint_path, model, opt, cfg)
                last_good = step
            if callback is not None:
                callback(step, model, opt, elapsed)
    except FloatingPointError:
        if last_good is not None:
            log.error("diverged; last good checkpoint (step %d) kept at %s", last_good, checkpoint_path)
        raise
    finally:
        batches.close()
        if loss_csv:
            history.to_csv(loss_csv)
    if checkpoint_path:
        save_training_checkpoint(checkpoint_path, model, opt, cfg)
    for p in model.parameters():
        p.data = opt.x[p.name].copy()
    return model, history

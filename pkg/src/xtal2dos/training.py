"""Adam, the mini-batch training loop, and deterministic evaluation."""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import TrainConfig
from .graph import Sample, collate
from .losses import loss_fn
from .metrics import MetricReport, metric_report
from .model import Xtal2DoS
from .tensor import Tensor, zero_grad

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "val_r2", "val_wd", "seconds")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray | Tensor], **hyper) -> "AdamState":
        state = cls(**hyper)
        for name, p in params.items():
            shape = p.shape
            state.m[name] = np.zeros(shape)
            state.v[name] = np.zeros(shape)
        return state


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name!r} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


# ---------------------------------------------------------------- loop


@dataclass
class EpochStats:
    epoch: int
    loss: float
    seconds: float
    batches: int


def batches(samples: Sequence[Sample], batch_size: int, order: np.ndarray | None = None):
    idx = np.arange(len(samples)) if order is None else order
    for start in range(0, len(idx), batch_size):
        yield [samples[i] for i in idx[start:start + batch_size]]


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64([seed, epoch]))


class Trainer:
    """Model + optimizer state + epoch counter; the unit that gets checkpointed."""

    def __init__(self, cfg: TrainConfig, model: Xtal2DoS | None = None, adam: AdamState | None = None,
                 epoch: int = 0):
        self.cfg = cfg.validate()
        self.model = model if model is not None else Xtal2DoS(self.cfg)
        params = self.model.parameters()
        self.adam = adam if adam is not None else AdamState.for_params(
            params, lr=self.cfg.lr, beta1=self.cfg.beta1, beta2=self.cfg.beta2, eps=self.cfg.adam_eps)
        self.epoch = epoch
        self.loss = loss_fn(self.cfg.loss)

    def step(self, batch_samples: list[Sample]) -> float:
        batch = collate(batch_samples, self.cfg.d_edge, self.cfg.r_cut)
        params = self.model.parameters()
        zero_grad(params.values())
        pred = self.model.forward(batch, training=True)
        loss = self.loss(batch.targets, pred)
        loss.backward()
        grads = {name: p.grad for name, p in params.items()}
        if self.cfg.grad_clip is not None:
            clip_by_global_norm(grads, self.cfg.grad_clip)
        adam_step({name: p.data for name, p in params.items()}, grads, self.adam)
        return loss.item()

    def train_epoch(self, samples: Sequence[Sample]) -> EpochStats:
        if not samples:
            raise TrainingError("training split is empty")
        start = time.perf_counter()
        order = epoch_rng(self.cfg.seed, self.epoch).permutation(len(samples))
        losses = [self.step(b) for b in batches(samples, self.cfg.batch_size, order)]
        self.epoch += 1
        return EpochStats(self.epoch, math.fsum(losses) / len(losses), time.perf_counter() - start, len(losses))

    def evaluate(self, samples: Sequence[Sample]) -> MetricReport:
        return evaluate(self.model, samples, self.cfg)

    def fit(self, train: Sequence[Sample], val: Sequence[Sample] = (), epochs: int | None = None,
            log_path: str | os.PathLike | None = None) -> list[dict]:
        """Train ``epochs`` more epochs, appending one log row per epoch."""
        epochs = self.cfg.epochs if epochs is None else epochs
        rows = []
        writer = None
        fh = None
        if log_path is not None:
            fresh = not os.path.exists(log_path) or os.path.getsize(log_path) == 0
            fh = open(log_path, "a", newline="", encoding="utf-8")
            writer = csv.writer(fh)
            if fresh:
                writer.writerow(LOG_COLUMNS)
        try:
            for _ in range(epochs):
                stats = self.train_epoch(train)
                val_r2 = val_wd = math.nan
                if len(val):
                    report = self.evaluate(val)
                    val_r2, val_wd = report.r2, report.wd
                row = {"epoch": stats.epoch, "train_loss": stats.loss, "val_r2": val_r2,
                       "val_wd": val_wd, "seconds": stats.seconds}
                rows.append(row)
                log.info("epoch %d loss %.6g val_r2 %.4f val_wd %.4f (%.2fs)", stats.epoch, stats.loss,
                         val_r2, val_wd, stats.seconds)
                if writer is not None:
                    writer.writerow([row[c] for c in LOG_COLUMNS])
                    fh.flush()
        finally:
            if fh is not None:
                fh.close()
        return rows


def predict(model: Xtal2DoS, samples: Sequence[Sample], batch_size: int = 32) -> np.ndarray:
    cfg = model.cfg
    out = [model.predict(collate(b, cfg.d_edge, cfg.r_cut)) for b in batches(samples, batch_size)]
    return np.concatenate(out, axis=0)


def evaluate(model: Xtal2DoS, samples: Sequence[Sample], cfg: TrainConfig | None = None) -> MetricReport:
    """All four metrics per sample, model in eval mode (running batch-norm moments)."""
    if not samples:
        raise TrainingError("cannot evaluate an empty split")
    cfg = model.cfg if cfg is None else cfg
    preds = predict(model, samples, cfg.batch_size)
    targets = np.stack([s.target.values for s in samples])
    return metric_report([s.id for s in samples], targets, preds, cfg.bin_width)

"""Denoiser training: random diffusion steps, condition dropout, AdamW with warm-up and cosine decay."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import MotionPair, SkeletonSpec
from .denoiser import Denoiser
from .diffusion import NoiseSchedule, q_sample
from .errors import DimensionError, UsageError
from .losses import LossWeights, total_loss
from .nn import AdamW
from .seeding import stream


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    warmup: int = 100
    min_lr_ratio: float = 0.05
    weight_decay: float = 2e-5
    grad_clip: float = 1.0
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0 or self.warmup < 0:
            raise UsageError("steps >= 0, batch_size >= 1, lr > 0 and warmup >= 0 are required")


def learning_rate(step: int, config: TrainConfig) -> float:
    """Linear warm-up to ``lr`` then cosine decay to ``min_lr_ratio * lr``."""
    if config.warmup and step < config.warmup:
        return config.lr * (step + 1) / config.warmup
    span = max(config.steps - config.warmup, 1)
    progress = min((step - config.warmup) / span, 1.0)
    floor = config.min_lr_ratio
    return config.lr * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * progress)))


@dataclass
class StepRecord:
    step: int
    lr: float
    total: float
    parts: dict[str, float]


def _stack(pairs: Sequence[MotionPair], idx: np.ndarray):
    x_a = np.stack([pairs[i].x_a for i in idx])
    x_b = np.stack([pairs[i].x_b for i in idx])
    mask = np.stack([pairs[i].mask for i in idx])
    return x_a, x_b, mask, [pairs[i].tokens for i in idx]


def _clip(params, max_norm: float) -> float:
    norm = math.sqrt(sum(float((p.grad**2).sum()) for p in params if p.grad is not None))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def train(
    model: Denoiser,
    pairs: Sequence[MotionPair],
    spec: SkeletonSpec,
    schedule: NoiseSchedule,
    config: TrainConfig = TrainConfig(),
    callback: Callable[[StepRecord], None] | None = None,
) -> list[StepRecord]:
    """Run ``config.steps`` optimizer steps; batch draws for step s come from stream (seed, s)."""
    if not pairs and config.steps:
        raise UsageError("cannot train on an empty dataset")
    lengths = {p.length for p in pairs}
    if len(lengths) > 1:
        raise DimensionError(f"all pairs must share one length, got {sorted(lengths)}")
    if pairs and pairs[0].x_a.shape[1] != model.config.frame_dim:
        raise DimensionError(f"dataset frame width {pairs[0].x_a.shape[1]} does not match model {model.config.frame_dim}")
    params = model.parameters()
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    model.train()
    history = []
    for step in range(config.steps):
        rng = stream(config.seed, step)
        idx = rng.integers(0, len(pairs), config.batch_size)
        x0_a, x0_b, mask, tokens = _stack(pairs, idx)
        t = rng.integers(1, schedule.T + 1, config.batch_size)
        x_a = q_sample(schedule, x0_a, t, rng.standard_normal(x0_a.shape))
        x_b = q_sample(schedule, x0_b, t, rng.standard_normal(x0_b.shape))
        null = rng.random(config.batch_size) < model.config.cfg_dropout
        pred_a, pred_b = model(x_a, x_b, t, tokens, null)
        loss, parts = total_loss(pred_a, pred_b, x0_a, x0_b, spec, config.weights, mask)
        opt.zero_grad()
        ad.backward(loss)
        _clip(params, config.grad_clip)
        lr = learning_rate(step, config)
        opt.step(lr)
        record = StepRecord(step, lr, float(loss.data), parts)
        history.append(record)
        if callback is not None:
            callback(record)
    model.eval()
    return history


def smoothed(history: Sequence[StepRecord], window: int) -> np.ndarray:
    """Trailing moving average of the total loss."""
    values = np.array([r.total for r in history])
    if values.size == 0:
        return values
    kernel = np.ones(min(window, values.size))
    num = np.convolve(values, kernel)[: values.size]
    den = np.convolve(np.ones(values.size), kernel)[: values.size]
    return num / den


def loss_reduction(history: Sequence[StepRecord], head: int = 20, tail: int = 100) -> float:
    """Mean total loss over the last ``tail`` steps divided by that over the first ``head``."""
    values = np.array([r.total for r in history])
    return float(values[-tail:].mean() / values[:head].mean())


def write_loss_csv(path, history: Sequence[StepRecord]) -> None:
    names = sorted({k for r in history for k in r.parts})
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "total", *names])
        for r in history:
            writer.writerow([r.step, repr(r.lr), repr(r.total), *(repr(r.parts.get(n, 0.0)) for n in names)])

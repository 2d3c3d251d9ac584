"""Masked Adam training with warmup/linear decay, accumulation and dev-perplexity early stopping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .data import Batch, ParallelCorpus, batch_by_tokens
from .exceptions import ConfigError, TrainingError
from .model import Seq2SeqTransformer
from .peft import NoFT

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "step", "train_loss", "dev_ppl", "lr"]


@dataclass
class TrainConfig:
    max_lr: float = 1e-4
    warmup_steps: int = 2500
    total_steps: int = 5000
    label_smoothing: float = 0.2
    dropout: float = 0.1
    max_tokens_per_batch: int = 1024
    update_frequency: int = 2
    patience_epochs: int = 10
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(f"need 0 <= warmup_steps <= total_steps, got {self.warmup_steps} and {self.total_steps}")
        if self.patience_epochs < 1:
            raise ConfigError("patience_epochs must be at least 1")
        if self.update_frequency < 1:
            raise ConfigError("update_frequency must be at least 1")
        if not 0 <= self.label_smoothing < 1 or not 0 <= self.dropout < 1:
            raise ConfigError("label_smoothing and dropout must lie in [0, 1)")
        if self.max_lr <= 0 or self.max_tokens_per_batch < 1:
            raise ConfigError("max_lr and max_tokens_per_batch must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``max_lr`` then linear decay to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < cfg.warmup_steps:
        return cfg.max_lr * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return 0.0
    return cfg.max_lr * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)


class Adam:
    """Adam over named arrays; moments exist only for the parameters it is given."""

    def __init__(self, names, shapes, betas=(0.9, 0.98), eps: float = 1e-8, dtype=np.float64):
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros(s, dtype=dtype) for n, s in zip(names, shapes)}
        self.v = {n: np.zeros(s, dtype=dtype) for n, s in zip(names, shapes)}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            t = params[name]
            t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


OptimizerState = Adam


def clip_global_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads.values():
            g *= scale
    return norm


def make_optimizer(model: Seq2SeqTransformer) -> Adam:
    items = model.params.trainable_items()
    return Adam([n for n, _ in items], [t.shape for _, t in items], dtype=model.dtype)


def update(model: Seq2SeqTransformer, optimizer: Adam, micro_batches: list, cfg: TrainConfig, lr: float) -> tuple[float, int]:
    """One optimizer step over ``micro_batches``; gradients are averaged over all their target tokens.

    Returns the summed (smoothed) loss and the token count.
    """
    items = model.params.trainable_items()
    for _, t in items:
        t.zero_grad()
    total_loss, n_tokens = 0.0, 0
    for batch in micro_batches:
        loss = model.loss(batch.src, batch.tgt, cfg.label_smoothing, reduction="sum")
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at optimizer step {optimizer.step_count + 1}")
        loss.backward()
        total_loss += value
        n_tokens += batch.n_tokens
    grads = {}
    for name, t in items:
        g = np.zeros(t.shape, dtype=t.dtype) if t.grad is None else t.grad / n_tokens
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name} at optimizer step {optimizer.step_count + 1}")
        grads[name] = g
    clip_global_norm(grads, cfg.clip_norm)
    optimizer.step(dict(items), grads, lr)
    for _, t in items:
        t.grad = None
    return total_loss, n_tokens


def perplexity(model: Seq2SeqTransformer, data: ParallelCorpus, max_tokens: int = 4096) -> float:
    """exp of the mean unsmoothed token NLL over non-pad target positions."""
    if len(data) == 0:
        raise ConfigError("perplexity of an empty dataset")
    was_training = model.training
    model.eval()
    nll, n = 0.0, 0
    try:
        with ad.no_grad():
            for batch in _eval_batches(data, max_tokens):
                nll += model.loss(batch.src, batch.tgt, 0.0, reduction="sum").item()
                n += batch.n_tokens
    finally:
        model.train(was_training)
    return math.exp(nll / n)


def _eval_batches(data: ParallelCorpus, max_tokens: int) -> list[Batch]:
    longest = max(len(t) for t in data.targets)
    return batch_by_tokens(data, max(max_tokens, longest), seed=0)


@dataclass
class EpochRecord:
    epoch: int
    step: int
    train_loss: float
    dev_ppl: float
    lr: float


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_state: dict = field(default_factory=dict)
    best_dev_ppl: float = float("nan")
    best_epoch: int = 0
    steps: int = 0


def train(model: Seq2SeqTransformer, train_data: ParallelCorpus, dev_data: ParallelCorpus,
          cfg: TrainConfig, max_epochs: Optional[int] = None) -> TrainResult:
    """Train the masked parameters in place; the model ends holding its best-dev-perplexity state."""
    cfg.validate()
    if len(train_data) == 0 or len(dev_data) == 0:
        raise TrainingError("training and dev data must be non-empty")
    names = model.params.trainable_names()
    if isinstance(model.method, NoFT) or model.method is None and not names:
        return TrainResult(best_state=model.params.state_dict(names), best_dev_ppl=perplexity(model, dev_data))
    if not names:
        raise TrainingError("no trainable parameters")
    model.dropout_p = cfg.dropout
    model.rng = np.random.default_rng([cfg.seed, 1])
    optimizer = make_optimizer(model)
    result = TrainResult(best_state=model.params.state_dict(names), best_dev_ppl=float("inf"))
    step, epoch, stale = 0, 0, 0
    model.train()
    while step < cfg.total_steps and (max_epochs is None or epoch < max_epochs):
        epoch += 1
        batches = batch_by_tokens(train_data, cfg.max_tokens_per_batch, seed=cfg.seed * 1_000_003 + epoch)
        loss_sum, tokens = 0.0, 0
        for start in range(0, len(batches), cfg.update_frequency):
            step += 1
            lr = lr_at(step, cfg)
            l, n = update(model, optimizer, batches[start : start + cfg.update_frequency], cfg, lr)
            loss_sum += l
            tokens += n
            if step >= cfg.total_steps:
                break
        dev_ppl = perplexity(model, dev_data)
        model.train()
        record = EpochRecord(epoch, step, loss_sum / tokens, dev_ppl, lr_at(step, cfg))
        result.history.append(record)
        log.info("epoch %d step %d loss %.4f dev_ppl %.4f", epoch, step, record.train_loss, dev_ppl)
        if dev_ppl < result.best_dev_ppl:
            result.best_dev_ppl, result.best_epoch, stale = dev_ppl, epoch, 0
            result.best_state = model.params.state_dict(names)
        else:
            stale += 1
            if stale >= cfg.patience_epochs:
                break
    result.steps = step
    model.params.load_state_dict(result.best_state, strict=False)
    model.eval()
    return result


def write_history(history: list, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for r in history:
            writer.writerow([r.epoch, r.step, f"{r.train_loss:.6f}", f"{r.dev_ppl:.6f}", f"{r.lr:.8g}"])
    return path


def read_history(path) -> list[EpochRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [EpochRecord(int(r["epoch"]), int(r["step"]), float(r["train_loss"]), float(r["dev_ppl"]), float(r["lr"]))
                for r in csv.DictReader(fh)]


__all__ = ["TrainConfig", "Adam", "OptimizerState", "lr_at", "update", "train", "perplexity",
           "write_history", "read_history", "EpochRecord", "TrainResult"]

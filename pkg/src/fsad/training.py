"""Episode optimization: BCE on semantic scores, AdamW, cosine annealing.

Prompts, alignment blocks and the logit scale train at the fast rate;
adapters train ten times slower. Support features come precomputed from the
frozen visual tower, so each step differentiates only the adaptation stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractError, DomainError
from .inference import semantic_scores
from .model import FAST_GROUP, Model, forward, named_parameters, parameter_groups
from .numcore import GradTape, Tensor, backward


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr_fast: float = 1e-4
    lr_slow: float = 1e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr_fast <= 0 or self.lr_slow <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")


SCORE_FLOOR = 1e-12


def bce_loss(scores: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy over probability scores.

    Scores are clamped away from {0, 1} so saturated sigmoids cannot produce
    infinite log terms; clamped entries contribute zero gradient.
    """
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ContractError("empty batch in loss")
    if scores.data.size != y.size:
        raise ContractError(f"{scores.data.size} scores vs {y.size} labels")
    flat = nc.clip(nc.reshape(scores, (y.size,)), SCORE_FLOOR, 1.0 - SCORE_FLOOR)
    ones = Tensor(np.ones(y.size))
    pos = nc.mul(Tensor(y), nc.log(flat))
    neg = nc.mul(Tensor(1.0 - y), nc.log(nc.sub(ones, flat)))
    return nc.scale(nc.sum_all(nc.add(pos, neg)), -1.0 / y.size)


def cosine_lr(base_lr: float, epoch: int, total: int) -> float:
    """Half-cosine decay from base_lr toward zero across the run."""
    if not 0 <= epoch < total:
        raise DomainError(f"epoch {epoch} outside schedule of {total}")
    return 0.5 * base_lr * (1.0 + np.cos(np.pi * epoch / total))


class AdamW:
    """Decoupled-weight-decay Adam over named parameters with per-name rates."""

    def __init__(self, params: dict[str, Tensor], weight_decay: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = {n: p for n, p in params.items() if p.requires_grad}
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self._m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self._v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, lrs: dict[str, float]) -> None:
        """One update using per-parameter learning rates; skips missing grads."""
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ContractError(f"{name}: grad shape {g.shape} vs {p.data.shape}")
            lr = lrs[name]
            m = self._m[name] = self.beta1 * self._m[name] + (1 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data = (p.data - lr * self.weight_decay * p.data
                      - lr * m_hat / (np.sqrt(v_hat) + self.eps))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def training_scores(model: Model, visual_taps: dict[int, Tensor]) -> Tensor:
    """Differentiable batch of semantic scores, the quantity BCE trains on."""
    out = forward(model, visual_taps)
    return semantic_scores(out.visual, out.class_vectors["abnormal"], model.tau())


@dataclass
class TraceRow:
    epoch: int
    lr_fast: float
    lr_slow: float
    loss: float


def train_episode(model: Model, support_feats: dict[int, np.ndarray], labels,
                  config: TrainConfig) -> list[TraceRow]:
    """Optimize the adaptation stack on one support set.

    support_feats maps visual taps to [B, P, d] frozen features; labels is
    the matching 0/1 vector. Mini-batches are consecutive fixed-order slices
    capped at the configured batch size, so runs are fully deterministic.
    """
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = y.size
    if n == 0:
        raise ContractError("empty support set")
    groups = parameter_groups(model)
    rate_key = {name: (config.lr_fast if group == FAST_GROUP else config.lr_slow)
                for group, names in groups.items() for name in names}
    opt = AdamW(named_parameters(model), weight_decay=config.weight_decay,
                beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    bounds = list(range(0, n, min(config.batch_size, n))) + [n]
    trace: list[TraceRow] = []
    for epoch in range(config.epochs):
        decay = cosine_lr(1.0, epoch, config.epochs)
        lrs = {name: base * decay for name, base in rate_key.items()}
        total_loss = 0.0
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            batch = {layer: Tensor(feats[lo:hi])
                     for layer, feats in support_feats.items()}
            with GradTape() as tape:
                scores = training_scores(model, batch)
                loss = bce_loss(scores, y[lo:hi])
            opt.zero_grad()
            backward(loss, tape)
            opt.step(lrs)
            total_loss += loss.item() * (hi - lo)
        trace.append(TraceRow(epoch=epoch, lr_fast=config.lr_fast * decay,
                              lr_slow=config.lr_slow * decay, loss=total_loss / n))
    opt.zero_grad()
    return trace

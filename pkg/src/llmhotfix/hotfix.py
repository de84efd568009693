"""Adapter training loop: only the adapter tensors move, the base stays frozen."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import HotfixExample
from .loss import ConfigurationError, needs, objective_loss
from .model import TransformerLM
from .peft import AdapterSpec, AdapterState, init_adapter, prepare_base


@dataclass
class TrainSettings:
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 3e-4
    seed: int = 0
    patience: int = 3
    neutral_per_step: int = 4

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.patience < 1 or self.neutral_per_step < 0:
            raise ConfigurationError("patience must be >= 1 and neutral_per_step >= 0")


@dataclass
class HotfixResult:
    adapter: AdapterState
    base: TransformerLM
    log: list[dict] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    val_dual: list[float] = field(default_factory=list)
    best_epoch: int = 0


def validation_dual(base: TransformerLM, adapter: AdapterState, examples: Sequence[HotfixExample],
                    batch_size: int = 16) -> float:
    """Example-weighted mean Dual loss, no gradients."""
    total = 0.0
    with T.no_grad():
        for s in range(0, len(examples), batch_size):
            chunk = examples[s:s + batch_size]
            loss, _ = objective_loss(base, adapter, chunk, "Dual")
            total += loss.item() * len(chunk)
    return total / len(examples)


def train_hotfix(model: TransformerLM, spec: AdapterSpec, train: Sequence[HotfixExample], objective: str,
                 settings: TrainSettings | None = None, validation: Sequence[HotfixExample] = (),
                 neutral: Sequence[Sequence[int]] = (), allow_unsupported: bool = False,
                 on_step: Callable[[dict], None] | None = None) -> HotfixResult:
    """Fit a fresh adapter of ``spec`` on ``train`` under ``objective``.

    With a validation split, the adapter from the epoch with the lowest
    validation Dual loss is kept and training stops after ``patience``
    epochs without improvement.
    """
    settings = settings or TrainSettings()
    parts = needs(objective)
    if not train:
        raise ConfigurationError("empty training split")
    if "kl" in parts and settings.neutral_per_step and not neutral:
        raise ConfigurationError(f"{objective} needs neutral sequences for the KL term")
    base = prepare_base(model, spec)
    adapter = init_adapter(spec, base, seed=settings.seed)
    opt = T.Adam(adapter.parameters(), learning_rate=settings.learning_rate)
    rng = np.random.default_rng(settings.seed)
    result = HotfixResult(adapter, base)
    best, best_state, stale, step = np.inf, adapter.copy(), 0, 0
    for epoch in range(settings.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(train))
        for s in range(0, len(order), settings.batch_size):
            batch = [train[i] for i in order[s:s + settings.batch_size]]
            extra = []
            if "kl" in parts and settings.neutral_per_step:
                pick = rng.choice(len(neutral), size=min(settings.neutral_per_step, len(neutral)), replace=False)
                extra = [neutral[i] for i in pick]
            opt.zero_grad()
            loss, bd = objective_loss(base, adapter, batch, objective, neutral=extra,
                                      allow_unsupported=allow_unsupported)
            T.backward(loss)
            opt.step()
            step += 1
            row = {"step": step, "epoch": epoch + 1, **bd.as_row()}
            result.log.append(row)
            if on_step is not None:
                on_step(row)
        result.epoch_seconds.append(time.perf_counter() - t0)
        if validation:
            v = validation_dual(base, adapter, validation)
            result.val_dual.append(v)
            if v < best:
                best, best_state, stale = v, adapter.copy(), 0
                result.best_epoch = epoch + 1
            else:
                stale += 1
                if stale >= settings.patience:
                    break
    if validation:
        adapter = best_state
    else:
        result.best_epoch = len(result.epoch_seconds)
    adapter.set_trainable(False)
    result.adapter = adapter
    return result


LOG_FIELDS = ("step", "epoch", "objective_name", "l_total", "l_vanilla", "l_guided",
              "l_unlearn", "l_ratio", "l_kl")


"""Cross-entropy, the intensity-aware loss and their weighted combination."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, ops
from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.1
    aux_weight: float = 0.3
    ial_on_aux: bool = False

    def __post_init__(self):
        for name in ("lam", "aux_weight"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and non-negative, got {v}")


def _targets(logits: Tensor, targets) -> np.ndarray:
    if logits.ndim != 2:
        raise ContractError(f"logits must be (batch, classes), got {logits.shape}")
    t = np.asarray(targets, dtype=np.intp).reshape(-1)
    if t.shape[0] != logits.shape[0]:
        raise ContractError(f"{t.shape[0]} targets for a batch of {logits.shape[0]}")
    k = logits.shape[1]
    if np.any(t < 0) or np.any(t >= k):
        raise ContractError(f"target out of range [0, {k})")
    return t


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Batch mean of -log softmax(logits)[target]."""
    t = _targets(logits, targets)
    if logits.shape[1] < 2:
        raise ContractError("cross-entropy needs at least two classes")
    return ops.scale(ops.mean(ops.pick(ops.log_softmax(logits), t)), -1.0)


def hardest_negative(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Index of the largest non-target logit per row; ties go to the lowest index."""
    masked = np.array(logits, dtype=np.float64, copy=True)
    masked[np.arange(len(targets)), targets] = -np.inf
    return np.argmax(masked, axis=1)


def intensity_aware_loss(logits: Tensor, targets) -> Tensor:
    """Batch mean of -log(e^x_t / (e^x_t + e^x_max)).

    x_max is a hard selection, so each sample sends gradient to exactly two
    logits: its target and its strongest competitor.
    """
    t = _targets(logits, targets)
    if logits.shape[1] < 2:
        raise ContractError("intensity-aware loss needs a non-target class (K >= 2)")
    m = hardest_negative(logits.data, t)
    b = logits.shape[0]
    x_t = ops.reshape(ops.pick(logits, t), (b, 1))
    x_m = ops.reshape(ops.pick(logits, m), (b, 1))
    pair = ops.concat([x_t, x_m], axis=1)
    zeros = np.zeros(b, dtype=np.intp)
    return ops.scale(ops.mean(ops.pick(ops.log_softmax(pair), zeros)), -1.0)


def combined_loss(
    logits: Tensor, aux_logits: Sequence[Tensor], targets, cfg: LossConfig = LossConfig()
) -> Tensor:
    """CE + lam * IAL on the main head, plus aux_weight * CE on each auxiliary head.

    Terms with a zero coefficient are skipped, so lam = 0 without auxiliary
    heads is exactly cross_entropy.
    """
    total = cross_entropy(logits, targets)
    if cfg.lam:
        total = ops.add(total, ops.scale(intensity_aware_loss(logits, targets), cfg.lam))
    if cfg.aux_weight:
        for aux in aux_logits:
            term = cross_entropy(aux, targets)
            if cfg.ial_on_aux and cfg.lam:
                term = ops.add(term, ops.scale(intensity_aware_loss(aux, targets), cfg.lam))
            total = ops.add(total, ops.scale(term, cfg.aux_weight))
    return total

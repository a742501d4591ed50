"""Per-stage linear classifiers and the deep-supervision loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attention import AttentionTrace
from .autodiff import ParamStore, Tensor, linear, log_softmax
from .errors import ConfigError, DimensionError, DomainError


@dataclass
class ClassifierHead:
    W: Tensor  # [C, D]
    b: Tensor  # [C]

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @classmethod
    def create(cls, store: ParamStore, prefix: str, feature_dim: int, num_classes: int) -> "ClassifierHead":
        return cls(
            store.param(f"{prefix}.W", (num_classes, feature_dim)),
            store.param(f"{prefix}.b", (num_classes,), fan_in=feature_dim),
        )


def make_heads(store: ParamStore, count: int, feature_dim: int, num_classes: int) -> list[ClassifierHead]:
    """One untied head per stage ``0..count-1``, named ``head.<stage>``."""
    return [ClassifierHead.create(store, f"head.{i}", feature_dim, num_classes) for i in range(count)]


@dataclass(frozen=True)
class LossWeights:
    lambdas: tuple[float, ...]

    def __post_init__(self):
        lambdas = tuple(float(x) for x in self.lambdas)
        object.__setattr__(self, "lambdas", lambdas)
        if not lambdas:
            raise ConfigError("loss weights need at least one entry")
        if any(not np.isfinite(x) or x < 0 for x in lambdas):
            raise ConfigError(f"loss weights must be finite and nonnegative, got {lambdas}")
        if not any(x > 0 for x in lambdas):
            raise ConfigError("at least one loss weight must be positive")

    @classmethod
    def ones(cls, num_layers: int) -> "LossWeights":
        return cls((1.0,) * (num_layers + 1))

    def __len__(self) -> int:
        return len(self.lambdas)


def classify(g: Tensor, head: ClassifierHead) -> Tensor:
    if g.shape[-1] != head.W.shape[1]:
        raise DimensionError(f"classifier expects features of size {head.W.shape[1]}, got {g.shape}")
    return linear(g, head.W, head.b)


def _labels_array(labels, num_classes: int, batch_shape: tuple[int, ...]) -> np.ndarray:
    arr = np.asarray(labels)
    if not np.issubdtype(arr.dtype, np.integer):
        raise DomainError(f"labels must be integers, got dtype {arr.dtype}")
    if arr.shape != batch_shape:
        raise DimensionError(f"labels shape {arr.shape} does not match logits batch {batch_shape}")
    if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
        raise DomainError(f"label out of range [0, {num_classes}): {labels}")
    return arr


def cross_entropy(logits: Tensor, label) -> Tensor:
    """``-log softmax(logits)[label]``, averaged over a leading batch axis if present."""
    c = logits.shape[-1]
    labels = _labels_array(label, c, logits.shape[:-1])
    log_probs = log_softmax(logits, axis=-1)
    if logits.ndim == 1:
        return -log_probs[int(labels)]
    picked = log_probs[np.arange(labels.shape[0]), labels]
    return -picked.mean()


def stage_losses(trace: AttentionTrace, heads: Sequence[ClassifierHead], label) -> list[Tensor]:
    return [cross_entropy(classify(g, head), label) for g, head in zip(trace.per_layer_globals, heads)]


def combined_loss(
    trace: AttentionTrace,
    heads: Sequence[ClassifierHead],
    label,
    weights: LossWeights,
) -> Tensor:
    """``sum_i lambda_i * CE(head_i(g^i), label)`` over stages ``0..M``."""
    stages = len(trace.per_layer_globals)
    if not (len(heads) == len(weights) == stages):
        raise ConfigError(
            f"need one head and one loss weight per stage: {stages} stages, "
            f"{len(heads)} heads, {len(weights)} weights"
        )
    total: Tensor | None = None
    for lam, loss in zip(weights.lambdas, stage_losses(trace, heads, label)):
        term = loss * lam
        total = term if total is None else total + term
    return total


def predict(trace: AttentionTrace, heads: Sequence[ClassifierHead]):
    """Argmax of the final head's logits, lowest class index on ties."""
    logits = classify(trace.per_layer_globals[-1], heads[-1]).values
    out = np.argmax(logits, axis=-1)
    return int(out) if out.ndim == 0 else out

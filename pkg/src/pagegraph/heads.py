"""Task heads and metrics: per-region entity labels, whole-document class.

The entity head is a single affine map on every non-global output row; the
document head reads the global node only.  Entity quality is micro
precision/recall/F1 over regions with the background label excluded from
the positive set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterRegistry, Tensor, cross_entropy  # noqa: F401  (re-export)
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class EntityLabelSet:
    """Ordered label vocabulary; the background label is excluded from F1."""

    names: tuple[str, ...]
    background: str | None = "other"

    def __post_init__(self):
        if not self.names:
            raise ConfigError("label set must not be empty")
        if len(set(self.names)) != len(self.names):
            raise ConfigError(f"duplicate label names in {self.names}")

    @property
    def size(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"unknown label {name!r}; known: {self.names}") from None

    @property
    def background_index(self) -> int | None:
        if self.background is None or self.background not in self.names:
            return None
        return self.names.index(self.background)

    @classmethod
    def from_corpus(cls, docs, background: str | None = "other") -> "EntityLabelSet":
        names = sorted({r.label for doc in docs for r in doc.regions if r.label is not None})
        if not names:
            raise DataError("corpus carries no region labels")
        return cls(tuple(names), background)


@dataclass(frozen=True)
class Prediction:
    """One classification outcome: argmax index plus the full score vector."""

    label: int
    scores: np.ndarray

    def __post_init__(self):
        if int(np.argmax(self.scores)) != self.label:
            raise ConfigError("prediction label must be the argmax of its scores")


def entity_logits(h_final: Tensor, registry: ParameterRegistry) -> Tensor:
    """Affine map over rows 1..n (the global node is excluded)."""
    return ad.add(ad.matmul(h_final[1:], registry["heads/entity_w"]), registry["heads/entity_b"])


def doc_logits(h_final: Tensor, registry: ParameterRegistry) -> Tensor:
    """Affine map on the global node's output row."""
    out = ad.add(ad.matmul(h_final[0:1], registry["heads/doc_w"]), registry["heads/doc_b"])
    return ad.reshape(out, (out.data.shape[1],))


@dataclass(frozen=True)
class PrfScores:
    precision: float
    recall: float
    f1: float


def _prf(tp: int, pred_pos: int, gold_pos: int) -> PrfScores:
    p = tp / pred_pos if pred_pos else 0.0
    r = tp / gold_pos if gold_pos else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return PrfScores(p, r, f1)


def entity_f1(
    predictions, gold, label_set: EntityLabelSet
) -> tuple[PrfScores, dict[str, PrfScores]]:
    """Micro P/R/F1 over regions, plus per-label scores.

    Predictions and gold are aligned label-index sequences over the same
    region set.  Background regions count only when predicted positive
    (false positives) or missed gold positives elsewhere.
    """
    pred = np.asarray(predictions, dtype=np.int64)
    gold = np.asarray(gold, dtype=np.int64)
    if pred.shape != gold.shape:
        raise DataError(f"prediction/gold region sets differ: {pred.shape} vs {gold.shape}")
    bg = label_set.background_index
    pred_pos = pred != bg if bg is not None else np.ones_like(pred, dtype=bool)
    gold_pos = gold != bg if bg is not None else np.ones_like(gold, dtype=bool)
    tp = int(((pred == gold) & gold_pos).sum())
    micro = _prf(tp, int(pred_pos.sum()), int(gold_pos.sum()))
    per_label = {}
    for idx, name in enumerate(label_set.names):
        if idx == bg:
            continue
        tp_l = int(((pred == idx) & (gold == idx)).sum())
        per_label[name] = _prf(tp_l, int((pred == idx).sum()), int((gold == idx).sum()))
    return micro, per_label

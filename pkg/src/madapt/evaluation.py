"""Metrics, the four comparison arms, and fused-feature cosine similarity."""

import enum
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ContractError, DimensionError
from .model import (
    ModalitySubset,
    duplicate_fill,
    extract_fused_feature,
    forward,
)


class EvalArm(str, enum.Enum):
    PRETRAINED = "pretrained"
    DUPLICATION = "duplication"
    DEDICATED = "dedicated"
    ADAPTED = "adapted"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ContractError(f"unknown arm {value!r}") from None


ARM_ORDER = {arm: i for i, arm in enumerate(EvalArm)}


@dataclass
class ClassMetrics:
    label: int
    accuracy: float
    f1: float
    support: int
    absent: bool  # class occurs in neither labels nor predictions


@dataclass
class Metrics:
    accuracy: float
    macro_f1: float
    mean_per_class_accuracy: float
    per_class: List[ClassMetrics] = field(default_factory=list)

    def as_row(self):
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "mean_per_class_accuracy": self.mean_per_class_accuracy,
        }


def confusion_matrix(predictions, labels, num_classes):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def compute_metrics(predictions, labels, num_classes):
    """Accuracy, macro-F1 and mean per-class recall.

    F1 is 0 for a class with precision + recall = 0. A class with no support
    contributes recall 0 to the per-class mean.
    """
    predictions = np.asarray(predictions, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if predictions.shape != labels.shape:
        raise ContractError(f"{predictions.size} predictions for {labels.size} labels")
    for name, arr in (("predictions", predictions), ("labels", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ContractError(f"{name} contain values outside [0, {num_classes})")
    cm = confusion_matrix(predictions, labels, num_classes)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        recall = np.where(support > 0, tp / np.maximum(support, 1), 0.0)
        precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1), 0.0)
    per_class = [
        ClassMetrics(c, float(recall[c]), float(f1[c]), int(support[c]),
                     bool(support[c] == 0 and predicted[c] == 0))
        for c in range(num_classes)
    ]
    acc = float(tp.sum() / labels.size) if labels.size else 0.0
    return Metrics(acc, float(f1.mean()), float(recall.mean()), per_class)


def arm_logits(arm, subset, batch, theta=None, dedicated=None, bank=None, source=None):
    """Logits of one comparison arm on ``batch`` with only ``subset`` available."""
    arm = EvalArm.parse(arm)
    if arm is EvalArm.DEDICATED:
        if dedicated is None:
            raise ContractError("arm 'dedicated' needs a dedicated model for the subset")
        return forward(dedicated, batch, subset)
    if theta is None:
        raise ContractError(f"arm {arm.value!r} needs the pretrained theta")
    if arm is EvalArm.PRETRAINED:
        return forward(theta, batch, subset)
    if arm is EvalArm.DUPLICATION:
        return forward(theta, duplicate_fill(batch, subset, source), ModalitySubset.full(subset.num_modalities))
    if bank is None:
        raise ContractError("arm 'adapted' needs an adapter bank for the subset")
    return forward(theta, batch, subset, bank)


def evaluate_arm(arm, subset, testset, theta=None, dedicated=None, bank=None, source=None):
    logits = arm_logits(arm, subset, testset, theta, dedicated, bank, source)
    C = logits.shape[1]
    return compute_metrics(np.argmax(logits, axis=1), testset.labels, C)


def cosine_similarity(u, v):
    """Row-wise cosine similarity; NaN where either row has zero norm."""
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    if u.shape != v.shape:
        raise DimensionError(f"cannot compare shapes {u.shape} and {v.shape}")
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    ok = (nu > 0) & (nv > 0)
    out = np.full(u.shape[0], np.nan)
    out[ok] = np.einsum("ij,ij->i", u[ok], v[ok]) / (nu[ok] * nv[ok])
    return np.clip(out, -1.0, 1.0)


@dataclass
class CosSimReport:
    """Per-class mean similarity to complete-input features; None marks an absent class."""

    subset: ModalitySubset
    pretrained: List[Optional[float]]
    adapted: List[Optional[float]]
    counts: List[int]
    excluded: int

    def rows(self):
        return [
            {"class": c, "pretrained": p, "adapted": a, "count": n}
            for c, (p, a, n) in enumerate(zip(self.pretrained, self.adapted, self.counts))
        ]

    def fraction_adapted_ge(self):
        pairs = [(p, a) for p, a in zip(self.pretrained, self.adapted) if p is not None and a is not None]
        if not pairs:
            return float("nan")
        return sum(a >= p for p, a in pairs) / len(pairs)


def _per_class_means(sims, labels, num_classes):
    means, counts = [], []
    for c in range(num_classes):
        vals = sims[(labels == c) & ~np.isnan(sims)]
        counts.append(int(vals.size))
        means.append(float(vals.mean()) if vals.size else None)
    return means, counts


def cosine_similarity_analysis(theta, bank, subset, testset):
    """Compare fused features under missing inputs against complete-input features.

    The reference is always theta on complete inputs without a bank. The
    pretrained arm uses theta on zero-filled inputs; the adapted arm adds
    ``bank`` (when given). Similarities are averaged per sample within each
    ground-truth class.
    """
    C = theta.spec.num_classes
    full = ModalitySubset.full(subset.num_modalities)
    ref = extract_fused_feature(theta, testset, full)
    pre = cosine_similarity(ref, extract_fused_feature(theta, testset, subset))
    pre_means, counts = _per_class_means(pre, testset.labels, C)
    excluded = int(np.isnan(pre).sum())
    if bank is not None:
        ada = cosine_similarity(ref, extract_fused_feature(theta, testset, subset, bank))
        ada_means, ada_counts = _per_class_means(ada, testset.labels, C)
        excluded += int(np.isnan(ada).sum())
        counts = [min(a, b) for a, b in zip(counts, ada_counts)]
    else:
        ada_means = [None] * C
    return CosSimReport(subset, pre_means, ada_means, counts, excluded)

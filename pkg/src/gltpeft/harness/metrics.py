from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from ..errors import ContractError


@dataclass(frozen=True)
class Metrics:
    """Binary classification metrics; label 1 is the positive class.

    Ratios whose denominator is zero (and AUC on a single-class label set)
    are ``None``.
    """

    acc: float
    sen: float | None
    spe: float | None
    f1: float | None
    auc: float | None
    tp: int
    tn: int
    fp: int
    fn: int

    def as_dict(self):
        return asdict(self)


def _ratio(num, den):
    return num / den if den else None


def auc_score(scores, labels) -> float | None:
    """Mann-Whitney AUC, ties counted as one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def compute_metrics(scores, labels, threshold: float = 0.5) -> Metrics:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape or scores.size == 0:
        raise ContractError(f"scores {scores.shape} and labels {labels.shape} must be equal-length and non-empty")
    if np.any((scores < 0) | (scores > 1)):
        raise ContractError("scores must lie in [0, 1]")
    if np.any((labels != 0) & (labels != 1)):
        raise ContractError("labels must be 0 or 1")
    pred = scores >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    tn = int(np.sum(~pred & ~pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    return Metrics(
        acc=(tp + tn) / (tp + tn + fp + fn),
        sen=_ratio(tp, tp + fn),
        spe=_ratio(tn, tn + fp),
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
        auc=auc_score(scores, labels),
        tp=tp,
        tn=tn,
        fp=fp,
        fn=fn,
    )

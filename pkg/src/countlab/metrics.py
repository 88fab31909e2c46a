"""Counting and agreement metrics.

Report keys follow a two-letter convention: first letter the target
(``N`` negative, ``P`` positive, ``T`` tumour proportion score), second the
statistic (``M`` MAE, ``R`` RMSE); ``WM`` is the weighted MSE across
categories.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import softmax

logger = logging.getLogger(__name__)

REPORT_KEYS = ("NM", "NR", "PM", "PR", "TM", "WM")
DEFAULT_GRADE_EDGES = (0.01, 0.50)  # TPS grades: <1%, 1-49%, >=50%


def _pair(preds, gts):
    p = np.asarray(preds, dtype=np.float64).ravel()
    g = np.asarray(gts, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise ValueError(f"length mismatch {p.size} vs {g.size}")
    if p.size == 0:
        raise ValueError("metrics need at least one sample")
    return p, g


def mae(preds, gts) -> float:
    p, g = _pair(preds, gts)
    return float(np.mean(np.abs(p - g)))


def mse(preds, gts) -> float:
    p, g = _pair(preds, gts)
    return float(np.mean((p - g) ** 2))


def rmse(preds, gts) -> float:
    return float(np.sqrt(mse(preds, gts)))


def tps(c_pos, c_neg) -> tuple[float, bool]:
    """Positive fraction ``c_pos / (c_pos + c_neg)``; returns ``(value, degenerate)``.

    An image without tumour cells scores 0 and is flagged degenerate.
    """
    if c_pos < 0 or c_neg < 0:
        raise ValueError("counts must be non-negative")
    total = c_pos + c_neg
    if total == 0:
        return 0.0, True
    return float(c_pos / total), False


def tps_array(c_pos, c_neg) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(c_pos, dtype=np.float64)
    neg = np.asarray(c_neg, dtype=np.float64)
    if (pos < 0).any() or (neg < 0).any():
        raise ValueError("counts must be non-negative")
    total = pos + neg
    flag = total == 0
    return np.where(flag, 0.0, pos / np.where(flag, 1.0, total)), flag


def wmse_weights(per_category_total_gt: Sequence[float], norm_floor: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Softmax of ``ln(total / median(totals))``; returns ``(weights, zero_flags)``."""
    totals = np.asarray(per_category_total_gt, dtype=np.float64)
    if totals.ndim != 1 or totals.size == 0:
        raise ValueError("need at least one category total")
    if (totals < 0).any():
        raise ValueError("totals must be non-negative")
    if (totals == 0).all():
        raise ValueError("all category totals are zero")
    zero = totals == 0
    if zero.any():
        logger.warning("wmse: %d category total(s) are zero; using floor %g", int(zero.sum()), norm_floor)
    totals = np.where(zero, norm_floor, totals)
    f = np.log(totals / np.median(totals))
    return softmax(f), zero


def wmse(per_category_mse: Sequence[float], per_category_total_gt: Sequence[float], norm_floor: float = 1e-8) -> float:
    """``(1/m) * sum_i w_i * MSE_i`` with :func:`wmse_weights` (the ``1/m`` prefactor is kept)."""
    errs = np.asarray(per_category_mse, dtype=np.float64)
    w, _ = wmse_weights(per_category_total_gt, norm_floor)
    if errs.shape != w.shape:
        raise ValueError("one MSE per category is required")
    return float(np.dot(w, errs) / len(w))


def confusion_matrix(labels_a, labels_b, num_levels: int) -> np.ndarray:
    a = np.asarray(labels_a, dtype=np.int64).ravel()
    b = np.asarray(labels_b, dtype=np.int64).ravel()
    if a.shape != b.shape:
        raise ValueError("label lists differ in length")
    if a.size == 0:
        raise ValueError("empty label lists")
    if num_levels < 2:
        raise ValueError("num_levels must be >= 2")
    for x in (a, b):
        if x.min() < 0 or x.max() >= num_levels:
            raise ValueError(f"labels must lie in 0..{num_levels - 1}")
    O = np.zeros((num_levels, num_levels), dtype=np.int64)
    np.add.at(O, (a, b), 1)
    return O


def qwk(labels_a, labels_b, num_levels: int) -> float:
    """Quadratic weighted kappa with weights ``(i - j)^2 / (L - 1)^2``."""
    O = confusion_matrix(labels_a, labels_b, num_levels).astype(np.float64)
    L = num_levels
    i, j = np.indices((L, L))
    w = (i - j) ** 2 / (L - 1) ** 2
    E = np.outer(O.sum(axis=1), O.sum(axis=0)) / O.sum()
    den = float((w * E).sum())
    if den == 0.0:
        # only when both raters give every item the same single grade: perfect agreement
        return 1.0
    return float(1.0 - (w * O).sum() / den)


def tps_grade(values, edges: Sequence[float] = DEFAULT_GRADE_EDGES) -> np.ndarray:
    """Ordinal grade of each TPS value: the number of ``edges`` it reaches."""
    return np.searchsorted(np.asarray(edges, dtype=np.float64), np.asarray(values, dtype=np.float64), side="right")


@dataclass
class EvalRecord:
    """Per-image counts, ``(N, m)`` with category order negative, positive."""

    pred: np.ndarray
    gt: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=np.float64)
        self.gt = np.asarray(self.gt, dtype=np.float64)
        if self.pred.shape != self.gt.shape or self.pred.ndim != 2:
            raise ValueError("pred and gt must be (N, m) arrays of one shape")
        if (self.pred < 0).any() or (self.gt < 0).any():
            raise ValueError("counts must be non-negative")

    @property
    def tps_pred(self):
        return tps_array(self.pred[:, 1], self.pred[:, 0])

    @property
    def tps_gt(self):
        return tps_array(self.gt[:, 1], self.gt[:, 0])


def count_report(record: EvalRecord, norm_floor: float = 1e-8) -> dict:
    """Flat report with keys NM/NR/PM/PR/TM/WM; TM is the TPS MAE as a fraction."""
    if record.pred.shape[1] != 2:
        raise ValueError("the report expects exactly two categories (negative, positive)")
    neg_p, pos_p = record.pred[:, 0], record.pred[:, 1]
    neg_g, pos_g = record.gt[:, 0], record.gt[:, 1]
    tp, _ = record.tps_pred
    tg, _ = record.tps_gt
    per_mse = [mse(neg_p, neg_g), mse(pos_p, pos_g)]
    return {
        "NM": mae(neg_p, neg_g),
        "NR": rmse(neg_p, neg_g),
        "PM": mae(pos_p, pos_g),
        "PR": rmse(pos_p, pos_g),
        "TM": mae(tp, tg),
        "WM": wmse(per_mse, record.gt.sum(axis=0), norm_floor),
    }

"""Segmentation and distribution metrics: DSC, AUC, ACC, AHD, intensity
histograms and histogram distances."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata

__all__ = [
    "SegmentationScores",
    "UndefinedMetricError",
    "dsc",
    "auc",
    "acc",
    "ahd",
    "histogram",
    "hist_distance",
    "score_pair",
    "HIST_BINS",
]

HIST_BINS = 256


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value for the given inputs."""


@dataclass
class SegmentationScores:
    dsc: float
    auc: float
    acc: float
    ahd: float


def _binary(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all((x == 0) | (x == 1)):
        raise ValueError(f"{name} must be binary")
    return x


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice similarity 2|P∩G| / (|P|+|G|); both masks empty scores 1.0."""
    pred = _binary(pred, "pred")
    gt = _binary(gt, "gt")
    _same_shape(pred, gt, "dsc")
    p = pred.sum()
    g = gt.sum()
    if p + g == 0:
        return 1.0
    return float(2.0 * (pred * gt).sum() / (p + g))


def auc(scores: np.ndarray, gt: np.ndarray) -> float:
    """Rank-based AUC: fraction of (pos, neg) pairs ordered correctly, ties 0.5."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    gt = _binary(gt, "gt").ravel()
    _same_shape(scores, gt, "auc")
    n_pos = int(gt.sum())
    n_neg = gt.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc undefined: ground truth has a single class")
    ranks = rankdata(scores)
    pos_rank_sum = ranks[gt == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def acc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Fraction of matching pixels."""
    pred = _binary(pred, "pred")
    gt = _binary(gt, "gt")
    _same_shape(pred, gt, "acc")
    return float((pred == gt).mean())


def ahd(pred: np.ndarray, gt: np.ndarray) -> float:
    """Average Hausdorff distance between foreground pixel sets.

    Both sets empty scores 0; exactly one empty scores the image diagonal
    (a documented finite sentinel).
    """
    pred = _binary(pred, "pred")
    gt = _binary(gt, "gt")
    _same_shape(pred, gt, "ahd")
    p_pts = np.argwhere(pred == 1)
    g_pts = np.argwhere(gt == 1)
    if len(p_pts) == 0 and len(g_pts) == 0:
        return 0.0
    if len(p_pts) == 0 or len(g_pts) == 0:
        return float(math.hypot(*pred.shape))
    d_pg = cKDTree(g_pts).query(p_pts)[0]
    d_gp = cKDTree(p_pts).query(g_pts)[0]
    return float(0.5 * (d_pg.mean() + d_gp.mean()))


def histogram(image: np.ndarray) -> np.ndarray:
    """256-bin normalized intensity histogram over [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise ValueError("histogram of an empty image is undefined")
    if image.min() < 0 or image.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    counts, _ = np.histogram(image, bins=HIST_BINS, range=(0.0, 1.0))
    return counts.astype(np.float64) / image.size


def hist_distance(h1: np.ndarray, h2: np.ndarray):
    """(euclidean, cosine) distance between two normalized histograms."""
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    _same_shape(h1, h2, "hist_distance")
    euclidean = float(np.linalg.norm(h1 - h2))
    cosine = float(1.0 - (h1 @ h2) / (np.linalg.norm(h1) * np.linalg.norm(h2)))
    return euclidean, cosine


def score_pair(probs: np.ndarray, gt: np.ndarray,
               threshold: float = 0.5) -> SegmentationScores:
    """All four metrics for one probability map against a binary ground truth."""
    pred = (np.asarray(probs) >= threshold).astype(np.float64)
    return SegmentationScores(
        dsc=dsc(pred, gt),
        auc=auc(probs, gt),
        acc=acc(pred, gt),
        ahd=ahd(pred, gt),
    )

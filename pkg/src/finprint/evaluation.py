"""Verification metrics over embedding distances.

A pair is predicted "same identity" when its L2 distance is <= the
threshold.  With unit-norm embeddings every distance lies in [0, 2].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import ContractError

COARSE_THRESHOLDS = tuple(i / 5 for i in range(11))  # 0.0, 0.2, ..., 2.0


@dataclass(frozen=True, eq=False)
class PairScores:
    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "positives", np.asarray(self.positives, dtype=np.float64).ravel())
        object.__setattr__(self, "negatives", np.asarray(self.negatives, dtype=np.float64).ravel())

    @property
    def n_pos(self) -> int:
        return int(self.positives.size)

    @property
    def n_neg(self) -> int:
        return int(self.negatives.size)

    def require_both(self) -> None:
        if self.n_pos == 0 or self.n_neg == 0:
            raise ContractError("need at least one positive and one negative pair")


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    tpr: float
    fpr: float


@dataclass
class RocReport:
    points: list
    auc: float
    tpr_at_fpr: dict
    intra_mean: float
    inter_mean: float
    ratio: float
    n_pos: int = 0
    n_neg: int = 0
    extra: dict = field(default_factory=dict)

    def to_json_dict(self, target: Optional[float] = None) -> dict:
        if target is None:
            target = next(iter(self.tpr_at_fpr))
        return {
            "auc": self.auc,
            "tpr_at_fpr": self.tpr_at_fpr[target],
            "fpr_target": target,
            "intra_mean": self.intra_mean,
            "inter_mean": self.inter_mean,
            "ratio": "inf" if math.isinf(self.ratio) else self.ratio,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
        }


def distance_matrix(emb: np.ndarray, block: int = 64) -> np.ndarray:
    """Full pairwise L2 distances, computed row block by row block from differences."""
    emb = np.asarray(emb, dtype=np.float64)
    n = len(emb)
    out = np.empty((n, n))
    for i in range(0, n, block):
        diff = emb[i:i + block, None, :] - emb[None, :, :]
        out[i:i + block] = np.sqrt(np.sum(diff * diff, axis=-1))
    return out


def pair_distances(emb, labels) -> PairScores:
    """All unordered same-identity pairs as positives, cross-identity pairs as negatives."""
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels)
    if len(emb) != len(labels):
        raise ContractError("one label per embedding required")
    if len(np.unique(labels)) < 2:
        raise ContractError("need at least two identities to form negative pairs")
    d = distance_matrix(emb)
    iu, ju = np.triu_indices(len(emb), k=1)
    same = labels[iu] == labels[ju]
    return PairScores(d[iu, ju][same], d[iu, ju][~same])


def _counts_at(sorted_vals: np.ndarray, thresholds) -> np.ndarray:
    return np.searchsorted(sorted_vals, np.asarray(thresholds, dtype=np.float64), side="right")


def roc_sweep(s: PairScores, thresholds: Sequence[float] = COARSE_THRESHOLDS) -> list:
    s.require_both()
    thr = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(thr) < 0):
        raise ContractError("thresholds must be sorted ascending")
    tp = _counts_at(np.sort(s.positives), thr)
    fp = _counts_at(np.sort(s.negatives), thr)
    return [RocPoint(float(t), a / s.n_pos, b / s.n_neg) for t, a, b in zip(thr, tp, fp)]


def auc(s: PairScores) -> float:
    """Mann-Whitney AUC: P(d_pos < d_neg) + P(d_pos == d_neg) / 2."""
    s.require_both()
    neg = np.sort(s.negatives)
    right = np.searchsorted(neg, s.positives, side="right")
    left = np.searchsorted(neg, s.positives, side="left")
    greater = neg.size - right
    ties = right - left
    twice = int(np.sum(2 * greater + ties, dtype=np.int64))
    return twice / (2.0 * s.n_pos * s.n_neg)


def trapezoid_auc(points: Iterable[RocPoint]) -> float:
    """Area under a ROC given as points sorted by threshold, anchored at (0, 0)."""
    fpr = [0.0] + [p.fpr for p in points]
    tpr = [0.0] + [p.tpr for p in points]
    area = 0.0
    for i in range(1, len(fpr)):
        area += (fpr[i] - fpr[i - 1]) * (tpr[i] + tpr[i - 1]) / 2.0
    return area


def full_roc(s: PairScores) -> list:
    """ROC at every distinct observed distance."""
    return roc_sweep(s, np.unique(np.concatenate([s.positives, s.negatives])))


def tpr_at_fpr(s: PairScores, target_fpr: float = 0.01) -> float:
    """TPR at the largest negative distance whose FPR stays <= target (no interpolation).

    If even the smallest negative distance exceeds the target FPR, the
    threshold sits just below it and only strictly closer positives count.
    """
    if not 0.0 < target_fpr < 1.0:
        raise ContractError("target_fpr must lie in (0, 1)")
    s.require_both()
    neg = np.sort(s.negatives)
    pos = np.sort(s.positives)
    cand = np.unique(neg)
    fpr = _counts_at(neg, cand) / s.n_neg
    ok = np.flatnonzero(fpr <= target_fpr)
    if ok.size:
        tau = cand[ok[-1]]
        return int(_counts_at(pos, [tau])[0]) / s.n_pos
    below = int(np.searchsorted(pos, neg[0], side="left"))
    return below / s.n_pos


@dataclass
class DistanceReport:
    intra_mean: float
    inter_mean: float
    ratio: float
    matrix: np.ndarray


def distance_report(emb, labels) -> DistanceReport:
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels)
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) < 2 or counts.max() < 2:
        raise ContractError("need >= 2 identities and >= 2 images of some identity")
    mat = distance_matrix(emb)
    iu, ju = np.triu_indices(len(emb), k=1)
    same = labels[iu] == labels[ju]
    d = mat[iu, ju]
    intra = float(np.mean(d[same]))
    inter = float(np.mean(d[~same]))
    ratio = math.inf if intra == 0.0 else inter / intra
    return DistanceReport(intra, inter, ratio, mat)


def project_2d(emb) -> np.ndarray:
    """PCA projection onto the top two principal axes (N x 2).

    Each axis is signed so its largest-magnitude loading is positive.
    Axes with no variance give zero coordinates.
    """
    x = np.asarray(emb, dtype=np.float64)
    if x.ndim != 2 or len(x) < 3:
        raise ContractError("project_2d needs at least three points")
    centred = x - x.mean(axis=0)
    _, sv, vt = np.linalg.svd(centred, full_matrices=False)
    out = np.zeros((len(x), 2))
    tol = max(x.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
    for k in range(min(2, len(sv))):
        if sv[k] <= tol:
            continue
        axis = vt[k]
        if axis[np.argmax(np.abs(axis))] < 0:
            axis = -axis
        out[:, k] = centred @ axis
    return out


def evaluate(emb, labels, fpr_targets: Sequence[float] = (0.01,),
             thresholds: Sequence[float] = COARSE_THRESHOLDS) -> RocReport:
    scores = pair_distances(emb, labels)
    intra = float(np.mean(scores.positives)) if scores.n_pos else 0.0
    inter = float(np.mean(scores.negatives))
    return RocReport(
        points=roc_sweep(scores, thresholds),
        auc=auc(scores),
        tpr_at_fpr={float(t): tpr_at_fpr(scores, t) for t in fpr_targets},
        intra_mean=intra,
        inter_mean=inter,
        ratio=math.inf if intra == 0.0 else inter / intra,
        n_pos=scores.n_pos,
        n_neg=scores.n_neg,
    )

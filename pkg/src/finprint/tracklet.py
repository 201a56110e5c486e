"""Group per-frame detections into individuals with a box distance and DBSCAN."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .core import ContractError, FinprintError, FrameBox

NOISE = -1


@dataclass(frozen=True)
class TrackletParams:
    eps: float = 0.4
    min_pts: int = 3
    temporal_weight: float = 1.0 / 30.0
    max_distance: float = 1e9

    def __post_init__(self):
        if not self.eps > 0:
            raise ContractError("eps must be > 0")
        if int(self.min_pts) != self.min_pts or self.min_pts < 1:
            raise ContractError("min_pts must be an integer >= 1")
        if not self.temporal_weight >= 0:
            raise ContractError("temporal_weight must be >= 0")
        if not self.eps < self.max_distance:
            raise ContractError("eps must be smaller than max_distance")


@dataclass(frozen=True)
class ClusterSpan:
    cluster: int
    first_frame: int
    last_frame: int
    n_boxes: int


@dataclass(frozen=True)
class ClusterAssignment:
    """Cluster label per box, in the order the boxes were given."""

    box_ids: tuple
    clusters: tuple
    spans: tuple = ()
    frames: tuple = ()

    def __post_init__(self):
        if len(self.box_ids) != len(self.clusters):
            raise ContractError("box_ids and clusters differ in length")
        if self.frames and len(self.frames) != len(self.box_ids):
            raise ContractError("frames and box_ids differ in length")
        if len(set(self.box_ids)) != len(self.box_ids):
            raise ContractError("duplicate box_id in assignment")

    def as_dict(self) -> dict:
        return dict(zip(self.box_ids, self.clusters))

    @property
    def n_clusters(self) -> int:
        return len({c for c in self.clusters if c != NOISE})

    def members(self, cluster: int) -> list:
        return [b for b, c in zip(self.box_ids, self.clusters) if c == cluster]


def iou(b1: FrameBox, b2: FrameBox) -> float:
    """Intersection over union of two axis-aligned boxes, clamped to 1 against round-off."""
    ix = max(0.0, min(b1.x + b1.w, b2.x + b2.w) - max(b1.x, b2.x))
    iy = max(0.0, min(b1.y + b1.h, b2.y + b2.h) - max(b1.y, b2.y))
    inter = ix * iy
    return min(1.0, inter / ((b1.w * b1.h + b2.w * b2.h) - inter))


def box_distance(b1: FrameBox, b2: FrameBox, p: TrackletParams = TrackletParams()) -> float:
    """Clustering distance between two detections.

    Boxes in the same frame can never be the same individual and get
    ``p.max_distance``.  Otherwise the overlap term ``1 - IOU`` and a
    temporal term ``min(1, temporal_weight * frame_gap)`` are averaged, so
    the result lies in [0, 1].
    """
    gap = abs(b1.frame - b2.frame)
    if gap == 0:
        return p.max_distance
    temporal = min(1.0, p.temporal_weight * float(gap))
    return ((1.0 - iou(b1, b2)) + temporal) / 2.0


def _relabel_in_order(order: np.ndarray, labels: np.ndarray) -> np.ndarray:
    out = np.empty_like(labels)
    out[order] = labels
    return out


def dbscan(points: Sequence[int], dist: Callable[[int, int], float], p: TrackletParams) -> ClusterAssignment:
    """DBSCAN over ``points`` (box ids) using a pairwise distance callable.

    Points are visited in ascending id order, which fixes both the cluster
    numbering and the cluster a shared border point joins.
    """
    ids = list(points)
    if len(set(ids)) != len(ids):
        raise ContractError("duplicate point id")
    order = np.argsort(np.asarray(ids, dtype=np.int64), kind="stable")
    ordered = [ids[i] for i in order]
    n = len(ordered)
    mat = np.empty((n, n))
    for i in range(n):
        mat[i, i] = 0.0
        for j in range(i + 1, n):
            mat[i, j] = mat[j, i] = dist(ordered[i], ordered[j])
    labels = kernels.dbscan_labels(mat, float(p.eps), int(p.min_pts))
    labels = _relabel_in_order(order, labels)
    return ClusterAssignment(tuple(ids), tuple(int(c) for c in labels))


def distance_matrix(boxes: Sequence[FrameBox], p: TrackletParams) -> np.ndarray:
    cols = np.array([[b.x, b.y, b.w, b.h] for b in boxes], dtype=np.float64).reshape(-1, 4)
    frames = np.array([b.frame for b in boxes], dtype=np.int64)
    return kernels.box_distance_matrix(
        frames, cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3],
        float(p.temporal_weight), float(p.max_distance),
    )


def _spans(frames: Iterable[int], labels: Iterable[int]) -> tuple:
    acc: dict[int, list] = {}
    for f, c in zip(frames, labels):
        if c == NOISE:
            continue
        s = acc.setdefault(c, [f, f, 0])
        s[0] = min(s[0], f)
        s[1] = max(s[1], f)
        s[2] += 1
    return tuple(ClusterSpan(c, *acc[c]) for c in sorted(acc))


def cluster_boxes(boxes: Sequence[FrameBox], p: TrackletParams = TrackletParams()) -> ClusterAssignment:
    if not boxes:
        raise ContractError("cluster_boxes needs at least one box")
    ids = np.array([b.box_id for b in boxes], dtype=np.int64)
    if len(np.unique(ids)) != len(ids):
        raise ContractError("duplicate box_id")
    order = np.argsort(ids, kind="stable")
    ordered = [boxes[i] for i in order]
    labels = kernels.dbscan_labels(distance_matrix(ordered, p), float(p.eps), int(p.min_pts))
    labels = [int(c) for c in _relabel_in_order(order, labels)]
    frames = tuple(int(b.frame) for b in boxes)
    return ClusterAssignment(
        tuple(int(b.box_id) for b in boxes), tuple(labels), _spans(frames, labels), frames
    )


def apply_relabels(a: ClusterAssignment, fixes: Mapping[int, int] | Iterable[tuple]) -> ClusterAssignment:
    """Apply manual ``cluster -> identity`` corrections, then renumber densely.

    Clusters mapped to the same target merge.  Unmapped clusters keep their
    label as the target, so mapping cluster 2 onto 1 folds it into cluster 1.
    Targets are then renumbered 0..k-1 in ascending order.  Noise stays noise
    unless ``-1`` itself is mapped.
    """
    fixes = dict(fixes.items() if isinstance(fixes, Mapping) else fixes)
    if not fixes:
        return a
    present = set(a.clusters)
    unknown = sorted(c for c in fixes if c not in present)
    if unknown:
        raise FinprintError(f"unknown cluster id(s) in relabel: {unknown}")
    for target in fixes.values():
        if int(target) < NOISE:
            raise ContractError(f"invalid relabel target {target}")
    raw = [int(fixes.get(c, c)) for c in a.clusters]
    dense = {t: i for i, t in enumerate(sorted({t for t in raw if t != NOISE}))}
    clusters = tuple(NOISE if t == NOISE else dense[t] for t in raw)
    spans = _spans(a.frames, clusters) if a.frames else ()
    return ClusterAssignment(a.box_ids, clusters, spans, a.frames)


def write_clusters_csv(path, a: ClusterAssignment) -> None:
    with open(path, "w") as fh:
        fh.write("box_id,cluster\n")
        for b, c in zip(a.box_ids, a.clusters):
            fh.write(f"{b},{c}\n")

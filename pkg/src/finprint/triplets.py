"""Triplet loss, in-batch violating-triplet mining and the training loop."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import model
from .core import ContractError, FinprintError, NumericError, RngState, Triplet, as_rng

METRICS = ("l2", "sq-l2")


@dataclass(frozen=True)
class TripletLossParams:
    alpha: float = 0.2

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ContractError("alpha must be >= 0")


@dataclass(frozen=True)
class BatchPlan:
    identities_per_batch: int = 16
    images_per_identity: int = 8

    def __post_init__(self):
        if self.identities_per_batch < 2 or self.images_per_identity < 2:
            raise ContractError("a batch needs >= 2 identities and >= 2 images per identity")

    @property
    def size(self) -> int:
        return self.identities_per_batch * self.images_per_identity


@dataclass(frozen=True)
class MiningReport:
    epoch: int
    candidate_triplet_count: int
    used_triplet_count: int
    mean_loss: float

    def to_json(self) -> str:
        return json.dumps({
            "epoch": self.epoch,
            "candidates": self.candidate_triplet_count,
            "used": self.used_triplet_count,
            "mean_loss": self.mean_loss,
        })


def _alpha(params) -> float:
    return params.alpha if isinstance(params, TripletLossParams) else float(params)


def _vectors(a, p, n):
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (a, p, n))
    if not (a.shape == p.shape == n.shape):
        raise ContractError(f"triplet vectors differ in shape: {a.shape}, {p.shape}, {n.shape}")
    return a, p, n


def triplet_loss(a, p, n, params=TripletLossParams()) -> float:
    """``max(0, |a-p|^2 - |a-n|^2 + alpha)`` for one triplet of embeddings."""
    a, p, n = _vectors(a, p, n)
    dp, dn = a - p, a - n
    return max(0.0, float(dp @ dp) - float(dn @ dn) + _alpha(params))


def triplet_loss_grad(a, p, n, params=TripletLossParams()):
    """Gradients of ``triplet_loss`` w.r.t. anchor, positive and negative."""
    a, p, n = _vectors(a, p, n)
    if triplet_loss(a, p, n, params) <= 0.0:
        z = np.zeros_like(a)
        return z, z.copy(), z.copy()
    return 2.0 * (n - p), -2.0 * (a - p), 2.0 * (a - n)


def batch_loss(emb: np.ndarray, triplets: Sequence[tuple], params=TripletLossParams()):
    """Summed triplet loss over index triplets into ``emb`` and its gradient w.r.t. ``emb``."""
    grad = np.zeros_like(emb)
    if len(triplets) == 0:
        return 0.0, grad
    idx = np.asarray([(t.anchor, t.positive, t.negative) if isinstance(t, Triplet) else t
                      for t in triplets], dtype=np.intp)
    a, p, n = emb[idx[:, 0]], emb[idx[:, 1]], emb[idx[:, 2]]
    dp, dn = a - p, a - n
    hinge = np.sum(dp * dp, axis=1) - np.sum(dn * dn, axis=1) + _alpha(params)
    active = hinge > 0
    loss = float(np.sum(hinge[active]))
    act = active[:, None]
    np.add.at(grad, idx[:, 0], np.where(act, 2.0 * (n - p), 0.0))
    np.add.at(grad, idx[:, 1], np.where(act, -2.0 * dp, 0.0))
    np.add.at(grad, idx[:, 2], np.where(act, 2.0 * dn, 0.0))
    return loss, grad


def pairwise_distances(emb: np.ndarray, metric: str = "l2") -> np.ndarray:
    if metric not in METRICS:
        raise ContractError(f"unknown mining metric {metric!r}")
    diff = emb[:, None, :] - emb[None, :, :]
    sq = np.sum(diff * diff, axis=-1)
    return np.sqrt(sq) if metric == "l2" else sq


def _anchor_generator(base: int, anchor: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([base & 0xFFFFFFFF, base >> 32, anchor])))


def mine(emb, labels, params=TripletLossParams(), rng=None, metric: str = "l2"):
    """Violating-triplet selection within one batch.

    For every identity, every anchor and every other image of that identity
    as positive, the negatives with ``d(a, n) - d(a, p) < alpha`` are
    collected and one is picked uniformly at random.  Each anchor draws from
    its own RNG stream, so the choice does not depend on evaluation order.
    The triplet list is shuffled at the end.

    Returns ``(triplets, n_candidate_pairs)`` with triplets as index tuples.
    """
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels)
    if emb.ndim != 2 or len(emb) != len(labels):
        raise ContractError("embeddings must be (N, D) with one label each")
    ids = np.unique(labels)
    if len(ids) < 2:
        raise ContractError("triplet mining needs at least two identities in the batch")
    alpha = _alpha(params)
    gen = as_rng(rng if rng is not None else RngState(0, ("miner",)))
    base = int(gen.integers(0, 2**63))
    dist = pairwise_distances(emb, metric)
    triplets = []
    candidates = 0
    for ident in ids:
        members = np.flatnonzero(labels == ident)
        if len(members) < 2:
            continue
        others = np.flatnonzero(labels != ident)
        for a in members:
            neg_d = dist[a, others]
            anchor_gen = None
            for p in members:
                if p == a:
                    continue
                candidates += 1
                hits = others[neg_d - dist[a, p] < alpha]
                if len(hits) == 0:
                    continue
                if anchor_gen is None:
                    anchor_gen = _anchor_generator(base, int(a))
                triplets.append((int(a), int(p), int(hits[anchor_gen.integers(len(hits))])))
    order = gen.permutation(len(triplets))
    return [triplets[i] for i in order], candidates


def select_triplets(emb, labels, params=TripletLossParams(), rng=None, metric: str = "l2",
                    sample_ids: Optional[Sequence[int]] = None) -> list:
    """``mine`` returning ``Triplet`` records (sample ids when given, else row indices)."""
    found, _ = mine(emb, labels, params, rng, metric)
    if sample_ids is None:
        return [Triplet(a, p, n) for a, p, n in found]
    sid = list(sample_ids)
    return [Triplet(sid[a], sid[p], sid[n]) for a, p, n in found]


# -- training --------------------------------------------------------------

class TrainingAborted(FinprintError):
    def __init__(self, message, weights, reports, checkpoint=None):
        super().__init__(message)
        self.weights = weights
        self.reports = reports
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    weights: model.Weights
    reports: list
    optimizer: model.OptimizerState
    checkpoints: list = field(default_factory=list)


def sample_batch(labels: np.ndarray, plan: BatchPlan, gen: np.random.Generator) -> np.ndarray:
    """Row indices for one batch: P identities x up to K images each."""
    ids, counts = np.unique(labels, return_counts=True)
    eligible = ids[counts >= 2]
    if len(eligible) < 2:
        raise ContractError("training needs at least two identities with two or more images")
    take = min(plan.identities_per_batch, len(eligible))
    chosen = np.sort(gen.choice(eligible, size=take, replace=False))
    rows = []
    for ident in chosen:
        members = np.flatnonzero(labels == ident)
        k = min(plan.images_per_identity, len(members))
        rows.append(np.sort(gen.choice(members, size=k, replace=False)))
    return np.concatenate(rows)


def batches_per_epoch(n_train: int, plan: BatchPlan) -> int:
    return math.ceil(n_train / plan.size)


def train(samples, config: model.EncoderConfig, plan: BatchPlan = BatchPlan(),
          loss_params: TripletLossParams = TripletLossParams(), epochs: int = 10,
          rng: RngState = RngState(0), optimizer: Optional[model.OptimizerState] = None,
          metric: str = "l2", weights: Optional[model.Weights] = None,
          ckpt_path=None, ckpt_every: int = 0,
          on_epoch: Optional[Callable[[MiningReport], None]] = None) -> TrainResult:
    """Train the encoder with in-batch mined triplets.

    Each epoch runs ``ceil(n_train / (P*K))`` batches.  The summed loss of
    the mined triplets is back-propagated with its gradient divided by the
    number of triplets; a batch with no violating triplet leaves the weights
    untouched.  Weight init, batch sampling and negative choice use separate
    sub-streams of ``rng``.
    """
    if metric not in METRICS:
        raise ContractError(f"unknown mining metric {metric!r}")
    if epochs < 0:
        raise ContractError("epochs must be >= 0")
    train_samples = [s for s in samples if str(getattr(s.split, "value", s.split)) == "train"]
    if not train_samples:
        raise ContractError("training split is empty")
    if plan.size > len(train_samples):
        raise ContractError(f"batch of {plan.size} exceeds the {len(train_samples)} training samples")
    x = model.as_batch(train_samples, config)
    labels = np.array([s.identity for s in train_samples])
    w = weights if weights is not None else model.init(config, rng)
    opt = optimizer if optimizer is not None else model.adam()
    reports: list[MiningReport] = []
    saved: list = []
    n_batches = batches_per_epoch(len(train_samples), plan)
    for epoch in range(epochs):
        batch_gen = as_rng(rng.child("batch", epoch))
        candidates = used = 0
        total = 0.0
        for b in range(n_batches):
            rows = sample_batch(labels, plan, batch_gen)
            try:
                emb, cache = model.forward(w, x[rows])
                found, n_cand = mine(emb, labels[rows], loss_params, rng.child("miner", epoch, b), metric)
                candidates += n_cand
                if not found:
                    continue
                loss, g = batch_loss(emb, found, loss_params)
                used += len(found)
                total += loss
                grads = model.backward(w, cache, g / len(found))
                w, opt = model.apply_update(w, grads, opt)
            except NumericError as exc:
                raise TrainingAborted(
                    f"epoch {epoch} batch {b}: {exc}", w, reports, saved[-1] if saved else None
                ) from exc
        rep = MiningReport(epoch, candidates, used, total / used if used else 0.0)
        reports.append(rep)
        if on_epoch is not None:
            on_epoch(rep)
        last = epoch == epochs - 1
        if ckpt_path is not None and (last or (ckpt_every and (epoch + 1) % ckpt_every == 0)):
            model.save_checkpoint(w, opt, ckpt_path, extra={"epoch": epoch + 1})
            saved.append(str(ckpt_path))
    if ckpt_path is not None and epochs == 0:
        model.save_checkpoint(w, opt, ckpt_path, extra={"epoch": 0})
        saved.append(str(ckpt_path))
    return TrainResult(w, reports, opt, saved)


def report_dicts(reports: Sequence[MiningReport]) -> list:
    return [asdict(r) for r in reports]

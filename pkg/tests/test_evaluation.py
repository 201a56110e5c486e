import math

import numpy as np
import pytest

from finprint.core import ContractError
from finprint.evaluation import (
    COARSE_THRESHOLDS,
    PairScores,
    auc,
    distance_report,
    evaluate,
    full_roc,
    pair_distances,
    project_2d,
    roc_sweep,
    tpr_at_fpr,
    trapezoid_auc,
)

import oracles


def test_coarse_thresholds():
    assert len(COARSE_THRESHOLDS) == 11
    assert COARSE_THRESHOLDS[0] == 0.0 and COARSE_THRESHOLDS[-1] == 2.0
    assert COARSE_THRESHOLDS[3] == 0.6


def test_pair_counts():
    s = pair_distances(np.eye(4), [0, 0, 1, 1])
    assert s.n_pos == 2 and s.n_neg == 4
    z = pair_distances(np.zeros((4, 3)), [0, 0, 1, 1])
    assert not z.positives.any() and not z.negatives.any()


def test_single_identity_rejected():
    with pytest.raises(ContractError):
        pair_distances(np.eye(3), [1, 1, 1])


def test_roc_examples():
    s = PairScores([0.3], [1.5])
    pts = roc_sweep(s, [0.0, 1.0, 2.0])
    assert [(p.tpr, p.fpr) for p in pts] == [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)]


def test_roc_requires_both_and_sorted():
    with pytest.raises(ContractError):
        roc_sweep(PairScores([], [1.0]))
    with pytest.raises(ContractError):
        roc_sweep(PairScores([0.1], [1.0]), [1.0, 0.5])


def test_auc_examples():
    assert auc(PairScores([0.1, 0.2], [0.5, 0.9])) == 1.0
    assert auc(PairScores([0.3, 0.7, 0.7], [0.7, 0.3, 0.7])) == 0.5
    assert auc(PairScores([0.1, 0.4], [0.3, 0.9])) == 0.75


def test_tpr_at_fpr_examples():
    assert tpr_at_fpr(PairScores([0.1, 0.2], [0.5, 0.9]), 0.01) == 1.0
    neg = [0.5, 0.6, 0.7, 0.8] * 25
    assert tpr_at_fpr(PairScores([0.1, 0.2, 0.9], neg), 0.01) == pytest.approx(2 / 3)


def test_tpr_at_fpr_picks_largest_admissible_threshold():
    neg = np.arange(1, 201) / 100.0          # 200 distinct negatives
    pos = [0.005, 0.015, 0.025, 0.5]
    # FPR 0.01 admits the two smallest negatives (0.01, 0.02)
    assert tpr_at_fpr(PairScores(pos, neg), 0.01) == 0.5


@pytest.mark.parametrize("seed", range(20))
def test_rank_auc_equals_trapezoid_and_pair_count(seed):
    r = np.random.default_rng(seed)
    pos = np.round(r.uniform(0, 1.2, r.integers(1, 30)), 2)
    neg = np.round(r.uniform(0.4, 2.0, r.integers(1, 30)), 2)
    s = PairScores(pos, neg)
    a = auc(s)
    assert abs(a - oracles.auc_by_pairs(pos, neg)) < 1e-12
    assert abs(a - trapezoid_auc(full_roc(s))) < 1e-9
    assert abs(a - oracles.trapezoid_auc_all_thresholds(list(pos), list(neg))) < 1e-9


def test_auc_scale_invariant():
    r = np.random.default_rng(0)
    pos, neg = r.uniform(0, 1, 20), r.uniform(0.5, 2, 30)
    assert auc(PairScores(pos, neg)) == auc(PairScores(3.7 * pos, 3.7 * neg))


def test_tpr_consistent_with_sweep():
    r = np.random.default_rng(4)
    s = PairScores(r.uniform(0, 1, 50), r.uniform(0.3, 2, 300))
    t = tpr_at_fpr(s, 0.05)
    best = max(p.tpr for p in full_roc(s) if p.fpr <= 0.05)
    assert t == best


def test_distance_report_cases():
    with pytest.raises(ContractError):
        distance_report(np.eye(3), [0, 1, 2])
    same = distance_report(np.ones((4, 2)), [0, 0, 1, 1])
    assert same.intra_mean == 0.0 and same.inter_mean == 0.0 and math.isinf(same.ratio)
    orth = distance_report(np.array([[1.0, 0], [1, 0], [0, 1], [0, 1]]), [0, 0, 1, 1])
    assert orth.intra_mean == 0.0 and orth.inter_mean == pytest.approx(math.sqrt(2))


def test_distance_matrix_symmetric_zero_diagonal(rng):
    emb = rng.standard_normal((6, 4))
    rep = distance_report(emb, [0, 0, 1, 1, 2, 2])
    assert np.array_equal(rep.matrix, rep.matrix.T)
    assert not np.diag(rep.matrix).any()
    assert rep.ratio == pytest.approx(rep.inter_mean / rep.intra_mean)


def test_project_2d_preserves_planar_distances(rng):
    basis = np.linalg.qr(rng.standard_normal((6, 2)))[0]
    pts = rng.standard_normal((10, 2)) @ basis.T + rng.standard_normal(6)
    xy = project_2d(pts)
    d = lambda z: np.sqrt(((z[:, None] - z[None]) ** 2).sum(-1))
    np.testing.assert_allclose(d(xy), d(pts), atol=1e-9)


def test_project_2d_duplicates_and_degenerate(rng):
    pts = rng.standard_normal((5, 4))
    xy = project_2d(np.vstack([pts, pts]))
    np.testing.assert_array_equal(xy[:5], xy[5:])
    line = np.outer(np.arange(5.0), [1.0, 2.0, 0.0])
    out = project_2d(line)
    assert not out[:, 1].any()
    assert np.array_equal(project_2d(np.ones((4, 3))), np.zeros((4, 2)))


def test_project_2d_matches_eigh(rng):
    pts = rng.standard_normal((30, 5)) * [3, 2, 1, 0.5, 0.1]
    xy = project_2d(pts)
    c = pts - pts.mean(0)
    vals, vecs = np.linalg.eigh(c.T @ c)
    for k, col in enumerate((-1, -2)):
        np.testing.assert_allclose(np.abs(xy[:, k]), np.abs(c @ vecs[:, col]), atol=1e-9)


def test_evaluate_bundle():
    emb = np.array([[1.0, 0], [0.98, 0.2], [0, 1], [0.1, 0.99]])
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    rep = evaluate(emb, [0, 0, 1, 1], fpr_targets=(0.01, 0.1))
    assert rep.auc == 1.0 and rep.tpr_at_fpr == {0.01: 1.0, 0.1: 1.0}
    assert rep.n_pos == 2 and rep.n_neg == 4 and len(rep.points) == 11
    d = rep.to_json_dict(0.01)
    assert set(d) == {"auc", "tpr_at_fpr", "fpr_target", "intra_mean", "inter_mean", "ratio", "n_pos", "n_neg"}
    assert rep.ratio > 3.0

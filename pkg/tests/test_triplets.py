import numpy as np
import pytest

from finprint import model
from finprint.core import ContractError, RngState, Sample, Split, Triplet
from finprint.model import ConvBlock, EncoderConfig
from finprint.triplets import (
    BatchPlan,
    MiningReport,
    TripletLossParams,
    batch_loss,
    batches_per_epoch,
    mine,
    select_triplets,
    train,
    triplet_loss,
    triplet_loss_grad,
)

import oracles

P = TripletLossParams(0.2)


@pytest.mark.parametrize("a,p,n,want", [
    ((0.3, 0.4), (0.3, 0.4), (0.3, 0.4), 0.2),
    ((0.0, 0.0), (0.0, 0.0), (1.0, 0.0), 0.0),
    ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), 0.0),
    ((1.0, 0.0), (0.0, 1.0), (0.0, -1.0), 0.2),
])
def test_loss_examples(a, p, n, want):
    assert abs(triplet_loss(a, p, n, P) - want) <= 1e-9


def test_loss_shape_mismatch():
    with pytest.raises(ContractError):
        triplet_loss([1.0, 0.0], [1.0], [0.0, 1.0])


def test_default_margin():
    assert TripletLossParams().alpha == 0.2


def test_grad_inactive_hinge_is_zero():
    for g in triplet_loss_grad((1.0, 0.0), (1.0, 0.0), (-1.0, 0.0), P):
        assert not g.any()


def test_grad_a_equals_p():
    a = np.array([0.2, 0.1, -0.3])
    n = np.array([0.25, 0.0, -0.3])
    ga, gp, gn = triplet_loss_grad(a, a, n, P)
    np.testing.assert_array_equal(gp, 0.0)
    np.testing.assert_allclose(ga, 2 * (n - a))
    np.testing.assert_allclose(gn, 2 * (a - n))


@pytest.mark.parametrize("seed", range(5))
def test_grad_matches_finite_differences(seed):
    r = np.random.default_rng(seed)
    v = r.standard_normal((3, 6)) * 0.3
    f = lambda: triplet_loss(v[0], v[1], v[2], TripletLossParams(5.0))
    num = oracles.central_difference(f, v)
    got = np.stack(triplet_loss_grad(v[0], v[1], v[2], TripletLossParams(5.0)))
    assert oracles.max_relative_error(got, num, 1e-6) < 1e-5


def test_batch_loss_sums_and_accumulates(rng):
    emb = rng.standard_normal((5, 4)) * 0.2
    trips = [(0, 1, 2), (0, 1, 3), (4, 3, 2)]
    loss, g = batch_loss(emb, trips, P)
    assert loss == pytest.approx(sum(triplet_loss(emb[a], emb[p], emb[n], P) for a, p, n in trips), abs=1e-12)
    want = np.zeros_like(emb)
    for a, p, n in trips:
        ga, gp, gn = triplet_loss_grad(emb[a], emb[p], emb[n], P)
        want[a] += ga; want[p] += gp; want[n] += gn
    np.testing.assert_allclose(g, want, atol=1e-12)
    assert batch_loss(emb, [], P)[0] == 0.0


def test_mine_far_apart_is_empty():
    emb = np.array([[0, 0], [0.01, 0], [5, 5], [5.01, 5]], dtype=float)
    found, cand = mine(emb, [0, 0, 1, 1], P, RngState(0))
    assert found == [] and cand == 4


def test_mine_identical_points_every_pair():
    emb = np.zeros((7, 3))
    labels = [0, 0, 0, 1, 1, 1, 1]
    found, _ = mine(emb, labels, P, RngState(0))
    assert len(found) == 3 * 2 + 4 * 3
    assert {(a, p) for a, p, _ in found} == {(a, p) for a in range(7) for p in range(7)
                                             if a != p and labels[a] == labels[p]}


def test_mine_needs_two_identities():
    with pytest.raises(ContractError):
        mine(np.zeros((3, 2)), [1, 1, 1], P)


def test_singleton_identity_gives_no_anchor():
    emb = np.zeros((3, 2))
    found, _ = mine(emb, [0, 0, 1], P, RngState(0))
    assert {a for a, _, _ in found} == {0, 1}


@pytest.mark.parametrize("seed", range(10))
def test_mine_against_oracle(seed):
    r = np.random.default_rng(seed)
    labels = np.repeat(np.arange(4), 4)
    emb = r.standard_normal((16, 3))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    found, _ = mine(emb, labels, P, RngState(seed))
    viol = oracles.violating_triplets(emb, labels, 0.2)
    assert set(found) <= viol
    pairs = [(a, p) for a, p, _ in found]
    assert len(pairs) == len(set(pairs))
    assert set(pairs) == {(a, p) for a, p, _ in viol}


def test_mine_squared_metric_matches_oracle():
    r = np.random.default_rng(1)
    labels = np.repeat(np.arange(3), 3)
    emb = r.standard_normal((9, 4)) * 0.4
    found, _ = mine(emb, labels, P, RngState(1), metric="sq-l2")
    viol = oracles.violating_triplets(emb, labels, 0.2, squared=True)
    assert set(found) <= viol and {(a, p) for a, p, _ in found} == {(a, p) for a, p, _ in viol}


def test_mine_deterministic_and_seed_sensitive():
    r = np.random.default_rng(2)
    emb = r.standard_normal((12, 2)) * 0.1
    labels = np.repeat(np.arange(3), 4)
    a = mine(emb, labels, P, RngState(5))
    assert a == mine(emb, labels, P, RngState(5))
    assert a != mine(emb, labels, P, RngState(6))


def test_select_triplets_maps_sample_ids():
    emb = np.zeros((4, 2))
    out = select_triplets(emb, [0, 0, 1, 1], P, RngState(0), sample_ids=[10, 11, 12, 13])
    assert all(isinstance(t, Triplet) for t in out)
    assert {t.anchor for t in out} == {10, 11, 12, 13}


def test_batch_plan():
    assert BatchPlan().size == 128
    assert batches_per_epoch(6480, BatchPlan()) == 51
    with pytest.raises(ContractError):
        BatchPlan(1, 8)


def test_report_json():
    line = MiningReport(2, 100, 7, 0.125).to_json()
    assert line == '{"epoch": 2, "candidates": 100, "used": 7, "mean_loss": 0.125}'


CFG = EncoderConfig(input_shape=(8, 8, 1), conv_blocks=(ConvBlock(2),), embed_dim=4)


def _samples(n_ids=4, per=4, seed=0):
    r = np.random.default_rng(seed)
    out = []
    for i in range(n_ids):
        base = r.uniform(size=(8, 8, 1))
        for j in range(per):
            px = np.clip(base + r.normal(0, 0.05, base.shape), 0, 1)
            out.append(Sample(len(out), i, px, Split.TRAIN))
    return out


def test_train_zero_epochs_returns_init():
    res = train(_samples(), CFG, BatchPlan(2, 2), epochs=0, rng=RngState(3))
    assert res.weights.equals(model.init(CFG, RngState(3))) and res.reports == []


def test_train_deterministic():
    kw = dict(plan=BatchPlan(2, 3), epochs=2, rng=RngState(4))
    a = train(_samples(), CFG, **kw)
    b = train(_samples(), CFG, **kw)
    assert a.reports == b.reports and a.weights.equals(b.weights)
    assert len(a.reports) == 2 and a.reports[0].candidate_triplet_count == 3 * (2 * 3 * 2)


def test_satisfied_batch_means_no_update():
    """Well-separated identities under a zero margin: nothing mined, weights bit-identical."""
    cfg = EncoderConfig(input_shape=(1, 1, 2), conv_blocks=(), embed_dim=2)
    w = model.Weights(cfg, {"dense.w": np.eye(2), "dense.b": np.zeros(2)})
    s = [Sample(i, i // 3, np.array([[[1.0, 0.0]]]) if i < 3 else np.array([[[0.0, 1.0]]]), Split.TRAIN)
         for i in range(6)]
    res = train(s, cfg, BatchPlan(2, 3), TripletLossParams(0.0), epochs=2, rng=RngState(0), weights=w)
    assert res.weights.equals(w)
    assert all(r.used_triplet_count == 0 and r.mean_loss == 0.0 for r in res.reports)


def test_train_checkpoint_and_callback(tmp_path):
    seen = []
    path = tmp_path / "enc.ckpt"
    res = train(_samples(), CFG, BatchPlan(2, 2), epochs=3, rng=RngState(1), ckpt_path=path,
                ckpt_every=1, on_epoch=seen.append)
    assert seen == res.reports
    w, opt = model.load_checkpoint(path)
    assert w.equals(res.weights) and opt.t == res.optimizer.t
    assert model.read_checkpoint_extra(path) == {"epoch": 3}


def test_train_rejects_bad_setup():
    with pytest.raises(ContractError):
        train(_samples(2, 2), CFG, BatchPlan(4, 4), epochs=1)
    with pytest.raises(ContractError):
        train(_samples(), CFG, BatchPlan(2, 2), epochs=1, metric="cosine")

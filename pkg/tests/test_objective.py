from __future__ import annotations

import dataclasses

import numpy as np
import pytest

import oracles
from sfouda import autodiff as ad
from sfouda import objective, stream
from sfouda.geom import Frame, RigidTransform, relative_transform
from sfouda.segnet import SegModel, forward_heads
from sfouda.selection import PseudoLabelSet

from test_autodiff import central_difference, rel_err


def test_self_correspondences(rng):
    f = Frame(rng.uniform(-10, 10, (300, 3)))
    c = objective.find_correspondences(f, f, RigidTransform.identity(), 0.1)
    assert c.pairs() == {(i, i) for i in range(300)} and np.all(c.distance == 0)


def test_translated_copy_recovered_exactly(rng):
    # dyadic coordinates keep the round trip free of rounding
    f = Frame(np.unique(rng.integers(-40, 40, (300, 3)), axis=0)[:250] / 4.0)
    T = RigidTransform(np.eye(3), (5.0, 0.0, 0.0))
    moved = Frame(f.points - [5.0, 0.0, 0.0])
    c = objective.find_correspondences(f, moved, T, 0.3)
    assert c.pairs() == {(i, i) for i in range(250)} and np.all(c.distance == 0)


@pytest.fixture(scope="module")
def clean_stream():
    return stream.SyntheticStream(stream.source_config(0, frames=30, noise=0.0))


def test_generator_pairs_zero_noise(clean_stream):
    a, b = clean_stream.frame(20), clean_stream.frame(15)
    c = objective.find_correspondences(a, b, relative_transform(b.pose, a.pose), 0.3, w=5)
    exact = {p for p, d in zip(c.pairs_list(), c.distance) if d < 1e-9}
    assert exact == stream.true_correspondences(a, b)


def test_generator_pairs_with_noise(clean_stream):
    rng = np.random.default_rng(0)
    a, b = clean_stream.frame(20), clean_stream.frame(15)
    a = dataclasses.replace(a, points=a.points + rng.normal(0, 0.05, a.points.shape))
    c = objective.find_correspondences(a, b, relative_transform(b.pose, a.pose), 0.3, w=5)
    truth = stream.true_correspondences(a, b)
    assert len(c) > 0.5 * len(truth)
    assert len(c.pairs() & truth) / len(c) >= 0.99


def test_empty_frame_raises():
    with pytest.raises(objective.EmptyFrame):
        objective.find_correspondences(Frame(np.zeros((0, 3))), Frame(np.zeros((2, 3))),
                                       RigidTransform.identity())


def test_neg_cosine_values():
    x = np.array([[1.0, 2.0], [-3.0, 0.5]])
    assert objective.neg_cosine(x, x).item() == pytest.approx(-1.0, abs=1e-15)
    assert objective.neg_cosine([[1.0, 0.0]], [[0.0, 2.0]]).item() == 0.0
    assert objective.neg_cosine([[1.0, 0.0]], [[1.0, 1.0]]).item() == pytest.approx(-1 / np.sqrt(2), abs=1e-12)
    with pytest.raises(ad.ShapeMismatch):
        objective.neg_cosine(np.zeros((2, 3)), np.zeros((3, 3)))


def _corr(n):
    idx = np.arange(n)
    return objective.CorrespondenceSet(idx, idx, np.zeros(n), 0.3)


def test_temporal_loss_identical_frames(rng):
    z, q = rng.normal(size=(8, 5)), rng.normal(size=(8, 5))
    assert objective.temporal_loss(z, z, z, z, _corr(8)).item() == pytest.approx(-1.0, abs=1e-12)
    with pytest.raises(objective.EmptyCorrespondences):
        objective.temporal_loss(q, z, q, z, _corr(0))


def test_temporal_loss_is_symmetric(rng):
    q_t, z_t = rng.normal(size=(10, 4)), rng.normal(size=(10, 4))
    q_p, z_p = rng.normal(size=(7, 4)), rng.normal(size=(7, 4))
    c = objective.CorrespondenceSet(np.array([0, 3, 9]), np.array([6, 1, 2]), np.zeros(3), 0.3)
    swapped = objective.CorrespondenceSet(c.idx_tw, c.idx_t, c.distance, 0.3)
    a = objective.temporal_loss(q_t, z_t, q_p, z_p, c).item()
    b = objective.temporal_loss(q_p, z_p, q_t, z_t, swapped).item()
    assert a == b


def test_stop_gradient_through_z_branches(rng):
    m = SegModel(seed=0)
    feats_t, feats_p = rng.normal(size=(12, 96)), rng.normal(size=(12, 96))
    c = objective.CorrespondenceSet(np.arange(12), rng.permutation(12), np.zeros(12), 0.3)
    h = [p for blk in m.encoder_h for p in blk.params()]
    f = [p for blk in m.predictor_f for p in blk.params()]

    z_t, q_t = forward_heads(m, feats_t)
    z_p, q_p = forward_heads(m, feats_p)
    # z-only path: q replaced by constants, so anything reaching h must come through z
    loss_z = objective.temporal_loss(q_t.value, z_t, q_p.value, z_p, c)
    assert all(np.all(g == 0) for g in ad.grad(loss_z, h + f))
    loss = objective.temporal_loss(q_t, z_t, q_p, z_p, c)
    grads = ad.grad(loss, h)
    assert any(np.abs(g).max() > 0 for g in grads)

    W = m.encoder_h[0].W

    def value():
        zt, qt = forward_heads(m, feats_t)
        zp, qp = forward_heads(m, feats_p)
        return objective.temporal_loss(qt, zt, qp, zp, c).item()

    # finite differences see both branches; the detached oracle must hold z fixed
    z_t_fixed, z_p_fixed = z_t.value.copy(), z_p.value.copy()

    def value_q_only():
        _, qt = forward_heads(m, feats_t)
        _, qp = forward_heads(m, feats_p)
        return objective.temporal_loss(qt, z_t_fixed, qp, z_p_fixed, c).item()

    picks = [tuple(ix) for ix in np.argwhere(np.abs(grads[0]) > 1e-6)[:25]]
    sub = lambda g: np.array([g[i] for i in picks])  # noqa: E731
    fd = central_difference(value_q_only, W.value, entries=picks)
    assert rel_err(sub(grads[0]), sub(fd)) < 1e-4
    # without the detachment the full derivative would differ
    assert rel_err(sub(grads[0]), sub(central_difference(value, W.value, entries=picks))) > 1e-3


def test_dice_perfect_and_disjoint():
    n = 1000
    lab = np.repeat([1, 2], n // 2)
    good = np.where(np.eye(2)[lab - 1] > 0, 50.0, -50.0)
    pseudo = PseudoLabelSet.from_seeds(np.arange(n), lab)
    assert objective.soft_dice_loss(good, pseudo).item() < 1e-6
    bad = np.where(np.eye(2)[2 - lab] > 0, 50.0, -50.0)
    assert abs(objective.soft_dice_loss(bad, pseudo).item() - 1.0) < 1e-3
    with pytest.raises(objective.EmptyPseudoLabels):
        objective.soft_dice_loss(good, PseudoLabelSet.empty())


def test_dice_three_point_example():
    s = np.array([[0.8, 0.2], [0.6, 0.4], [0.3, 0.7]])
    logits = np.log(s)
    pseudo = PseudoLabelSet.from_seeds([0, 1, 2], [1, 1, 2])
    want = oracles.soft_dice(s, [0, 0, 1], 2)
    assert abs(objective.soft_dice_loss(logits, pseudo).item() - want) < 1e-9


def test_dice_only_sees_pseudo_labelled_rows(rng):
    logits = ad.parameter(rng.normal(size=(20, 4)))
    pseudo = PseudoLabelSet.from_seeds([2, 5, 11], [1, 3, 3])
    (g,) = ad.grad(objective.soft_dice_loss(logits, pseudo), [logits])
    untouched = np.setdiff1d(np.arange(20), [2, 5, 11])
    assert np.all(g[untouched] == 0)
    fd = central_difference(lambda: objective.soft_dice_loss(logits, pseudo).item(), logits.value)
    assert rel_err(g, fd) < 1e-5


def test_total_loss(rng):
    assert objective.total_loss(ad.Tensor(0.0), ad.Tensor(-1.0)).item() == -1.0
    assert objective.total_loss(ad.Tensor(1.0), ad.Tensor(0.0)).item() == 1.0
    x = ad.parameter(rng.normal(size=5))
    a = ad.tsum(ad.mul(x, x))
    b = ad.tsum(ad.exp(x))
    (ga,) = ad.grad(a, [x])
    (gb,) = ad.grad(b, [x])
    (gt,) = ad.grad(objective.total_loss(a, b), [x])
    assert np.array_equal(gt, ga + gb)

"""Adaptation losses: cross-frame point matching, temporal cosine loss, soft Dice."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geom import Frame, RigidTransform, build_knn_index
from .selection import PseudoLabelSet

DICE_EPS = 1.0


class EmptyFrame(ValueError):
    pass


class EmptyCorrespondences(ValueError):
    pass


class EmptyPseudoLabels(ValueError):
    pass


@dataclass
class CorrespondenceSet:
    """Pairs (i in frame t, j in frame t-w); ``distance`` is measured after mapping j into frame t."""

    idx_t: np.ndarray
    idx_tw: np.ndarray
    distance: np.ndarray
    tau: float
    w: int = 1

    def __len__(self):
        return len(self.idx_t)

    def pairs_list(self) -> list:
        return list(zip(self.idx_t.tolist(), self.idx_tw.tolist()))

    def pairs(self) -> set:
        return set(self.pairs_list())


def find_correspondences(f_t: Frame, f_tw: Frame, T: RigidTransform, tau: float = 0.3,
                         w: int = 1) -> CorrespondenceSet:
    """Map every point of frame t-w into frame t with ``T``; keep its nearest neighbor if closer than tau."""
    if len(f_t) == 0 or len(f_tw) == 0:
        raise EmptyFrame("both frames need points")
    moved = T.apply(f_tw.points)
    nn, dist = build_knn_index(f_t.points).query_batch(moved, 1)
    nn, dist = nn[:, 0], dist[:, 0]
    keep = dist < tau
    return CorrespondenceSet(nn[keep], np.flatnonzero(keep), dist[keep], tau, w)


def neg_cosine(q, z) -> ad.Tensor:
    """Mean over rows of -cos(q_i, z_i). Callers detach z beforehand."""
    q, z = ad.as_tensor(q), ad.as_tensor(z)
    if q.shape != z.shape:
        raise ad.ShapeMismatch(f"q {q.shape} vs z {z.shape}")
    prod = ad.mul(ad.l2_normalize_rows(q), ad.l2_normalize_rows(z))
    return -ad.mean(ad.tsum(prod, axis=1))


def temporal_loss(q_t, z_t, q_tw, z_tw, corr: CorrespondenceSet) -> ad.Tensor:
    """Symmetric loss: each frame's q predicts the other frame's detached z at matched points."""
    if len(corr) == 0:
        raise EmptyCorrespondences("no matched points between the two frames")
    a = neg_cosine(ad.gather_rows(q_t, corr.idx_t), ad.stop_gradient(ad.gather_rows(z_tw, corr.idx_tw)))
    b = neg_cosine(ad.gather_rows(q_tw, corr.idx_tw), ad.stop_gradient(ad.gather_rows(z_t, corr.idx_t)))
    return 0.5 * a + 0.5 * b


def soft_dice_loss(logits, pseudo: PseudoLabelSet, eps: float = DICE_EPS) -> ad.Tensor:
    """1 - mean soft Dice over the classes present among the pseudo-labels."""
    if len(pseudo) == 0:
        raise EmptyPseudoLabels("no pseudo-labelled points")
    s = ad.softmax_rows(ad.gather_rows(logits, pseudo.index))
    C = s.shape[1]
    y = np.zeros((len(pseudo), C))
    y[np.arange(len(pseudo)), pseudo.label - 1] = 1.0
    present = np.flatnonzero(y.sum(axis=0) > 0)
    inter = ad.tsum(ad.mul(s, y), axis=0)
    denom = ad.tsum(s, axis=0) + (y.sum(axis=0) + eps)
    dice = (2.0 * inter + eps) / denom
    return 1.0 - ad.mean(ad.gather_rows(dice, present))


def total_loss(dice, reg) -> ad.Tensor:
    return ad.add(dice, reg)

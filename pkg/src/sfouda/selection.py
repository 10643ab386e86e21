"""Reliable pseudo-label selection from a segmentation model's own predictions.

Three selectors share one per-class budget rule: a class with ``n_c``
predicted points contributes ``ceil(a/100 * n_c)`` seeds, ranked by a
reliability score with ties broken by the lower point index.

* uncertainty: lowest Monte-Carlo dropout uncertainty
* confidence: highest averaged max-softmax
* centroid: smallest feature-space distance to the predicted-class centroid
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad

DROPOUT_VARIANCE = "dropout-variance"
CLASS_VARIANCE = "class-variance"
UNCERTAINTY_MODES = (DROPOUT_VARIANCE, CLASS_VARIANCE)
N_MIN = 5


class DegenerateVariance(RuntimeWarning):
    pass


@dataclass
class PseudoLabelSet:
    """Pseudo-labelled points of one frame.

    ``seed`` holds the point index of the originating seed (a seed points at
    itself), ``rank`` is 0 for seeds and 1, 2, ... for the propagated points a
    seed won, in order of descriptor distance. ``distance`` is that descriptor
    distance (0 for seeds).
    """

    index: np.ndarray
    label: np.ndarray
    is_seed: np.ndarray
    seed: np.ndarray
    rank: np.ndarray
    distance: np.ndarray

    def __post_init__(self):
        self.index = np.asarray(self.index, dtype=np.int64)
        self.label = np.asarray(self.label, dtype=np.int64)
        self.is_seed = np.asarray(self.is_seed, dtype=bool)
        self.seed = np.asarray(self.seed, dtype=np.int64)
        self.rank = np.asarray(self.rank, dtype=np.int64)
        self.distance = np.asarray(self.distance, dtype=np.float64)
        n = len(self.index)
        for arr in (self.label, self.is_seed, self.seed, self.rank, self.distance):
            if arr.shape != (n,):
                raise ValueError("pseudo-label arrays must share one length")
        if len(np.unique(self.index)) != n:
            raise ValueError("pseudo-labelled point indices must be unique")
        if n and self.label.min() < 1:
            raise ValueError("pseudo-labels must be semantic classes (>= 1)")
        seeds = set(self.index[self.is_seed].tolist())
        if not all(int(s) in seeds for s in self.seed[~self.is_seed]):
            raise ValueError("propagated entry references a missing seed")

    def __len__(self):
        return len(self.index)

    @classmethod
    def empty(cls) -> "PseudoLabelSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z.astype(bool), z, z, z.astype(np.float64))

    @classmethod
    def from_seeds(cls, index, label) -> "PseudoLabelSet":
        index = np.asarray(index, dtype=np.int64)
        n = len(index)
        return cls(index, label, np.ones(n, dtype=bool), index.copy(),
                   np.zeros(n, dtype=np.int64), np.zeros(n))

    @property
    def seeds(self) -> "PseudoLabelSet":
        return self.subset(self.is_seed)

    @property
    def n_seeds(self) -> int:
        return int(self.is_seed.sum())

    @property
    def n_propagated(self) -> int:
        return int((~self.is_seed).sum())

    def subset(self, keep) -> "PseudoLabelSet":
        return PseudoLabelSet(self.index[keep], self.label[keep], self.is_seed[keep],
                              self.seed[keep], self.rank[keep], self.distance[keep])

    def dense(self, n: int) -> np.ndarray:
        """Length-n label vector with 0 for points without a pseudo-label."""
        out = np.zeros(n, dtype=np.int64)
        out[self.index] = self.label
        return out


# --------------------------------------------------------------------------
# Monte-Carlo dropout


def mc_mean_distribution(m, x, J: int, rng, p: Optional[float] = None):
    """Average of J dropout-perturbed softmax outputs, plus the J x N x C stack.

    The backbone runs once; only the dropout mask before the classifier is
    resampled, which is exact because dropout sits right before it.
    """
    if J < 1:
        raise ValueError("J must be positive")
    feats = m.backbone_forward(x)
    stack = np.stack([
        ad.softmax_rows(m.classify(feats, True, rng, p=p)).value for _ in range(J)
    ])
    return stack.mean(axis=0), stack


def uncertainty_index(stack, mode: str = DROPOUT_VARIANCE) -> np.ndarray:
    """Per-point uncertainty; low means the J passes agree."""
    stack = np.asarray(stack, dtype=np.float64)
    if mode == DROPOUT_VARIANCE:
        if stack.shape[0] < 2:
            warnings.warn("a single pass has no spread; uncertainty is zero", DegenerateVariance)
            return np.zeros(stack.shape[1])
        # shift by the first pass so identical passes give exactly zero
        d = stack - stack[0]
        return d.var(axis=0).mean(axis=1)
    if mode == CLASS_VARIANCE:
        return stack.mean(axis=0).var(axis=1)
    raise ValueError(f"unknown uncertainty mode {mode!r}")


def predicted_classes(p) -> np.ndarray:
    """Argmax class ids in 1..C (column j is class j+1, so unlabelled is never predicted)."""
    return np.asarray(p).argmax(axis=1) + 1


def nearest_rank(values, a: float) -> float:
    """The ceil(a/100 * n)-th smallest value (1-based, at least the first)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    r = max(1, math.ceil(a / 100.0 * len(v)))
    return float(v[r - 1])


def budget(n_c: int, a: float) -> int:
    return math.ceil(a / 100.0 * n_c)


def per_class_thresholds(nu, predicted, a: float, C: int, n_min: int = N_MIN) -> np.ndarray:
    """lambda[c-1] is the nearest-rank a-th percentile of nu over points predicted as c."""
    if not 0 < a < 100:
        raise ValueError("percentile a must lie in (0, 100)")
    nu = np.asarray(nu)
    predicted = np.asarray(predicted)
    lam = np.full(C, -np.inf)
    for c in range(1, C + 1):
        members = nu[predicted == c]
        if len(members) >= max(n_min, 1):
            lam[c - 1] = nearest_rank(members, a)
    return lam


def _ranked_budget(score, predicted, a, C, n_min, allowed=None) -> np.ndarray:
    """Per class, the ceil(a% n_c) lowest-score points (ties to the lower index)."""
    score = np.asarray(score, dtype=np.float64)
    predicted = np.asarray(predicted)
    chosen = []
    for c in range(1, C + 1):
        members = np.flatnonzero(predicted == c)
        if len(members) < max(n_min, 1):
            continue
        cand = members if allowed is None else members[allowed[members]]
        order = cand[np.lexsort((cand, score[cand]))]
        chosen.append(order[:budget(len(members), a)])
    if not chosen:
        return np.zeros(0, dtype=np.int64)
    return np.sort(np.concatenate(chosen))


def select_seeds(p, nu, lam, a: Optional[float] = None, n_min: int = N_MIN) -> PseudoLabelSet:
    """Seeds are points whose uncertainty is at most their predicted class's threshold.

    With ``a`` given, each class is also capped at ceil(a/100 * n_c) seeds,
    ties broken by the lower point index, so saturated ties (e.g. dropout
    switched off, nu == 0) still yield the exact budget.
    """
    p = np.asarray(p)
    nu = np.asarray(nu)
    lam = np.asarray(lam, dtype=np.float64)
    C = p.shape[1]
    pred = predicted_classes(p)
    ok = nu <= lam[pred - 1]
    if a is None:
        idx = np.flatnonzero(ok)
    else:
        idx = _ranked_budget(nu, pred, a, C, n_min, allowed=ok)
    return PseudoLabelSet.from_seeds(idx, pred[idx])


def uncertainty_select(p, nu, a: float, n_min: int = N_MIN) -> PseudoLabelSet:
    pred = predicted_classes(p)
    lam = per_class_thresholds(nu, pred, a, np.asarray(p).shape[1], n_min)
    return select_seeds(p, nu, lam, a, n_min)


def confidence_select(p, a: float, n_min: int = N_MIN) -> PseudoLabelSet:
    """Per class, the a% of predicted points with the highest max-softmax."""
    p = np.asarray(p)
    pred = predicted_classes(p)
    idx = _ranked_budget(-p.max(axis=1), pred, a, p.shape[1], n_min)
    return PseudoLabelSet.from_seeds(idx, pred[idx])


def centroid_select(backbone_feats, p, a: float, n_min: int = N_MIN) -> PseudoLabelSet:
    """Per class, the a% of predicted points closest to that class's feature centroid."""
    feats = np.asarray(backbone_feats.value if isinstance(backbone_feats, ad.Tensor)
                       else backbone_feats, dtype=np.float64)
    p = np.asarray(p)
    pred = predicted_classes(p)
    dist = np.zeros(len(pred))
    for c in np.unique(pred):
        members = pred == c
        dist[members] = np.linalg.norm(feats[members] - feats[members].mean(axis=0), axis=1)
    idx = _ranked_budget(dist, pred, a, p.shape[1], n_min)
    return PseudoLabelSet.from_seeds(idx, pred[idx])

"""Spread seed pseudo-labels to geometrically similar points.

Each seed hands its label to the K points whose local descriptors are
closest to its own. Those points can lie anywhere in the frame, which is
the point: similar local geometry tends to mean the same class.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .descriptor import DescriptorField
from .geom import _norm_last, build_knn_index
from .selection import PseudoLabelSet


class EmptySeedSet(ValueError):
    pass


@dataclass
class PropagationConfig:
    K: int = 10
    exclude_seeds: bool = True
    normalize: bool = False
    # "descriptor" (default) or "xyz" for the metric-space ablation
    space: str = "descriptor"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.space not in ("descriptor", "xyz"):
            raise ValueError(f"unknown propagation space {self.space!r}")


def _vectors(desc: DescriptorField, cfg: PropagationConfig, points=None) -> np.ndarray:
    if cfg.space == "xyz":
        if points is None:
            raise ValueError("xyz propagation needs the frame points")
        return np.asarray(points, dtype=np.float64)
    v = desc.descriptors
    if cfg.normalize:
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        v = np.divide(v, norms, out=np.zeros_like(v), where=norms > 0)
    return v


def geometric_similarities(seed_index: int, desc: DescriptorField) -> np.ndarray:
    """Descriptor distances from one seed to every other point (length N-1, seed removed)."""
    d = desc.descriptors
    if not 0 <= seed_index < len(d):
        raise IndexError(f"seed index {seed_index} out of range")
    dist = _norm_last(d - d[seed_index])
    return np.delete(dist, seed_index)


def propagate(seeds: PseudoLabelSet, desc: DescriptorField,
              cfg: Optional[PropagationConfig] = None, points=None) -> PseudoLabelSet:
    """Seeds plus the points they claim, one label per point.

    A seed claims its K nearest other points in descriptor space (ties to
    the lower index). Isolated points are never searched, nor are seeds when
    ``exclude_seeds`` is set; otherwise a seed may fill a slot of another
    seed's list but keeps its own label. Isolated seeds claim nothing.
    A point claimed twice goes to the seed at the smaller distance, then to
    the lower seed index.
    """
    cfg = cfg or PropagationConfig()
    if len(seeds) == 0:
        raise EmptySeedSet("no seeds to propagate from")
    seeds = seeds.seeds
    vec = _vectors(desc, cfg, points)
    n = len(vec)
    if n != len(desc):
        raise ValueError("descriptor field and points disagree in length")

    # the search pool: never isolated points, and not seeds unless asked
    pool_mask = ~desc.isolated
    if cfg.exclude_seeds:
        pool_mask[seeds.index] = False
    pool = np.flatnonzero(pool_mask)
    active = ~desc.isolated[seeds.index]
    src, src_label = seeds.index[active], seeds.label[active]
    t = s = lab = np.zeros(0, dtype=np.int64)
    d = np.zeros(0)
    if len(src) and len(pool):
        k = min(cfg.K + (0 if cfg.exclude_seeds else 1), len(pool))
        nbr, dist = build_knn_index(vec[pool]).query_batch(vec[src], k)
        nbr = pool[nbr]
        parts = []
        for row, (sd, lb) in enumerate(zip(src, src_label)):
            keep = nbr[row] != sd
            tt, dd = nbr[row][keep][:cfg.K], dist[row][keep][:cfg.K]
            parts.append((tt, np.full(len(tt), sd), dd, np.full(len(tt), lb)))
        t, s, d, lab = (np.concatenate(x) for x in zip(*parts))
        # seeds found in the pool used up a slot but keep their own label
        keep = ~np.isin(t, seeds.index)
        t, s, d, lab = t[keep], s[keep], d[keep], lab[keep]

    # resolve collisions: per target, smallest (distance, seed index) wins
    order = np.lexsort((s, d, t))
    t, s, d, lab = t[order], s[order], d[order], lab[order]
    first = np.ones(len(t), dtype=bool)
    first[1:] = t[1:] != t[:-1]
    t, s, d, lab = t[first], s[first], d[first], lab[first]

    # rank of each won point within its seed, by (distance, target index)
    order = np.lexsort((t, d, s))
    t, s, d, lab = t[order], s[order], d[order], lab[order]
    rank = np.ones(len(t), dtype=np.int64)
    for i in range(1, len(t)):
        if s[i] == s[i - 1]:
            rank[i] = rank[i - 1] + 1

    return PseudoLabelSet(
        np.concatenate([seeds.index, t]),
        np.concatenate([seeds.label, lab]),
        np.concatenate([np.ones(len(seeds), dtype=bool), np.zeros(len(t), dtype=bool)]),
        np.concatenate([seeds.index, s]),
        np.concatenate([np.zeros(len(seeds), dtype=np.int64), rank]),
        np.concatenate([np.zeros(len(seeds)), d]),
    )

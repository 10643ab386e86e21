"""Handcrafted per-point geometric descriptors (simplified FPFH).

Each point gets three 11-bin histograms of angular relations between its
normal and the normals of neighbors inside a fixed radius. The features are
chosen to be insensitive to the sign of the estimated normals, so the
descriptor of a point does not depend on where the sensor sat.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geom import Frame, build_knn_index

N_BINS = 11
N_FEATURES = 3
DESCRIPTOR_DIM = N_BINS * N_FEATURES


class TooFewPoints(ValueError):
    pass


@dataclass
class DescriptorField:
    descriptors: np.ndarray
    source_frame_id: int
    # points with no neighbor inside the radius; they carry the zero descriptor
    isolated: np.ndarray

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        self.isolated = np.asarray(self.isolated, dtype=bool)
        if not np.all(np.isfinite(self.descriptors)):
            raise ValueError("descriptors must be finite")
        if self.isolated.shape != (len(self.descriptors),):
            raise ValueError("isolated flags must have one entry per descriptor row")

    def __len__(self):
        return len(self.descriptors)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]


DescriptorFn = Callable[[Frame], DescriptorField]


def estimate_normals(f: Frame, k: int = 15, viewpoint=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Unit normals from the smallest-eigenvalue direction of each k-neighborhood.

    Normals are flipped to face ``viewpoint`` (the sensor origin by default).
    """
    pts = f.points
    if k < 1 or len(pts) < max(k, 3):
        raise TooFewPoints(f"need at least {max(k, 3)} points for k={k}, got {len(pts)}")
    idx, _ = build_knn_index(pts).query_batch(pts, k)
    nbhd = pts[idx]
    centered = nbhd - nbhd.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    to_view = np.asarray(viewpoint, dtype=np.float64) - pts
    flip = np.einsum("ij,ij->i", normals, to_view) < 0
    normals[flip] *= -1.0
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def _pair_features(ps, ns, pt, nt):
    """Sign-invariant Darboux-frame features for directed pairs s -> t, each in [0, 1]."""
    d = pt - ps
    dist = np.linalg.norm(d, axis=1, keepdims=True)
    dhat = d / np.maximum(dist, 1e-12)
    v = np.cross(dhat, ns)
    vnorm = np.linalg.norm(v, axis=1, keepdims=True)
    v = np.where(vnorm > 1e-9, v / np.maximum(vnorm, 1e-12), 0.0)
    w = np.cross(ns, v)
    f_alpha = np.abs(np.einsum("ij,ij->i", v, nt))
    f_phi = np.abs(np.einsum("ij,ij->i", ns, dhat))
    theta = np.arctan2(np.einsum("ij,ij->i", w, nt), np.einsum("ij,ij->i", ns, nt))
    theta = np.mod(theta, np.pi)
    f_theta = np.minimum(theta, np.pi - theta) / (np.pi / 2)
    return np.stack([f_alpha, f_phi, f_theta], axis=1), dist[:, 0]


def _bin(values: np.ndarray) -> np.ndarray:
    return np.clip((values * N_BINS).astype(np.int64), 0, N_BINS - 1)


def compute_descriptors(f: Frame, normals, radius: float = 1.0) -> DescriptorField:
    """FPFH-style descriptor: own histogram plus distance-weighted neighbor histograms."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts = f.points
    n = len(pts)
    normals = np.asarray(normals, dtype=np.float64)
    if normals.shape != pts.shape:
        raise ValueError("one normal per point required")
    if n == 0:
        raise TooFewPoints("empty frame")
    if n == 1:
        return DescriptorField(np.zeros((1, DESCRIPTOR_DIM)), f.frame_id, np.ones(1, dtype=bool))

    pairs = build_knn_index(pts).query_radius_pairs(radius)
    if len(pairs):
        pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    src = np.concatenate([pairs[:, 0], pairs[:, 1]]).astype(np.int64)
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]]).astype(np.int64)

    feats, dist = _pair_features(pts[src], normals[src], pts[dst], normals[dst])
    bins = _bin(feats) + np.arange(N_FEATURES) * N_BINS
    spfh = np.zeros((n, DESCRIPTOR_DIM))
    for j in range(N_FEATURES):
        np.add.at(spfh, (src, bins[:, j]), 1.0)
    counts = np.bincount(src, minlength=n).astype(np.float64)
    isolated = counts == 0
    spfh[~isolated] /= counts[~isolated, None]

    weight = 1.0 / np.maximum(dist, 0.05 * radius)
    nbr = np.zeros((n, DESCRIPTOR_DIM))
    np.add.at(nbr, src, weight[:, None] * spfh[dst])
    wsum = np.bincount(src, weights=weight, minlength=n)
    nbr[~isolated] /= wsum[~isolated, None]

    fpfh = spfh + nbr
    blocks = fpfh.reshape(n, N_FEATURES, N_BINS)
    totals = blocks.sum(axis=2, keepdims=True)
    blocks = np.divide(blocks, totals, out=np.zeros_like(blocks), where=totals > 0)
    return DescriptorField(blocks.reshape(n, DESCRIPTOR_DIM), f.frame_id, isolated)


def fpfh_descriptor(f: Frame, radius: float = 1.0, normal_k: int = 15) -> DescriptorField:
    """Default descriptor function: normals then histograms."""
    k = min(normal_k, len(f))
    if k < 3:
        return DescriptorField(np.zeros((len(f), DESCRIPTOR_DIM)), f.frame_id,
                               np.ones(len(f), dtype=bool))
    return compute_descriptors(f, estimate_normals(f, k), radius)

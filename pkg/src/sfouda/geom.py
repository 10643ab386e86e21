"""Point-cloud containers, rigid transforms and exact k-nearest-neighbor search."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

UNLABELLED = 0


class EmptySet(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform contains non-finite values")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation is not orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        c, s = np.cos(yaw), np.sin(yaw)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(R, np.asarray(translation, dtype=np.float64))

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map an (N, 3) array of points by R p + t."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return the transform equivalent to applying ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(T: RigidTransform) -> RigidTransform:
    return T.inverse()


def relative_transform(pose_from: RigidTransform, pose_to: RigidTransform) -> RigidTransform:
    """Transform mapping coordinates of the ``pose_from`` frame into the ``pose_to`` frame.

    Both poses are sensor-to-world, so the result is ``pose_to^-1 o pose_from``.
    """
    return compose(pose_to.inverse(), pose_from)


@dataclass
class Frame:
    points: np.ndarray
    labels: Optional[np.ndarray] = None
    frame_id: int = 0
    pose: RigidTransform = field(default_factory=RigidTransform)
    # generator-only bookkeeping: persistent world-point id per point (-1 if unknown)
    point_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("frame contains non-finite coordinates")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.points),):
                raise ValueError(
                    f"labels length {self.labels.shape} does not match {len(self.points)} points"
                )
        if self.point_ids is not None:
            self.point_ids = np.asarray(self.point_ids, dtype=np.int64)
        if self.frame_id < 0:
            raise ValueError("frame_id must be non-negative")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_labels(self) -> bool:
        return self.labels is not None


def apply_transform(T: RigidTransform, f: Frame) -> Frame:
    return replace(f, points=T.apply(f.points))


def _norm_last(diff: np.ndarray) -> np.ndarray:
    # fixed left-to-right accumulation so every code path rounds identically
    acc = diff[..., 0] * diff[..., 0]
    for j in range(1, diff.shape[-1]):
        acc = acc + diff[..., j] * diff[..., j]
    return np.sqrt(acc)


def _row_distances(data: np.ndarray, query: np.ndarray) -> np.ndarray:
    return _norm_last(data - query)


def brute_force_knn(vectors, query, k: int):
    """Reference O(N) scan: (indices, distances), ties broken by lower index."""
    vectors = np.asarray(vectors, dtype=np.float64)
    d = _row_distances(vectors, np.asarray(query, dtype=np.float64))
    order = np.lexsort((np.arange(len(d)), d))[: min(k, len(d))]
    return order, d[order]


class KnnIndex:
    """Exact k-nearest-neighbor index over a fixed set of d-dimensional vectors.

    A kd-tree proposes candidates; distances are then recomputed with a single
    deterministic formula and sorted by (distance, index), so results are
    identical to a brute-force scan including tie order.
    """

    # candidate over-fetch beyond k before checking for boundary ties
    _SLACK = 8

    def __init__(self, vectors):
        data = np.asarray(vectors, dtype=np.float64)
        if data.ndim == 1:
            data = data.reshape(-1, 1) if data.size else data.reshape(0, 0)
        if data.shape[0] == 0:
            raise EmptySet("cannot index an empty point set")
        if not np.all(np.isfinite(data)):
            raise ValueError("indexed vectors must be finite")
        self.data = np.ascontiguousarray(data)
        self.data.setflags(write=False)
        self._tree = cKDTree(self.data)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def _check(self, q: np.ndarray):
        if q.shape[-1] != self.dim:
            raise DimensionMismatch(f"query dimension {q.shape[-1]} != index dimension {self.dim}")

    def query(self, query, k: int):
        """Return (indices, distances) of the min(k, N) nearest vectors."""
        q = np.asarray(query, dtype=np.float64).reshape(-1)
        self._check(q)
        idx, dist = self.query_batch(q[None, :], k)
        return idx[0], dist[0]

    def query_batch(self, queries, k: int):
        """Vectorized query; returns (M, min(k, N)) index and distance arrays."""
        if k < 1:
            raise ValueError("k must be positive")
        Q = np.asarray(queries, dtype=np.float64)
        if Q.ndim != 2:
            raise DimensionMismatch("queries must be a 2-D array")
        self._check(Q)
        kk = min(k, self.n)
        if self.n <= kk + self._SLACK or self.n <= 64:
            return self._brute_batch(Q, kk)
        m = min(kk + self._SLACK, self.n)
        tree_d, cand = self._tree.query(Q, k=m)
        cand = cand.reshape(len(Q), m)
        tree_d = tree_d.reshape(len(Q), m)
        diff = self.data[cand] - Q[:, None, :]
        exact = _norm_last(diff)
        order = np.lexsort((cand, exact), axis=1)
        cand = np.take_along_axis(cand, order, axis=1)
        exact = np.take_along_axis(exact, order, axis=1)
        out_i, out_d = cand[:, :kk].copy(), exact[:, :kk].copy()
        # a point outside the candidate list might tie with (or, through
        # rounding, beat) the k-th candidate; rescan those queries exhaustively
        kth = out_d[:, -1]
        worst = tree_d[:, -1]
        risky = worst <= kth * (1.0 + 1e-9) + 1e-12
        for r in np.flatnonzero(risky):
            out_i[r], out_d[r] = brute_force_knn(self.data, Q[r], kk)
        return out_i, out_d

    def _brute_batch(self, Q, kk):
        out_i = np.empty((len(Q), kk), dtype=np.int64)
        out_d = np.empty((len(Q), kk))
        for r in range(len(Q)):
            out_i[r], out_d[r] = brute_force_knn(self.data, Q[r], kk)
        return out_i, out_d

    def query_radius_pairs(self, radius: float):
        """All unordered index pairs (i < j) closer than ``radius``, as an (P, 2) array."""
        return self._tree.query_pairs(radius, output_type="ndarray")


def build_knn_index(vectors) -> KnnIndex:
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.size == 0:
        raise EmptySet("cannot index an empty point set")
    if vectors.ndim != 2:
        raise DimensionMismatch("vectors must share one dimension")
    return KnnIndex(vectors)


def knn_query(index: KnnIndex, query, k: int) -> list[tuple[int, float]]:
    idx, dist = index.query(query, k)
    return [(int(i), float(d)) for i, d in zip(idx, dist)]

"""Frame sources: a procedural street-scene LiDAR simulator and KITTI-format IO.

The simulator builds one static world as a Poisson-disk sampled set of
labelled surface points, then drives a ring-structured sensor through it.
Every frame observes a subset of the persistent world points, so the true
frame-to-frame correspondences are known exactly.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import yaml
from scipy.spatial import cKDTree

from .geom import Frame, RigidTransform

log = logging.getLogger(__name__)

CLASS_NAMES = ("unlabelled", "vehicle", "pedestrian", "road", "sidewalk",
               "terrain", "manmade", "vegetation")
NUM_CLASSES = 7  # semantic classes, excluding unlabelled
UNLABELLED, VEHICLE, PEDESTRIAN, ROAD, SIDEWALK, TERRAIN, MANMADE, VEGETATION = range(8)


class InvalidConfig(ValueError):
    pass


class MalformedFile(ValueError):
    pass


class LabelCountMismatch(ValueError):
    pass


class MalformedLine(ValueError):
    pass


class UnknownLabelId(KeyError):
    pass


# --------------------------------------------------------------------------
# class maps


@dataclass
class ClassMap:
    table: dict
    name: str = ""

    def __post_init__(self):
        for raw, cls in self.table.items():
            if not 0 <= cls <= NUM_CLASSES:
                raise ValueError(f"class id {cls} for raw id {raw} outside 0..{NUM_CLASSES}")

    @classmethod
    def from_text(cls, text: str, name: str = "") -> "ClassMap":
        table = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise MalformedLine(f"{name or 'class map'}:{lineno}: expected 'raw_id class_id'")
            table[int(parts[0])] = int(parts[1])
        return cls(table, name)

    @classmethod
    def from_file(cls, path) -> "ClassMap":
        path = Path(path)
        return cls.from_text(path.read_text(), path.name)

    @classmethod
    def bundled(cls, name: str) -> "ClassMap":
        """One of: semantickitti, semantickitti_raw, nuscenes, carla, synlidar."""
        text = resources.files("sfouda.data").joinpath(f"{name}.map").read_text()
        return cls.from_text(text, name)

    def lookup(self, max_id: int) -> tuple[np.ndarray, np.ndarray]:
        lut = np.zeros(max_id + 1, dtype=np.int64)
        known = np.zeros(max_id + 1, dtype=bool)
        for raw, c in self.table.items():
            if raw <= max_id:
                lut[raw] = c
                known[raw] = True
        return lut, known


def remap_labels(raw_labels, class_map: ClassMap, strict: bool = False) -> np.ndarray:
    """Element-wise table lookup; unknown ids raise in strict mode, else map to unlabelled."""
    raw = np.asarray(raw_labels, dtype=np.int64).reshape(-1)
    if raw.size == 0:
        return np.zeros(0, dtype=np.int64)
    if raw.min() < 0:
        raise UnknownLabelId(int(raw.min()))
    lut, known = class_map.lookup(int(raw.max()))
    if not known[raw].all():
        bad = sorted(set(raw[~known[raw]].tolist()))
        if strict:
            raise UnknownLabelId(bad[0])
        log.debug("unmapped label ids %s treated as unlabelled", bad[:10])
    return lut[raw]


# --------------------------------------------------------------------------
# KITTI container format


def load_kitti_frame(scan_path, label_path=None, class_map: Optional[ClassMap] = None,
                     frame_id: int = 0, pose: Optional[RigidTransform] = None,
                     strict: bool = False) -> Frame:
    raw = Path(scan_path).read_bytes()
    if len(raw) % 16:
        raise MalformedFile(f"{scan_path}: {len(raw)} bytes is not a multiple of 16")
    xyz = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)[:, :3].astype(np.float64)
    labels = None
    if label_path is not None:
        lraw = Path(label_path).read_bytes()
        if len(lraw) % 4:
            raise MalformedFile(f"{label_path}: {len(lraw)} bytes is not a multiple of 4")
        sem = np.frombuffer(lraw, dtype="<u4") & 0xFFFF
        if len(sem) != len(xyz):
            raise LabelCountMismatch(f"{len(sem)} labels for {len(xyz)} points")
        sem = sem.astype(np.int64)
        labels = remap_labels(sem, class_map, strict) if class_map is not None else sem
    return Frame(xyz, labels, frame_id, pose if pose is not None else RigidTransform())


def write_kitti_frame(f: Frame, scan_path, label_path=None, intensity=None):
    rec = np.zeros((len(f), 4), dtype="<f4")
    rec[:, :3] = f.points
    if intensity is not None:
        rec[:, 3] = intensity
    Path(scan_path).write_bytes(rec.tobytes())
    if label_path is not None:
        if f.labels is None:
            raise ValueError("frame has no labels to write")
        Path(label_path).write_bytes(f.labels.astype("<u4").tobytes())


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    Rn = U @ Vt
    if np.linalg.det(Rn) < 0:
        U[:, -1] *= -1
        Rn = U @ Vt
    return Rn


def parse_pose_line(line: str, lineno: int = 0) -> RigidTransform:
    parts = line.split()
    if len(parts) != 12:
        raise MalformedLine(f"line {lineno}: expected 12 values, got {len(parts)}")
    try:
        M = np.array([float(v) for v in parts]).reshape(3, 4)
    except ValueError as exc:
        raise MalformedLine(f"line {lineno}: {exc}") from exc
    R = M[:, :3]
    drift = np.abs(R @ R.T - np.eye(3)).max()
    if drift > 1e-6:
        warnings.warn(f"pose line {lineno}: rotation drift {drift:.2e}, re-orthonormalized")
    if drift > 1e-12:
        R = _orthonormalize(R)
    return RigidTransform(R, M[:, 3])


def load_poses(path) -> list[RigidTransform]:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            poses.append(parse_pose_line(line, lineno))
    return poses


def write_poses(poses, path):
    lines = []
    for T in poses:
        M = T.matrix()[:3, :]
        lines.append(" ".join(repr(float(v)) for v in M.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


class KittiSequence:
    """Pull-based reader over a sequence directory laid out as
    ``velodyne/NNNNNN.bin``, optional ``labels/NNNNNN.label`` and ``poses.txt``."""

    def __init__(self, root, class_map: Optional[ClassMap] = None, strict: bool = False):
        self.root = Path(root)
        self.scans = sorted((self.root / "velodyne").glob("*.bin"))
        if not self.scans:
            raise FileNotFoundError(f"no scans under {self.root / 'velodyne'}")
        pose_file = self.root / "poses.txt"
        self.poses = load_poses(pose_file) if pose_file.exists() else None
        if self.poses is not None and len(self.poses) < len(self.scans):
            raise MalformedFile(f"{len(self.poses)} poses for {len(self.scans)} scans")
        self.class_map = class_map if class_map is not None else ClassMap.bundled("semantickitti_raw")
        self.strict = strict

    def __len__(self):
        return len(self.scans)

    def __iter__(self) -> Iterator[Frame]:
        for t, scan in enumerate(self.scans):
            label = self.root / "labels" / (scan.stem + ".label")
            yield load_kitti_frame(
                scan, label if label.exists() else None, self.class_map, t,
                self.poses[t] if self.poses is not None else None, self.strict,
            )


def write_kitti_sequence(frames, root):
    root = Path(root)
    (root / "velodyne").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(exist_ok=True)
    poses = []
    for f in frames:
        stem = f"{f.frame_id:06d}"
        write_kitti_frame(f, root / "velodyne" / f"{stem}.bin",
                          root / "labels" / f"{stem}.label" if f.labels is not None else None)
        poses.append(f.pose)
    write_poses(poses, root / "poses.txt")


# --------------------------------------------------------------------------
# procedural scene generator


@dataclass
class SceneConfig:
    """Street-scene simulator settings. Distances in meters, angles in degrees.

    Object densities are counts per 100 m of road (both sides together). The
    ``*_delta``, ``class_multipliers`` and ``point_dropout`` fields are the
    domain-shift knobs applied on top of the base sensor and layout.
    """

    seed: int = 0
    frames: int = 200
    # sensor
    rings: int = 64
    azimuth_bins: int = 720
    fov_up: float = 3.0
    fov_down: float = -25.0
    beam_halfwidth: float = 0.2
    max_range: float = 20.0
    min_range: float = 1.0
    sensor_height: float = 1.8
    noise: float = 0.01
    # layout
    surface_spacing: float = 0.4
    road_half_width: float = 4.0
    sidewalk_width: float = 2.0
    curb_height: float = 0.15
    terrain_width: float = 7.0
    # std of per-sample height jitter on terrain (grass and soil are not flat)
    terrain_roughness: float = 0.0
    vehicles: float = 10.0
    pedestrians: float = 30.0
    trees: float = 8.0
    bushes: float = 10.0
    poles: float = 8.0
    building_coverage: float = 0.6
    clutter: float = 4.0
    # trajectory
    speed: float = 1.0
    sway_amplitude: float = 1.0
    sway_period: float = 80.0
    # domain-shift knobs
    ring_delta: int = 0
    noise_delta: float = 0.0
    point_dropout: float = 0.0
    class_multipliers: dict = field(default_factory=dict)

    def validate(self):
        if self.frames < 2:
            raise InvalidConfig("frames must be >= 2")
        if self.rings + self.ring_delta < 2:
            raise InvalidConfig("effective ring count must be >= 2")
        if self.noise + self.noise_delta < 0:
            raise InvalidConfig("effective noise must be non-negative")
        if not 0.0 <= self.point_dropout < 1.0:
            raise InvalidConfig("point_dropout must be in [0, 1)")
        for name in ("vehicles", "pedestrians", "trees", "bushes", "poles", "clutter",
                     "building_coverage", "terrain_width", "sidewalk_width", "terrain_roughness"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be non-negative")
        for k, v in self.class_multipliers.items():
            if k not in CLASS_NAMES[1:]:
                raise InvalidConfig(f"unknown class in class_multipliers: {k}")
            if v < 0:
                raise InvalidConfig(f"class multiplier for {k} must be non-negative")
        if self.max_range <= self.min_range or self.surface_spacing <= 0:
            raise InvalidConfig("bad range or spacing")
        return self

    def multiplier(self, cls_name: str) -> float:
        return float(self.class_multipliers.get(cls_name, 1.0))

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def from_file(cls, path) -> "SceneConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def to_dict(self) -> dict:
        return asdict(self)


def source_config(seed: int = 0, **overrides) -> SceneConfig:
    """Dense, clean sensor: the synthetic source domain."""
    return replace(SceneConfig(seed=seed), **overrides).validate()


def target_config(seed: int = 0, **overrides) -> SceneConfig:
    """Shifted domain: half the rings, noisier ranges, dropped returns, other class mix."""
    base = SceneConfig(
        seed=seed,
        ring_delta=-32,
        noise_delta=0.03,
        point_dropout=0.1,
        class_multipliers={"vehicle": 1.8, "vegetation": 1.5, "manmade": 0.6, "pedestrian": 1.5},
    )
    return replace(base, **overrides).validate()


def _poisson_thin(points: np.ndarray, min_dist: float, rng) -> np.ndarray:
    """Greedy random-order thinning so no two kept points are closer than ``min_dist``."""
    n = len(points)
    pairs = cKDTree(points).query_pairs(min_dist, output_type="ndarray")
    if len(pairs) == 0:
        return np.arange(n)
    a = np.concatenate([pairs[:, 0], pairs[:, 1]])
    b = np.concatenate([pairs[:, 1], pairs[:, 0]])
    order = np.argsort(a, kind="stable")
    a, b = a[order], b[order]
    start = np.searchsorted(a, np.arange(n + 1))
    blocked = np.zeros(n, dtype=bool)
    keep = []
    for i in rng.permutation(n):
        if blocked[i]:
            continue
        keep.append(i)
        blocked[b[start[i]:start[i + 1]]] = True
    return np.sort(np.asarray(keep, dtype=np.int64))


class _WorldBuilder:
    def __init__(self, cfg: SceneConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.pts: list[np.ndarray] = []
        self.lab: list[np.ndarray] = []
        # candidates are oversampled, then thinned to the target spacing
        self.cand = cfg.surface_spacing / 1.8

    def add(self, pts, label):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        self.pts.append(pts)
        self.lab.append(np.full(len(pts), label, dtype=np.int64))

    def area_samples(self, area: float) -> int:
        return max(1, int(round(area / self.cand ** 2)))

    def rect(self, x0, x1, y0, y1, z_fn, label, jitter=0.0):
        n = self.area_samples(abs((x1 - x0) * (y1 - y0)))
        x = self.rng.uniform(x0, x1, n)
        y = self.rng.uniform(y0, y1, n)
        z = z_fn(x, y)
        if jitter > 0:
            z = z + self.rng.normal(0.0, jitter, n)
        self.add(np.column_stack([x, y, z]), label)

    def vwall(self, x0, x1, y, z0, z1, label):
        n = self.area_samples((x1 - x0) * (z1 - z0))
        x = self.rng.uniform(x0, x1, n)
        z = self.rng.uniform(z0, z1, n)
        self.add(np.column_stack([x, np.full(n, y), z]), label)

    def box(self, cx, cy, L, W, H, z0, label, yaw=0.0):
        faces = []
        for sx, sy, sz, area in ((L, W, 0, L * W), (L, 0, H, L * H), (0, W, H, W * H)):
            n = self.area_samples(area)
            for side in (-0.5, 0.5):
                u = self.rng.uniform(-0.5, 0.5, (n, 3)) * np.array([L, W, H])
                if sz == 0:
                    if side < 0:
                        continue  # no bottom face
                    u[:, 2] = 0.5 * H
                elif sy == 0:
                    u[:, 1] = side * W
                else:
                    u[:, 0] = side * L
                faces.append(u)
        u = np.vstack(faces)
        c, s = np.cos(yaw), np.sin(yaw)
        x = cx + c * u[:, 0] - s * u[:, 1]
        y = cy + s * u[:, 0] + c * u[:, 1]
        self.add(np.column_stack([x, y, z0 + 0.5 * H + u[:, 2]]), label)

    def cylinder(self, cx, cy, r, z0, z1, label, cap=True):
        n = self.area_samples(2 * np.pi * r * (z1 - z0))
        th = self.rng.uniform(0, 2 * np.pi, n)
        z = self.rng.uniform(z0, z1, n)
        self.add(np.column_stack([cx + r * np.cos(th), cy + r * np.sin(th), z]), label)
        if cap:
            m = self.area_samples(np.pi * r * r)
            rr = r * np.sqrt(self.rng.uniform(0, 1, m))
            th = self.rng.uniform(0, 2 * np.pi, m)
            self.add(np.column_stack([cx + rr * np.cos(th), cy + rr * np.sin(th), np.full(m, z1)]),
                     label)

    def blob(self, cx, cy, cz, r, roughness, label, zmin=None):
        n = self.area_samples(4 * np.pi * r * r)
        v = self.rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        rad = r * (1.0 + roughness * self.rng.uniform(-1, 1, n))
        p = np.array([cx, cy, cz]) + v * rad[:, None]
        if zmin is not None:
            p = p[p[:, 2] >= zmin]
        self.add(p, label)


def _terrain_height(x, y):
    return 0.12 * np.sin(0.35 * x) * np.cos(0.5 * y) + 0.05


def build_world(cfg: SceneConfig):
    """Return (points, labels) of the static world, thinned to ``surface_spacing``."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 1])
    wb = _WorldBuilder(cfg, rng)
    margin = cfg.max_range + 5.0
    x0, x1 = -margin, cfg.speed * (cfg.frames - 1) + margin
    length = x1 - x0
    rw = cfg.road_half_width
    sw = cfg.sidewalk_width * cfg.multiplier("sidewalk")
    tw = cfg.terrain_width * cfg.multiplier("terrain")
    flat = lambda h: (lambda x, y: np.full_like(x, h))  # noqa: E731

    wb.rect(x0, x1, -rw, rw, flat(0.0), ROAD)
    for sgn in (-1, 1):
        ya, yb = sorted((sgn * rw, sgn * (rw + sw)))
        wb.rect(x0, x1, ya, yb, flat(cfg.curb_height), SIDEWALK)
        ya, yb = sorted((sgn * (rw + sw), sgn * (rw + sw + tw)))
        wb.rect(x0, x1, ya, yb, _terrain_height, TERRAIN, cfg.terrain_roughness)

    def count(density, cls_name=None):
        mult = cfg.multiplier(cls_name) if cls_name else 1.0
        return int(rng.poisson(density * mult * length / 100.0))

    side = lambda: rng.choice([-1.0, 1.0])  # noqa: E731
    edge = rw + sw + tw

    # buildings: wall segments beyond the terrain strip
    cover = min(1.0, cfg.building_coverage * cfg.multiplier("manmade"))
    for sgn in (-1.0, 1.0):
        x = x0
        while x < x1:
            seg = rng.uniform(8, 25)
            if rng.random() < cover:
                y = sgn * (edge + rng.uniform(0.5, 3.0))
                wb.vwall(x, min(x + seg, x1), y, 0.0, rng.uniform(4, 9), MANMADE)
            x += seg + rng.uniform(1, 4)
    for _ in range(count(cfg.poles, "manmade")):
        s = side()
        wb.cylinder(rng.uniform(x0, x1), s * (rw + sw - 0.4), 0.15, cfg.curb_height,
                    rng.uniform(4, 7), MANMADE, cap=False)

    for _ in range(count(cfg.trees, "vegetation")):
        s = side()
        cx, cy = rng.uniform(x0, x1), s * (rw + sw + rng.uniform(1.5, tw - 0.5))
        top = rng.uniform(1.8, 2.6)
        wb.cylinder(cx, cy, 0.22, 0.0, top, VEGETATION, cap=False)
        r = rng.uniform(1.4, 2.6)
        wb.blob(cx, cy, top + 0.7 * r, r, 0.3, VEGETATION)
    for _ in range(count(cfg.bushes, "vegetation")):
        s = side()
        cx, cy = rng.uniform(x0, x1), s * (rw + sw + rng.uniform(1.5, tw))
        wb.blob(cx, cy, 0.1, rng.uniform(0.7, 1.5), 0.35, VEGETATION, zmin=0.05)

    for _ in range(count(cfg.vehicles, "vehicle")):
        s = side()
        lane = rng.choice([1.9, 2.6])
        L, W, H = rng.uniform(3.8, 4.8), rng.uniform(1.7, 2.0), rng.uniform(1.4, 1.7)
        # body sits 0.3 m above the road (wheel gap)
        wb.box(rng.uniform(x0, x1), s * lane, L, W, H, 0.3, VEHICLE, yaw=rng.normal(0, 0.05))
    for _ in range(count(cfg.pedestrians, "pedestrian")):
        s = side()
        wb.cylinder(rng.uniform(x0, x1), s * (rw + rng.uniform(0.8, sw - 0.3)), 0.3,
                    cfg.curb_height, cfg.curb_height + rng.uniform(1.55, 1.9), PEDESTRIAN)
    for _ in range(count(cfg.clutter)):
        s = side()
        wb.box(rng.uniform(x0, x1), s * (rw + sw + rng.uniform(0.3, 2.0)), 0.8, 0.8,
               rng.uniform(0.6, 1.2), 0.0, UNLABELLED)

    pts = np.vstack(wb.pts)
    lab = np.concatenate(wb.lab)
    keep = _poisson_thin(pts, cfg.surface_spacing, rng)
    return pts[keep], lab[keep]


def trajectory_pose(cfg: SceneConfig, t: int) -> RigidTransform:
    x = cfg.speed * t
    k = 2 * np.pi / cfg.sway_period
    y = cfg.sway_amplitude * np.sin(k * x)
    yaw = np.arctan(cfg.sway_amplitude * k * np.cos(k * x))
    return RigidTransform.from_yaw(yaw, (x, y, cfg.sensor_height))


class SyntheticStream:
    """Pull-based frame source over a procedurally built world.

    Frames are produced on demand, in order; ``frame(t)`` is deterministic
    in (config, t) so any frame can also be regenerated independently.
    """

    def __init__(self, cfg: SceneConfig):
        self.cfg = cfg.validate()
        self.world_points, self.world_labels = build_world(cfg)
        order = np.argsort(self.world_points[:, 0], kind="stable")
        self.world_points = self.world_points[order]
        self.world_labels = self.world_labels[order]

    def __len__(self):
        return self.cfg.frames

    def __iter__(self) -> Iterator[Frame]:
        for t in range(self.cfg.frames):
            yield self.frame(t)

    def pose(self, t: int) -> RigidTransform:
        return trajectory_pose(self.cfg, t)

    def visible(self, t: int) -> np.ndarray:
        """World indices observed at frame t (before dropout and noise), sorted."""
        cfg = self.cfg
        pose = self.pose(t)
        wx = self.world_points[:, 0]
        lo = np.searchsorted(wx, pose.translation[0] - cfg.max_range - 1.0)
        hi = np.searchsorted(wx, pose.translation[0] + cfg.max_range + 1.0)
        cand = np.arange(lo, hi)
        local = pose.inverse().apply(self.world_points[cand])
        r = np.linalg.norm(local, axis=1)
        ok = (r > cfg.min_range) & (r < cfg.max_range)
        cand, local, r = cand[ok], local[ok], r[ok]

        elev = np.degrees(np.arcsin(local[:, 2] / r))
        az = np.degrees(np.arctan2(local[:, 1], local[:, 0]))
        rings = cfg.rings + cfg.ring_delta
        spacing = (cfg.fov_up - cfg.fov_down) / (rings - 1)
        ring = np.rint((elev - cfg.fov_down) / spacing)
        on_beam = (ring >= 0) & (ring < rings) & (
            np.abs(elev - (cfg.fov_down + ring * spacing)) <= cfg.beam_halfwidth)

        # coarse depth buffer: a point is hidden by a clearly nearer return in its cell
        cell_deg = 360.0 / cfg.azimuth_bins * 4
        ce = np.floor(elev / cell_deg).astype(np.int64)
        ca = np.floor((az + 180.0) / cell_deg).astype(np.int64)
        key = ce * 100000 + ca
        _, inv = np.unique(key, return_inverse=True)
        nearest = np.full(inv.max() + 1, np.inf)
        np.minimum.at(nearest, inv, r)
        unoccluded = r <= nearest[inv] * 1.1 + 0.3
        return cand[on_beam & unoccluded]

    def frame(self, t: int) -> Frame:
        if not 0 <= t < self.cfg.frames:
            raise IndexError(t)
        cfg = self.cfg
        ids = self.visible(t)
        rng = np.random.default_rng([cfg.seed, 2, t])
        if cfg.point_dropout > 0:
            ids = ids[rng.random(len(ids)) >= cfg.point_dropout]
        pose = self.pose(t)
        pts = pose.inverse().apply(self.world_points[ids])
        sigma = cfg.noise + cfg.noise_delta
        if sigma > 0:
            pts = pts + rng.normal(0.0, sigma, pts.shape)
        return Frame(pts, self.world_labels[ids].copy(), t, pose, point_ids=ids)


def generate_stream(cfg: SceneConfig) -> list[Frame]:
    return list(SyntheticStream(cfg))


def true_correspondences(f_t: Frame, f_tw: Frame) -> set:
    """Pairs (i in f_t, j in f_tw) observing the same world point."""
    if f_t.point_ids is None or f_tw.point_ids is None:
        raise ValueError("frames carry no world point ids")
    pos_t = {int(p): i for i, p in enumerate(f_t.point_ids)}
    return {(pos_t[int(p)], j) for j, p in enumerate(f_tw.point_ids) if int(p) in pos_t}

"""Radar point cloud containers and the geometric primitives used for clustering.

A cloud is a flat collection of radar detections (position, Doppler velocity,
radar cross section, frame age, optional label).  This module provides
multi-frame accumulation with ego-motion compensation, size normalization by
random doubling/subsampling, farthest point sampling, k-NN and radius
grouping, and cluster localization.  All operations are pure functions;
random number generators are always passed in explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

MAX_FRAMES = 4
DEFAULT_CLOUD_SIZE = 1200


class Label(IntEnum):
    STATIC = 0
    VEHICLE = 1
    PEDESTRIAN = 2


UNLABELED = -1

COORD_FIELDS = ("x", "y", "v_r")
FEATURE_FIELDS = ("v_r", "sigma")


@dataclass(frozen=True)
class RadarDetection:
    """One radar detection; ``v_r`` is the ego-motion-compensated Doppler velocity."""

    x: float
    y: float
    v_r: float
    sigma: float
    frame_age: int = 0
    label: Label | None = None


@dataclass(frozen=True)
class InputLayout:
    """Which detection fields act as coordinates and which as features.

    ``coords`` must contain ``x`` and ``y``; ``v_r`` may additionally be used
    as a coordinate (scaled by ``doppler_scale``) and/or as a feature.
    """

    coords: tuple[str, ...] = ("x", "y", "v_r")
    features: tuple[str, ...] = ("sigma",)
    doppler_scale: float = 1.0

    def __post_init__(self):
        if "x" not in self.coords or "y" not in self.coords:
            raise ValueError("layout coords must contain x and y")
        for name in self.coords:
            if name not in COORD_FIELDS:
                raise ValueError(f"unknown coordinate field {name!r}")
        for name in self.features:
            if name not in FEATURE_FIELDS:
                raise ValueError(f"unknown feature field {name!r}")
        if len(set(self.coords)) != len(self.coords) or len(set(self.features)) != len(self.features):
            raise ValueError("duplicate field in layout")

    @property
    def coord_dims(self) -> int:
        return len(self.coords)

    @property
    def feature_dims(self) -> int:
        return len(self.features)

    def preprocess_fields(self) -> tuple[str, ...]:
        """Raw fields consumed by the feature pre-processing network."""
        used = set(self.coords) | set(self.features)
        return tuple(f for f in ("x", "y", "v_r", "sigma") if f == "x" or f == "y" or f in used)

    def drop(self, names) -> "InputLayout":
        """Layout with the given fields removed from both coords and features."""
        names = set(names)
        if names - {"v_r", "sigma"}:
            raise ValueError("only v_r and sigma can be dropped")
        return InputLayout(
            coords=tuple(c for c in self.coords if c not in names),
            features=tuple(f for f in self.features if f not in names),
            doppler_scale=self.doppler_scale,
        )


class PointCloud:
    """Ordered collection of N detections, stored column-wise.

    Coordinate and feature views are derived on demand from an
    :class:`InputLayout`, so the same cloud can be consumed under different
    input configurations.
    """

    def __init__(self, x, y, v_r, sigma, frame_age=None, labels=None):
        self.x = np.asarray(x, dtype=np.float64)
        n = self.x.shape[0]
        if n < 1:
            raise ValueError("a point cloud needs at least one detection")
        self.y = np.asarray(y, dtype=np.float64)
        self.v_r = np.asarray(v_r, dtype=np.float64)
        self.sigma = np.asarray(sigma, dtype=np.float64)
        if frame_age is None:
            frame_age = np.zeros(n, dtype=np.int64)
        self.frame_age = np.asarray(frame_age, dtype=np.int64)
        for col in (self.y, self.v_r, self.sigma, self.frame_age):
            if col.shape != (n,):
                raise ValueError("all columns must have equal length")
        if self.frame_age.min() < 0 or self.frame_age.max() >= MAX_FRAMES:
            raise ValueError(f"frame_age must lie in [0, {MAX_FRAMES - 1}]")
        if not (np.isfinite(self.v_r).all() and np.isfinite(self.sigma).all()
                and np.isfinite(self.x).all() and np.isfinite(self.y).all()):
            raise ValueError("detections must be finite")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (n,):
                raise ValueError("labels must align with detections")
            valid = np.isin(labels, (UNLABELED, int(Label.STATIC), int(Label.VEHICLE), int(Label.PEDESTRIAN)))
            if not valid.all():
                raise ValueError("invalid label value")
        self.labels = labels

    @classmethod
    def from_detections(cls, detections) -> "PointCloud":
        dets = list(detections)
        labels = None
        if any(d.label is not None for d in dets):
            labels = [UNLABELED if d.label is None else int(d.label) for d in dets]
        return cls(
            x=[d.x for d in dets],
            y=[d.y for d in dets],
            v_r=[d.v_r for d in dets],
            sigma=[d.sigma for d in dets],
            frame_age=[d.frame_age for d in dets],
            labels=labels,
        )

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def detections(self) -> list[RadarDetection]:
        out = []
        for i in range(self.n):
            lab = None
            if self.labels is not None and self.labels[i] != UNLABELED:
                lab = Label(int(self.labels[i]))
            out.append(RadarDetection(float(self.x[i]), float(self.y[i]), float(self.v_r[i]),
                                      float(self.sigma[i]), int(self.frame_age[i]), lab))
        return out

    def field(self, name: str) -> np.ndarray:
        return {"x": self.x, "y": self.y, "v_r": self.v_r, "sigma": self.sigma}[name]

    def coord_view(self, layout: InputLayout) -> np.ndarray:
        cols = []
        for name in layout.coords:
            col = self.field(name)
            if name == "v_r":
                col = col * layout.doppler_scale
            cols.append(col)
        return np.stack(cols, axis=1)

    def feature_view(self, layout: InputLayout) -> np.ndarray:
        if not layout.features:
            return np.zeros((self.n, 0), dtype=np.float64)
        return np.stack([self.field(name) for name in layout.features], axis=1)

    def raw_fields(self, names) -> np.ndarray:
        if not names:
            return np.zeros((self.n, 0), dtype=np.float64)
        return np.stack([self.field(name) for name in names], axis=1)

    def subset(self, indices) -> "PointCloud":
        """New cloud from the given row indices (duplicates allowed)."""
        idx = np.asarray(indices, dtype=np.int64)
        return PointCloud(
            x=self.x[idx], y=self.y[idx], v_r=self.v_r[idx], sigma=self.sigma[idx],
            frame_age=self.frame_age[idx],
            labels=None if self.labels is None else self.labels[idx],
        )

    def translated(self, dx: float, dy: float) -> "PointCloud":
        return PointCloud(self.x + dx, self.y + dy, self.v_r, self.sigma,
                          self.frame_age, self.labels)


def _wrap_angle(theta: float) -> float:
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class EgoPose:
    """Planar rigid transform taking a past frame's coordinates into the newest frame."""

    tx: float = 0.0
    ty: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", _wrap_angle(self.theta))

    @classmethod
    def identity(cls) -> "EgoPose":
        return cls(0.0, 0.0, 0.0)

    def apply(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        c, s = math.cos(self.theta), math.sin(self.theta)
        x = c * xy[..., 0] - s * xy[..., 1] + self.tx
        y = s * xy[..., 0] + c * xy[..., 1] + self.ty
        return np.stack([x, y], axis=-1)

    def compose(self, other: "EgoPose") -> "EgoPose":
        """Transform equal to applying ``other`` first, then ``self``."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return EgoPose(
            tx=c * other.tx - s * other.ty + self.tx,
            ty=s * other.tx + c * other.ty + self.ty,
            theta=self.theta + other.theta,
        )

    def inverse(self) -> "EgoPose":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return EgoPose(tx=-(c * self.tx + s * self.ty), ty=-(-s * self.tx + c * self.ty),
                       theta=-self.theta)


@dataclass
class Grouping:
    """Cluster assignment: one row of ``member_indices`` per representative point."""

    rp_indices: np.ndarray
    member_indices: np.ndarray
    k: int
    radii_used: np.ndarray | None = None

    def __post_init__(self):
        self.rp_indices = np.asarray(self.rp_indices, dtype=np.int64)
        self.member_indices = np.asarray(self.member_indices, dtype=np.int64)
        m = self.rp_indices.shape[0]
        if m < 1 or self.k < 1:
            raise ValueError("grouping needs at least one RP and k >= 1")
        if self.member_indices.shape != (m, self.k):
            raise ValueError("member_indices must be M x K")


def accumulate_frames(frames, poses) -> PointCloud:
    """Concatenate up to four frames after mapping each into the newest frame.

    ``frames`` are ordered oldest to newest and ``poses[i]`` maps frame ``i``
    into the newest frame's coordinate system (the newest pose is the
    identity).  Doppler and RCS values are carried over unchanged and
    ``frame_age`` records the source frame (0 = newest).
    """
    frames = list(frames)
    poses = list(poses)
    if not frames:
        raise ValueError("no frames to accumulate")
    if len(frames) != len(poses):
        raise ValueError(f"{len(frames)} frames but {len(poses)} poses")
    if len(frames) > MAX_FRAMES:
        raise ValueError(f"at most {MAX_FRAMES} frames can be accumulated")
    n_frames = len(frames)
    xs, ys, vs, ss, ages, labs = [], [], [], [], [], []
    any_labels = any(f.labels is not None for f in frames)
    for i, (frame, pose) in enumerate(zip(frames, poses)):
        xy = pose.apply(np.stack([frame.x, frame.y], axis=1))
        xs.append(xy[:, 0])
        ys.append(xy[:, 1])
        vs.append(frame.v_r)
        ss.append(frame.sigma)
        ages.append(np.full(frame.n, n_frames - 1 - i, dtype=np.int64))
        if any_labels:
            labs.append(frame.labels if frame.labels is not None
                        else np.full(frame.n, UNLABELED, dtype=np.int64))
    return PointCloud(
        x=np.concatenate(xs), y=np.concatenate(ys), v_r=np.concatenate(vs),
        sigma=np.concatenate(ss), frame_age=np.concatenate(ages),
        labels=np.concatenate(labs) if any_labels else None,
    )


def normalize_size(pc: PointCloud, target: int = DEFAULT_CLOUD_SIZE,
                   rng: np.random.Generator | None = None) -> PointCloud:
    """Resize a cloud to exactly ``target`` points.

    Undersized clouds are padded by appending uniformly sampled duplicates of
    existing detections; oversized clouds keep a uniform subset without
    replacement (original order preserved).
    """
    if target < 1:
        raise ValueError("target size must be positive")
    n = pc.n
    if n == target:
        return pc
    if rng is None:
        raise ValueError("normalize_size needs an RNG unless the size already matches")
    if n < target:
        extra = rng.integers(0, n, size=target - n)
        idx = np.concatenate([np.arange(n), extra])
    else:
        keep = rng.choice(n, size=target, replace=False)
        idx = np.sort(keep)
    return pc.subset(idx)


def _sq_dists(coords: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # (M, N) matrix of squared Euclidean distances, computed by explicit
    # differences so results agree exactly with per-pair evaluation
    return ((centers[:, None, :] - coords[None, :, :]) ** 2).sum(axis=-1)


def farthest_point_sampling(coords: np.ndarray, m: int, start: int = 0) -> np.ndarray:
    """Greedy subset of ``m`` indices maximizing the minimum pairwise distance.

    The first index is ``start``; every later pick maximizes the minimum
    Euclidean distance to the already-selected set, with ties broken by the
    lowest index.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} points from {n}")
    if not 0 <= start < n:
        raise ValueError("invalid start index")
    selected = np.empty(m, dtype=np.int64)
    selected[0] = start
    min_d2 = ((coords - coords[start]) ** 2).sum(axis=1)
    min_d2[start] = -1.0  # exclude selected points even under all-zero ties
    for i in range(1, m):
        nxt = int(np.argmax(min_d2))  # argmax returns the lowest index on ties
        selected[i] = nxt
        d2 = ((coords - coords[nxt]) ** 2).sum(axis=1)
        np.minimum(min_d2, d2, out=min_d2)
        min_d2[nxt] = -1.0
    return selected


def knn_query(coords: np.ndarray, query: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest points in ``coords`` for each query row.

    Rows are sorted by ascending distance; exact distance ties resolve to the
    lower index.
    """
    coords = np.asarray(coords, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    if k > coords.shape[0]:
        raise ValueError(f"k={k} exceeds the {coords.shape[0]} available points")
    d2 = _sq_dists(coords, query)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def knn_group(coords: np.ndarray, rp_indices, k: int) -> Grouping:
    """Group each representative point with its k nearest neighbours (itself included)."""
    rp_indices = np.asarray(rp_indices, dtype=np.int64)
    members = knn_query(coords, np.asarray(coords, dtype=np.float64)[rp_indices], k)
    return Grouping(rp_indices=rp_indices, member_indices=members, k=k)


def _ball_row(d2_row: np.ndarray, k: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    candidates = np.flatnonzero(d2_row <= radius * radius)
    order = np.argsort(d2_row[candidates], kind="stable")
    candidates = candidates[order]
    if candidates.shape[0] >= k:
        return candidates[:k]
    fill = candidates[rng.integers(0, candidates.shape[0], size=k - candidates.shape[0])]
    return np.concatenate([candidates, fill])


def ball_query(coords: np.ndarray, query: np.ndarray, k: int, radius: float,
               rng: np.random.Generator) -> np.ndarray:
    """Radius grouping of ``query`` rows against ``coords``.

    All points within ``radius`` are candidates; short rows are filled by
    uniform random duplication of candidates.  A query with no point in range
    falls back to its single nearest point.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if k < 1:
        raise ValueError("cluster size must be at least 1")
    coords = np.asarray(coords, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    d2 = _sq_dists(coords, query)
    members = np.empty((query.shape[0], k), dtype=np.int64)
    for i in range(query.shape[0]):
        row = d2[i]
        if not (row <= radius * radius).any():
            nearest = int(np.argmin(row))
            members[i] = nearest
            continue
        members[i] = _ball_row(row, k, radius, rng)
    return members


def ball_group(coords: np.ndarray, rp_indices, k: int, radius: float,
               rng: np.random.Generator) -> Grouping:
    """Radius grouping around representative points drawn from the same cloud.

    The RP itself is always a candidate, so rows are never empty; clusters
    smaller than ``k`` are padded by random doubling of in-range candidates.
    """
    rp_indices = np.asarray(rp_indices, dtype=np.int64)
    coords = np.asarray(coords, dtype=np.float64)
    members = ball_query(coords, coords[rp_indices], k, radius, rng)
    radii = np.full(rp_indices.shape[0], float(radius))
    return Grouping(rp_indices=rp_indices, member_indices=members, k=k, radii_used=radii)


def relative_offsets(coords: np.ndarray, member_indices: np.ndarray,
                     centers: np.ndarray) -> np.ndarray:
    """Member coordinates expressed relative to their cluster center, (M, K, D)."""
    coords = np.asarray(coords, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    return coords[member_indices] - centers[:, None, :]


def localize(coords: np.ndarray, grouping: Grouping) -> np.ndarray:
    """Shift every cluster into its RP's frame; the RP row becomes the zero vector."""
    coords = np.asarray(coords, dtype=np.float64)
    return relative_offsets(coords, grouping.member_indices, coords[grouping.rp_indices])

"""Synthetic radar scene generator and dataset serialization.

Scenes contain box-shaped moving objects (vehicles, pedestrians), wall-like
static structures and uniform clutter.  Four consecutive frames are rendered
from a moving ego vehicle with physically consistent, ego-motion-compensated
Doppler velocities and class-dependent radar cross sections.  Detections are
labeled through inflated bounding boxes combined with per-class speed
thresholds, then the frames are accumulated into one training cloud.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cloud import (
    EgoPose,
    Label,
    PointCloud,
    UNLABELED,
    accumulate_frames,
)

FRAME_DT = 0.05  # radar cycle time in seconds

# minimum absolute object speed for a box to count as moving
SPEED_THRESHOLDS = {Label.VEHICLE: 2.5, Label.PEDESTRIAN: 0.5}

RCS_MEANS = {Label.VEHICLE: 10.0, Label.PEDESTRIAN: -5.0, None: 0.0}
RCS_STDDEV = 5.0

DEFAULT_EXTENTS = {Label.VEHICLE: (4.5, 1.8), Label.PEDESTRIAN: (0.5, 0.5)}

DEFAULT_INFLATION = 1.25


class DataFormatError(ValueError):
    """Malformed dataset file."""


@dataclass(frozen=True)
class ObjectSpec:
    kind: Label
    center: tuple[float, float]
    heading: float = 0.0
    speed: float = 0.0
    extent: tuple[float, float] | None = None
    reflectivity_mean: float | None = None
    points_per_frame: int = 10

    def __post_init__(self):
        if self.kind not in (Label.VEHICLE, Label.PEDESTRIAN):
            raise ValueError("objects are vehicles or pedestrians")
        if self.extent is None:
            object.__setattr__(self, "extent", DEFAULT_EXTENTS[self.kind])
        if self.extent[0] <= 0 or self.extent[1] <= 0:
            raise ValueError("extent must be positive")
        if self.speed < 0:
            raise ValueError("speed must be non-negative")

    @property
    def velocity(self) -> np.ndarray:
        return self.speed * np.array([math.cos(self.heading), math.sin(self.heading)])

    @property
    def rcs_mean(self) -> float:
        if self.reflectivity_mean is not None:
            return self.reflectivity_mean
        return RCS_MEANS[self.kind]


@dataclass(frozen=True)
class WallSpec:
    start: tuple[float, float]
    end: tuple[float, float]
    points_per_frame: int = 10


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[ObjectSpec, ...] = ()
    walls: tuple[WallSpec, ...] = ()
    clutter_density: float = 75.0  # expected clutter detections per frame
    ego_speed: float = 8.0
    frames: int = 4
    field: tuple[float, float, float] = (4.0, 80.0, 36.0)  # x range and y half-width
    pos_noise: float = 0.15
    doppler_noise: float = 0.2
    rcs_stddev: float = RCS_STDDEV
    inflation: float = DEFAULT_INFLATION
    seed: int = 0

    def __post_init__(self):
        if self.frames < 1 or self.frames > 4:
            raise ValueError("scenes span 1 to 4 frames")
        if self.inflation < 1.0:
            raise ValueError("box inflation must be >= 1")


@dataclass
class BoundingBox:
    center: tuple[float, float]
    extent: tuple[float, float]
    heading: float
    kind: Label
    speed: float = 0.0
    inflation: float = DEFAULT_INFLATION
    dynamic: bool = False

    def contains(self, xy: np.ndarray) -> np.ndarray:
        """Inflated point-in-box test in the box frame."""
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        c, s = math.cos(self.heading), math.sin(self.heading)
        dx = xy[:, 0] - self.center[0]
        dy = xy[:, 1] - self.center[1]
        bx = c * dx + s * dy
        by = -s * dx + c * dy
        half_l = 0.5 * self.extent[0] * self.inflation
        half_w = 0.5 * self.extent[1] * self.inflation
        return (np.abs(bx) <= half_l) & (np.abs(by) <= half_w)


def simulate_doppler(point, object_velocity, ego_velocity_residual=(0.0, 0.0)) -> float:
    """Compensated radial velocity of a reflection at ``point`` (sensor at origin).

    With full ego-motion compensation the residual is zero and static points
    return exactly 0.
    """
    p = np.asarray(point, dtype=np.float64)
    norm = math.hypot(p[0], p[1])
    if norm == 0.0:
        return 0.0
    rel = np.asarray(object_velocity, dtype=np.float64) - np.asarray(
        ego_velocity_residual, dtype=np.float64)
    return float((rel[0] * p[0] + rel[1] * p[1]) / norm)


def sample_rcs(kind: Label | None, rng: np.random.Generator,
               stddev: float = RCS_STDDEV, mean: float | None = None,
               size=None):
    """Gaussian radar cross section in dBsm with class-dependent mean."""
    if mean is None:
        mean = RCS_MEANS[kind]
    return mean + stddev * rng.standard_normal(size)


def _dynamic(kind: Label, speed: float) -> bool:
    return speed > SPEED_THRESHOLDS[kind]


def label_detections(pc: PointCloud, boxes, object_speeds) -> PointCloud:
    """Assign labels through inflated boxes plus per-class speed thresholds.

    A detection inside a box takes the box's class only if the object's
    absolute speed exceeds the class threshold, otherwise it stays static.
    Overlaps resolve to the box with the nearest center.
    """
    boxes = list(boxes)
    speeds = [float(s) for s in object_speeds]
    if len(boxes) != len(speeds):
        raise ValueError("one speed per box is required")
    xy = np.stack([pc.x, pc.y], axis=1)
    labels = np.full(pc.n, int(Label.STATIC), dtype=np.int64)
    best_d2 = np.full(pc.n, np.inf)
    for box, speed in zip(boxes, speeds):
        inside = box.contains(xy)
        if not inside.any():
            continue
        d2 = (xy[:, 0] - box.center[0]) ** 2 + (xy[:, 1] - box.center[1]) ** 2
        take = inside & (d2 < best_d2)
        label = int(box.kind) if _dynamic(box.kind, speed) else int(Label.STATIC)
        labels[take] = label
        best_d2[take] = d2[take]
    return PointCloud(pc.x, pc.y, pc.v_r, pc.sigma, pc.frame_age, labels)


def _object_box(obj: ObjectSpec, center: np.ndarray, inflation: float) -> BoundingBox:
    return BoundingBox(center=(float(center[0]), float(center[1])), extent=obj.extent,
                       heading=obj.heading, kind=obj.kind, speed=obj.speed,
                       inflation=inflation, dynamic=_dynamic(obj.kind, obj.speed))


def _facing_perimeter(obj: ObjectSpec, center: np.ndarray, sensor: np.ndarray,
                      count: int, rng: np.random.Generator) -> np.ndarray:
    """Sample points uniformly on the box edges whose outward normal faces the sensor."""
    half_l, half_w = 0.5 * obj.extent[0], 0.5 * obj.extent[1]
    c, s = math.cos(obj.heading), math.sin(obj.heading)
    rot = np.array([[c, -s], [s, c]])
    to_sensor = rot.T @ (sensor - center)
    # edges in the box frame: (anchor, direction, length, outward normal)
    edges = [
        (np.array([half_l, -half_w]), np.array([0.0, 1.0]), 2 * half_w, np.array([1.0, 0.0])),
        (np.array([-half_l, -half_w]), np.array([0.0, 1.0]), 2 * half_w, np.array([-1.0, 0.0])),
        (np.array([-half_l, half_w]), np.array([1.0, 0.0]), 2 * half_l, np.array([0.0, 1.0])),
        (np.array([-half_l, -half_w]), np.array([1.0, 0.0]), 2 * half_l, np.array([0.0, -1.0])),
    ]
    facing = [e for e in edges if float(e[3] @ to_sensor) > 0.0]
    if not facing:
        facing = edges
    lengths = np.array([e[2] for e in facing])
    weights = lengths / lengths.sum()
    pick = rng.choice(len(facing), size=count, p=weights)
    u = rng.random(count)
    pts = np.empty((count, 2))
    for i, (edge_idx, frac) in enumerate(zip(pick, u)):
        anchor, direction, length, _normal = facing[edge_idx]
        pts[i] = anchor + frac * length * direction
    return center + pts @ rot.T


def generate_scene(spec: SceneSpec) -> tuple[list[PointCloud], list[EgoPose], list[BoundingBox]]:
    """Render the scene into per-frame labeled clouds plus compensation poses.

    Frames are ordered oldest to newest; coordinates are in each frame's own
    ego frame and the returned poses map them into the newest frame.  The
    returned boxes describe the newest frame.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.frames
    x_min, x_max, y_half = spec.field
    frames, poses = [], []
    newest_boxes: list[BoundingBox] = []
    for i in range(n):
        t = (i - (n - 1)) * FRAME_DT
        ego = np.array([spec.ego_speed * t, 0.0])
        xs, ys, vs, ss = [], [], [], []
        boxes_t, speeds_t = [], []
        for obj in spec.objects:
            center_t = np.asarray(obj.center, dtype=np.float64) + obj.velocity * t
            pts = _facing_perimeter(obj, center_t, ego, obj.points_per_frame, rng)
            pts_noisy = pts + spec.pos_noise * rng.standard_normal(pts.shape)
            rel = pts - ego
            v_r = np.array([simulate_doppler(p, obj.velocity) for p in rel])
            v_r += spec.doppler_noise * rng.standard_normal(v_r.shape)
            rcs = sample_rcs(obj.kind, rng, spec.rcs_stddev, obj.rcs_mean,
                             size=obj.points_per_frame)
            xs.append(pts_noisy[:, 0] - ego[0])
            ys.append(pts_noisy[:, 1] - ego[1])
            vs.append(v_r)
            ss.append(np.atleast_1d(rcs))
            boxes_t.append(_object_box(obj, center_t - ego, spec.inflation))
            speeds_t.append(obj.speed)
        n_clutter = int(rng.poisson(spec.clutter_density)) if spec.clutter_density > 0 else 0
        if n_clutter:
            cx = rng.uniform(x_min, x_max, n_clutter)
            cy = rng.uniform(-y_half, y_half, n_clutter)
            xs.append(cx)
            ys.append(cy)
            vs.append(spec.doppler_noise * rng.standard_normal(n_clutter))
            ss.append(np.atleast_1d(sample_rcs(None, rng, spec.rcs_stddev, size=n_clutter)))
        for wall in spec.walls:
            u = rng.random(wall.points_per_frame)
            start = np.asarray(wall.start, dtype=np.float64)
            end = np.asarray(wall.end, dtype=np.float64)
            pts = start + u[:, None] * (end - start)
            pts += spec.pos_noise * rng.standard_normal(pts.shape)
            xs.append(pts[:, 0] - ego[0])
            ys.append(pts[:, 1] - ego[1])
            vs.append(spec.doppler_noise * rng.standard_normal(wall.points_per_frame))
            ss.append(np.atleast_1d(sample_rcs(None, rng, spec.rcs_stddev,
                                               size=wall.points_per_frame)))
        if not xs:
            raise ValueError("scene produced an empty frame; add objects, walls or clutter")
        cloud = PointCloud(np.concatenate(xs), np.concatenate(ys),
                           np.concatenate(vs), np.concatenate(ss))
        frames.append(label_detections(cloud, boxes_t, speeds_t))
        poses.append(EgoPose(tx=float(ego[0]), ty=float(ego[1]), theta=0.0))
        if i == n - 1:
            newest_boxes = boxes_t
    return frames, poses, newest_boxes


@dataclass
class SceneRecord:
    """One stored scene: the accumulated labeled cloud plus its provenance."""

    cloud: PointCloud
    poses: list[EgoPose]
    boxes: list[BoundingBox]
    seed: int


def build_scene(spec: SceneSpec) -> SceneRecord:
    frames, poses, boxes = generate_scene(spec)
    cloud = accumulate_frames(frames, poses)
    return SceneRecord(cloud=cloud, poses=poses, boxes=boxes, seed=spec.seed)


# ---------------------------------------------------------------------------
# randomized corpora


@dataclass(frozen=True)
class SceneTemplate:
    """Randomization ranges for corpus generation.

    Defaults target roughly 184 detections per frame (736 accumulated) with
    a heavy static majority.
    """

    n_vehicles: tuple[int, int] = (1, 3)
    n_pedestrians: tuple[int, int] = (0, 2)
    vehicle_speed: tuple[float, float] = (0.0, 14.0)
    pedestrian_speed: tuple[float, float] = (0.0, 2.0)
    vehicle_points: int = 14
    pedestrian_points: int = 6
    clutter_density: float = 72.0
    n_walls: tuple[int, int] = (1, 3)
    wall_points: int = 30
    ego_speed: tuple[float, float] = (0.0, 10.0)
    field: tuple[float, float, float] = (4.0, 80.0, 36.0)
    pos_noise: float = 0.15
    doppler_noise: float = 0.2
    frames: int = 4

    def scale(self, factor: float) -> "SceneTemplate":
        """Smaller or larger variant with the same composition."""
        return replace(
            self,
            vehicle_points=max(1, round(self.vehicle_points * factor)),
            pedestrian_points=max(1, round(self.pedestrian_points * factor)),
            clutter_density=self.clutter_density * factor,
            wall_points=max(1, round(self.wall_points * factor)),
        )


def scene_spec_from_template(template: SceneTemplate, seed: int) -> SceneSpec:
    """Draw one concrete scene configuration from the template ranges."""
    rng = np.random.default_rng(seed)
    x_min, x_max, y_half = template.field
    objects = []
    n_veh = int(rng.integers(template.n_vehicles[0], template.n_vehicles[1] + 1))
    n_ped = int(rng.integers(template.n_pedestrians[0], template.n_pedestrians[1] + 1))
    for _ in range(n_veh):
        objects.append(ObjectSpec(
            kind=Label.VEHICLE,
            center=(float(rng.uniform(x_min + 6, x_max - 10)),
                    float(rng.uniform(-y_half + 6, y_half - 6))),
            heading=float(rng.uniform(-math.pi, math.pi)),
            speed=float(rng.uniform(*template.vehicle_speed)),
            points_per_frame=template.vehicle_points,
        ))
    for _ in range(n_ped):
        objects.append(ObjectSpec(
            kind=Label.PEDESTRIAN,
            center=(float(rng.uniform(x_min + 4, x_max - 30)),
                    float(rng.uniform(-y_half + 4, y_half - 4))),
            heading=float(rng.uniform(-math.pi, math.pi)),
            speed=float(rng.uniform(*template.pedestrian_speed)),
            points_per_frame=template.pedestrian_points,
        ))
    walls = []
    n_walls = int(rng.integers(template.n_walls[0], template.n_walls[1] + 1))
    for _ in range(n_walls):
        sx = float(rng.uniform(x_min, x_max - 20))
        sy = float(rng.uniform(-y_half, y_half))
        angle = float(rng.uniform(-math.pi, math.pi))
        length = float(rng.uniform(10.0, 30.0))
        walls.append(WallSpec(
            start=(sx, sy),
            end=(sx + length * math.cos(angle), sy + length * math.sin(angle)),
            points_per_frame=template.wall_points,
        ))
    return SceneSpec(
        objects=tuple(objects),
        walls=tuple(walls),
        clutter_density=template.clutter_density,
        ego_speed=float(rng.uniform(*template.ego_speed)),
        frames=template.frames,
        field=template.field,
        pos_noise=template.pos_noise,
        doppler_noise=template.doppler_noise,
        seed=int(rng.integers(0, 2 ** 31 - 1)),
    )


def generate_dataset(template: SceneTemplate, n_scenes: int, seed: int) -> list[SceneRecord]:
    """Deterministic corpus: per-scene seeds derive from one splittable root seed."""
    root = np.random.SeedSequence(seed)
    records = []
    for child in root.spawn(n_scenes):
        scene_seed = int(child.generate_state(1)[0])
        records.append(build_scene(scene_spec_from_template(template, scene_seed)))
    return records


# ---------------------------------------------------------------------------
# statistics and serialization


@dataclass(frozen=True)
class ClassStats:
    counts: tuple[int, int, int]  # static, vehicle, pedestrian
    fractions: tuple[float, float, float]

    @property
    def total(self) -> int:
        return sum(self.counts)


def dataset_stats(clouds) -> ClassStats:
    """Per-class detection counts and fractions over labeled clouds."""
    counts = np.zeros(3, dtype=np.int64)
    for cloud in clouds:
        if cloud.labels is None:
            continue
        labeled = cloud.labels[cloud.labels != UNLABELED]
        counts += np.bincount(labeled, minlength=3)[:3]
    total = int(counts.sum())
    if total == 0:
        raise ValueError("no labeled detections in the dataset")
    fractions = counts / total
    return ClassStats(counts=tuple(int(c) for c in counts),
                      fractions=tuple(float(f) for f in fractions))


def _fmt(value: float) -> str:
    return format(float(value), ".9g")


def scene_file_name(index: int) -> str:
    return f"scene_{index:05d}.txt"


def meta_file_name(index: int) -> str:
    return f"scene_{index:05d}.meta"


def write_dataset(records, out_dir) -> None:
    """Write one text file plus sidecar metadata per scene.

    Scene lines are ``frame_age,x,y,v_r,sigma,label`` with 9 significant
    digits; the sidecar stores the generator seed, the four ego poses and the
    ground-truth boxes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(records):
        cloud = rec.cloud
        labels = cloud.labels if cloud.labels is not None else np.full(cloud.n, UNLABELED)
        lines = []
        for j in range(cloud.n):
            lines.append(
                f"{int(cloud.frame_age[j])},{_fmt(cloud.x[j])},{_fmt(cloud.y[j])},"
                f"{_fmt(cloud.v_r[j])},{_fmt(cloud.sigma[j])},{int(labels[j])}")
        (out / scene_file_name(i)).write_text("\n".join(lines) + "\n")
        meta = [f"seed {rec.seed}"]
        for fi, pose in enumerate(rec.poses):
            meta.append(f"pose {fi} {_fmt(pose.tx)} {_fmt(pose.ty)} {_fmt(pose.theta)}")
        for box in rec.boxes:
            meta.append(
                f"box {int(box.kind)} {_fmt(box.center[0])} {_fmt(box.center[1])} "
                f"{_fmt(box.extent[0])} {_fmt(box.extent[1])} {_fmt(box.heading)} "
                f"{_fmt(box.speed)} {int(box.dynamic)} {_fmt(box.inflation)}")
        (out / meta_file_name(i)).write_text("\n".join(meta) + "\n")


def read_scene_file(path) -> PointCloud:
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        raise DataFormatError(f"{path}: empty scene file")
    ages, xs, ys, vs, ss, labels = [], [], [], [], [], []
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise DataFormatError(f"{path}:{ln}: expected 6 fields, got {len(parts)}")
        try:
            ages.append(int(parts[0]))
            xs.append(float(parts[1]))
            ys.append(float(parts[2]))
            vs.append(float(parts[3]))
            ss.append(float(parts[4]))
            labels.append(int(parts[5]))
        except ValueError as exc:
            raise DataFormatError(f"{path}:{ln}: {exc}") from None
    labels_arr = np.asarray(labels)
    try:
        return PointCloud(xs, ys, vs, ss, ages,
                          None if (labels_arr == UNLABELED).all() else labels_arr)
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def read_meta_file(path) -> tuple[int, list[EgoPose], list[BoundingBox]]:
    path = Path(path)
    seed = 0
    poses: list[tuple[int, EgoPose]] = []
    boxes: list[BoundingBox] = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "seed":
                seed = int(parts[1])
            elif parts[0] == "pose":
                poses.append((int(parts[1]), EgoPose(float(parts[2]), float(parts[3]),
                                                     float(parts[4]))))
            elif parts[0] == "box":
                boxes.append(BoundingBox(
                    center=(float(parts[2]), float(parts[3])),
                    extent=(float(parts[4]), float(parts[5])),
                    heading=float(parts[6]), kind=Label(int(parts[1])),
                    speed=float(parts[7]), dynamic=bool(int(parts[8])),
                    inflation=float(parts[9])))
            else:
                raise DataFormatError(f"{path}:{ln}: unknown record {parts[0]!r}")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, DataFormatError):
                raise
            raise DataFormatError(f"{path}:{ln}: {exc}") from None
    poses.sort(key=lambda item: item[0])
    return seed, [p for _i, p in poses], boxes


def read_dataset(data_dir) -> list[SceneRecord]:
    """Load every scene in a dataset directory, ordered by file name."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataFormatError(f"{data_dir}: not a dataset directory")
    scene_files = sorted(data_dir.glob("scene_*.txt"))
    if not scene_files:
        raise DataFormatError(f"{data_dir}: no scene files found")
    records = []
    for scene_path in scene_files:
        cloud = read_scene_file(scene_path)
        meta_path = scene_path.with_suffix(".meta")
        seed, poses, boxes = (0, [], [])
        if meta_path.exists():
            seed, poses, boxes = read_meta_file(meta_path)
        records.append(SceneRecord(cloud=cloud, poses=poses, boxes=boxes, seed=seed))
    return records

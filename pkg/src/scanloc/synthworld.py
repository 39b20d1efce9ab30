"""Procedural desk-scale world and an analytic ray-cast LiDAR simulator.

A scene is a ground plane (z = 0) populated with axis-aligned boxes and
vertical cylinders. Primitives are kept clear of a closed road loop so that
trajectories generated along that loop never start inside an obstacle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import PlanarPose, PointCloud, normalize_angle


@dataclass(frozen=True)
class Box:
    center: tuple[float, float]
    half_size: tuple[float, float]
    height: float


@dataclass(frozen=True)
class Cylinder:
    center: tuple[float, float]
    radius: float
    height: float


@dataclass(frozen=True)
class Scene:
    seed: int
    extent: float
    boxes: tuple[Box, ...]
    cylinders: tuple[Cylinder, ...]
    road_half_width: float = 4.0

    @property
    def primitives(self) -> tuple:
        return self.boxes + self.cylinders

    def contains(self, x: float, y: float) -> bool:
        h = self.extent / 2.0
        return -h <= x <= h and -h <= y <= h

    def inside_primitive(self, x: float, y: float) -> bool:
        for b in self.boxes:
            if abs(x - b.center[0]) <= b.half_size[0] and abs(y - b.center[1]) <= b.half_size[1]:
                return True
        for c in self.cylinders:
            if math.hypot(x - c.center[0], y - c.center[1]) <= c.radius:
                return True
        return False


@dataclass(frozen=True)
class SensorConfig:
    n_beams_h: int = 360
    n_beams_v: int = 16
    elevation_min: float = math.radians(-25.0)
    elevation_max: float = math.radians(5.0)
    max_range: float = 80.0
    height: float = 1.5
    range_noise: float = 0.0

    def elevations(self) -> np.ndarray:
        return np.linspace(self.elevation_min, self.elevation_max, self.n_beams_v)

    def azimuths(self) -> np.ndarray:
        return np.arange(self.n_beams_h) * (2.0 * math.pi / self.n_beams_h)


def road_loop(extent: float, n: int = 2000) -> np.ndarray:
    """Dense polyline (closed, counter-clockwise) of the road used by trajectories.

    A rounded rectangle spanning 60% of the extent, sampled uniformly by arc length.
    """
    a = 0.3 * extent
    b = 0.2 * extent
    r = 0.35 * b
    # rounded rectangle as the superellipse-free union of straights and arcs
    segs = []
    corners = [(a - r, b - r, 0.0), (-a + r, b - r, 0.5 * math.pi),
               (-a + r, -b + r, math.pi), (a - r, -b + r, 1.5 * math.pi)]
    for i, (cx, cy, start) in enumerate(corners):
        t = np.linspace(start, start + 0.5 * math.pi, 64, endpoint=False)
        segs.append(np.column_stack([cx + r * np.cos(t), cy + r * np.sin(t)]))
        nx, ny, _ = corners[(i + 1) % 4]
        end = start + 0.5 * math.pi
        p0 = np.array([cx + r * math.cos(end), cy + r * math.sin(end)])
        p1 = np.array([nx + r * math.cos(end), ny + r * math.sin(end)])
        s = np.linspace(0.0, 1.0, 64, endpoint=False)[:, None]
        segs.append(p0 + s * (p1 - p0))
    # start the loop in the middle of the right-hand straight
    poly = np.vstack(segs)
    poly = np.roll(poly, 64 * 7 + 32, axis=0)
    closed = np.vstack([poly, poly[:1]])
    seglen = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    s_new = np.linspace(0.0, cum[-1], n, endpoint=False)
    return np.column_stack([np.interp(s_new, cum, closed[:, 0]),
                            np.interp(s_new, cum, closed[:, 1])])


def _loop_length(loop: np.ndarray) -> float:
    closed = np.vstack([loop, loop[:1]])
    return float(np.linalg.norm(np.diff(closed, axis=0), axis=1).sum())


def _distance_to_polyline(loop: np.ndarray, x: float, y: float) -> float:
    return float(np.min(np.hypot(loop[:, 0] - x, loop[:, 1] - y)))


def generate_scene(seed: int, extent: float = 120.0, n_primitives: int = 160,
                   road_half_width: float = 4.0) -> Scene:
    """Deterministic random scene of boxes and cylinders kept off the road loop."""
    if not extent > 0:
        raise ValueError("extent must be positive")
    if n_primitives < 1:
        raise ValueError("n_primitives must be at least 1")
    rng = np.random.default_rng(seed)
    loop = road_loop(extent)
    half = extent / 2.0
    boxes, cylinders = [], []
    attempts = 0
    while len(boxes) + len(cylinders) < n_primitives:
        attempts += 1
        if attempts > 200 * n_primitives:
            raise RuntimeError("could not place primitives; reduce n_primitives or grow extent")
        cx, cy = rng.uniform(-half, half, size=2)
        if rng.random() < 0.6:
            hx, hy = rng.uniform(0.5, 6.0, size=2)
            height = rng.uniform(1.0, 12.0)
            clearance = math.hypot(hx, hy)
            if _distance_to_polyline(loop, cx, cy) < road_half_width + clearance:
                continue
            boxes.append(Box((float(cx), float(cy)), (float(hx), float(hy)), float(height)))
        else:
            radius = rng.uniform(0.2, 2.0)
            height = rng.uniform(1.0, 10.0)
            if _distance_to_polyline(loop, cx, cy) < road_half_width + radius:
                continue
            cylinders.append(Cylinder((float(cx), float(cy)), float(radius), float(height)))
    return Scene(seed, float(extent), tuple(boxes), tuple(cylinders), road_half_width)


def _ray_directions(sensor: SensorConfig, heading: float) -> tuple[np.ndarray, np.ndarray]:
    """Unit ray directions in the sensor frame and in the world frame, (n_v*n_h, 3)."""
    el = sensor.elevations()
    az = sensor.azimuths()
    e, a = np.meshgrid(el, az, indexing="ij")
    e, a = e.ravel(), a.ravel()
    local = np.column_stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])
    c, s = math.cos(heading), math.sin(heading)
    world = np.column_stack([c * local[:, 0] - s * local[:, 1],
                             s * local[:, 0] + c * local[:, 1],
                             local[:, 2]])
    return local, world


def _hit_boxes(origin: np.ndarray, d: np.ndarray, boxes) -> np.ndarray:
    if not boxes:
        return np.full(len(d), np.inf)
    lo = np.array([[b.center[0] - b.half_size[0], b.center[1] - b.half_size[1], 0.0]
                   for b in boxes])
    hi = np.array([[b.center[0] + b.half_size[0], b.center[1] + b.half_size[1], b.height]
                   for b in boxes])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d  # (R, 3)
        t1 = (lo[None, :, :] - origin) * inv[:, None, :]
        t2 = (hi[None, :, :] - origin) * inv[:, None, :]
    # axis-parallel rays: slab test reduces to an inside/outside check
    parallel = d[:, None, :] == 0.0
    inside = (origin >= lo[None]) & (origin <= hi[None])
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = tmin.max(axis=2)
    t_far = tmax.min(axis=2)
    hit = (t_near <= t_far) & (t_near > 0.0)
    return np.where(hit, t_near, np.inf).min(axis=1)


def _hit_cylinders(origin: np.ndarray, d: np.ndarray, cylinders) -> np.ndarray:
    if not cylinders:
        return np.full(len(d), np.inf)
    cx = np.array([c.center[0] for c in cylinders])
    cy = np.array([c.center[1] for c in cylinders])
    rad = np.array([c.radius for c in cylinders])
    top = np.array([c.height for c in cylinders])
    ox = origin[0] - cx
    oy = origin[1] - cy
    dx, dy, dz = d[:, 0:1], d[:, 1:2], d[:, 2:3]
    a = dx * dx + dy * dy
    b = 2.0 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - rad * rad
    disc = b * b - 4.0 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = (-b - np.sqrt(disc)) / (2.0 * a)
    z_side = origin[2] + t_side * dz
    side_ok = (disc >= 0) & (a > 0) & (t_side > 0) & (z_side >= 0.0) & (z_side <= top)
    best = np.where(side_ok, t_side, np.inf)
    # top cap
    with np.errstate(divide="ignore", invalid="ignore"):
        t_cap = (top - origin[2]) / dz
    px = ox + t_cap * dx
    py = oy + t_cap * dy
    cap_ok = (dz != 0) & (t_cap > 0) & (px * px + py * py <= rad * rad)
    best = np.minimum(best, np.where(cap_ok, t_cap, np.inf))
    return best.min(axis=1)


def cast_rays(scene: Scene, origin: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Distance along each unit direction to the first surface (inf on miss)."""
    origin = np.asarray(origin, dtype=np.float64)
    d = directions
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(d[:, 2] < 0, -origin[2] / d[:, 2], np.inf)
    t = np.minimum(t_ground, _hit_boxes(origin, d, scene.boxes))
    return np.minimum(t, _hit_cylinders(origin, d, scene.cylinders))


def simulate_scan(scene: Scene, pose: PlanarPose, sensor: SensorConfig = SensorConfig(),
                  noise_seed: int | None = None) -> PointCloud:
    """Ray-cast one sweep from ``pose``; returns hits in the sensor frame.

    Beams are ordered zenith-major (top-down elevation index, then azimuth).
    Misses beyond ``max_range`` produce no point.
    """
    if not scene.contains(pose.x, pose.y):
        raise ValueError(f"pose ({pose.x:.2f}, {pose.y:.2f}) outside scene extent")
    local, world = _ray_directions(sensor, pose.theta)
    origin = np.array([pose.x, pose.y, sensor.height])
    t = cast_rays(scene, origin, world)
    keep = t <= sensor.max_range
    t = t[keep]
    if sensor.range_noise > 0:
        rng = np.random.default_rng(noise_seed)
        t = t + rng.normal(0.0, sensor.range_noise, size=t.shape)
    pts = local[keep] * t[:, None]
    if len(pts) == 0:
        raise ValueError("scan produced no returns")
    return PointCloud(pts)


@dataclass
class Trajectory:
    poses: list[PlanarPose]
    timestamps: np.ndarray
    laps: np.ndarray
    place_radius: float = 1.5
    revisits: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.poses)


def lap_poses(loop: np.ndarray, spacing: float, lateral_offset: float = 0.0,
              phase: float = 0.0, heading_jitter: float = 0.0,
              rng: np.random.Generator | None = None) -> list[PlanarPose]:
    """Poses every ``spacing`` meters along the loop, shifted sideways by ``lateral_offset``."""
    closed = np.vstack([loop, loop[:1]])
    seglen = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    length = cum[-1]
    n = int(math.floor(length / spacing))
    poses = []
    for i in range(n):
        s = (phase + i * spacing) % length
        x = np.interp(s, cum, closed[:, 0])
        y = np.interp(s, cum, closed[:, 1])
        ds = 0.25
        x2 = np.interp((s + ds) % length, cum, closed[:, 0])
        y2 = np.interp((s + ds) % length, cum, closed[:, 1])
        heading = math.atan2(y2 - y, x2 - x)
        # left normal
        nx, ny = -math.sin(heading), math.cos(heading)
        jitter = rng.uniform(-heading_jitter, heading_jitter) if rng is not None else 0.0
        poses.append(PlanarPose(x + lateral_offset * nx, y + lateral_offset * ny,
                                heading + jitter))
    return poses


@dataclass
class Survey:
    """Pose plan of a two-lap drive plus an extra training lap.

    ``trajectory`` holds lap 1 followed by lap 2 at dense spacing, with revisit
    pairs (lap-2 index, lap-1 index). Map places are every ``stride``-th lap-1
    pose, queries every ``stride``-th lap-2 pose; ``train`` is all of lap 1
    plus a third lap offset to the other side of the road.
    """
    trajectory: Trajectory
    stride: int
    map: list[PlanarPose]
    query: list[PlanarPose]
    train: list[PlanarPose]


def plan_survey(scene: Scene, n_places: int = 50, max_spacing: float = 1.0,
                lateral_offset: float = 0.6, heading_jitter: float = math.radians(5.0),
                place_radius: float = 1.5, seed: int = 0) -> Survey:
    """Plan map, query and training poses along the road loop of ``scene``."""
    if n_places < 1:
        raise ValueError("n_places must be at least 1")
    rng = np.random.default_rng([seed, 31])
    loop = road_loop(scene.extent)
    length = _loop_length(loop)
    stride = max(1, math.ceil(length / n_places / max_spacing))
    spacing = length / (n_places * stride)
    lap1 = lap_poses(loop, spacing)[:n_places * stride]
    lap2 = lap_poses(loop, spacing, lateral_offset=lateral_offset, phase=0.5 * spacing,
                     heading_jitter=heading_jitter, rng=rng)[:n_places * stride]
    lap3 = lap_poses(loop, max_spacing, lateral_offset=-lateral_offset, phase=0.5 * max_spacing,
                     heading_jitter=heading_jitter, rng=rng)
    poses = lap1 + lap2
    laps = np.array([0] * len(lap1) + [1] * len(lap2))
    timestamps = np.arange(len(poses), dtype=np.float64) * 0.1
    xy1 = np.array([[p.x, p.y] for p in lap1])
    revisits = []
    for j, p in enumerate(lap2):
        d = np.hypot(xy1[:, 0] - p.x, xy1[:, 1] - p.y)
        i = int(np.argmin(d))
        if d[i] < place_radius:
            revisits.append((len(lap1) + j, i))
    traj = Trajectory(poses, timestamps, laps, place_radius, revisits)
    return Survey(traj, stride, lap1[::stride], lap2[::stride], lap1 + lap3)


def generate_dataset(scene: Scene, poses, sensor: SensorConfig = SensorConfig()):
    """One simulated scan per pose, paired with its exact ground truth."""
    out = []
    for i, pose in enumerate(poses):
        if scene.inside_primitive(pose.x, pose.y):
            raise ValueError(f"pose {i} lies inside a primitive")
        out.append((simulate_scan(scene, pose, sensor, noise_seed=scene.seed * 100003 + i), pose))
    return out


def surface_residual(scene: Scene, world_points: np.ndarray) -> np.ndarray:
    """Distance from each world-frame point to the closest primitive surface or ground."""
    res = np.abs(world_points[:, 2])
    x, y, z = world_points[:, 0], world_points[:, 1], world_points[:, 2]
    for b in scene.boxes:
        # distance to box surface (points are outside or on it)
        lo = np.array([b.center[0] - b.half_size[0], b.center[1] - b.half_size[1], 0.0])
        hi = np.array([b.center[0] + b.half_size[0], b.center[1] + b.half_size[1], b.height])
        q = np.maximum(np.maximum(lo - world_points, world_points - hi), 0.0)
        outside = np.linalg.norm(q, axis=1)
        inside_d = np.min(np.minimum(world_points - lo, hi - world_points), axis=1)
        d = np.where(outside > 0, outside, np.abs(inside_d))
        res = np.minimum(res, d)
    for c in scene.cylinders:
        rxy = np.hypot(x - c.center[0], y - c.center[1])
        side = np.where((z >= 0) & (z <= c.height), np.abs(rxy - c.radius), np.inf)
        cap = np.where(rxy <= c.radius, np.abs(z - c.height), np.inf)
        res = np.minimum(res, np.minimum(side, cap))
    return res


def yaw_between(a: PlanarPose, b: PlanarPose) -> float:
    """Heading discrepancy b.theta - a.theta, wrapped."""
    return normalize_angle(b.theta - a.theta)

"""Point clouds, planar poses and spherical range-image projection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


def normalize_angle(angle):
    """Wrap an angle (scalar or array) into [-pi, pi)."""
    a = np.mod(np.asarray(angle, dtype=np.float64) + math.pi, TWO_PI) - math.pi
    # fmod rounding can land exactly on +pi
    a = np.where(a >= math.pi, a - TWO_PI, a)
    a = np.where(a < -math.pi, -math.pi, a)
    if a.ndim == 0:
        return float(a)
    return a


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N points in the sensor frame (meters), optional intensity in [0, 1]."""

    points: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if len(pts) == 0:
            raise ValueError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            bad = int(np.argwhere(~np.isfinite(pts))[0, 0])
            raise ValueError(f"non-finite coordinate at point {bad}")
        object.__setattr__(self, "points", _readonly(pts))
        if self.intensity is not None:
            inten = np.array(self.intensity, dtype=np.float64, copy=True).reshape(-1)
            if len(inten) != len(pts):
                raise ValueError(
                    f"intensity count {len(inten)} does not match point count {len(pts)}"
                )
            if not np.all(np.isfinite(inten)):
                raise ValueError("non-finite intensity value")
            object.__setattr__(self, "intensity", _readonly(inten))

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        if not np.array_equal(self.points, other.points):
            return False
        if self.intensity is None or other.intensity is None:
            return self.intensity is None and other.intensity is None
        return np.array_equal(self.intensity, other.intensity)

    @property
    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.points, axis=1)

    def with_points(self, points: np.ndarray) -> PointCloud:
        return PointCloud(points, self.intensity)


@dataclass(frozen=True)
class PlanarPose:
    """3-DoF pose: position (x, y) in meters and heading theta in [-pi, pi)."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        x, y, th = float(self.x), float(self.y), float(self.theta)
        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(th)):
            raise ValueError(f"non-finite pose ({x}, {y}, {th})")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "theta", normalize_angle(th))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def matrix(self) -> np.ndarray:
        """Homogeneous 3x3 matrix mapping sensor-frame xy into the parent frame."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def compose(self, other: PlanarPose) -> PlanarPose:
        """self * other: apply ``other`` first, then ``self``."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return PlanarPose(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    def inverse(self) -> PlanarPose:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return PlanarPose(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.theta)

    def distance_to(self, other: PlanarPose) -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate_yaw(cloud: PointCloud, delta: float) -> PointCloud:
    """Rotate every point counter-clockwise about the z-axis by ``delta``."""
    if not math.isfinite(delta):
        raise ValueError("rotation angle must be finite")
    return cloud.with_points(cloud.points @ rotation_z(delta).T)


def transform_planar(cloud: PointCloud, pose: PlanarPose) -> PointCloud:
    """Rotate by ``pose.theta`` about z, then translate by (x, y, 0)."""
    pts = cloud.points @ rotation_z(pose.theta).T
    pts = pts + np.array([pose.x, pose.y, 0.0])
    return cloud.with_points(pts)


@dataclass(frozen=True, eq=False)
class RangeImage:
    """H x W normalized range grid; rows are zenith bins (top row = zenith_max),
    columns are azimuth bins centred on multiples of ``2*pi/W``. Zero = no return."""

    data: np.ndarray
    zenith_min: float
    zenith_max: float
    max_range: float

    def __post_init__(self):
        d = np.array(self.data, dtype=np.float64, copy=True)
        if d.ndim != 2:
            raise ValueError(f"range image must be 2-D, got shape {d.shape}")
        h, w = d.shape
        if h < 2 or w < 8:
            raise ValueError(f"range image must be at least 2x8, got {h}x{w}")
        if not np.all((d >= 0.0) & (d <= 1.0)):
            raise ValueError("range image cells must lie in [0, 1]")
        object.__setattr__(self, "data", _readonly(d))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def azimuth_resolution(self) -> float:
        return TWO_PI / self.width

    def ranges(self) -> np.ndarray:
        """Denormalized ranges in meters (0 where empty)."""
        return self.data * self.max_range

    def __eq__(self, other) -> bool:
        if not isinstance(other, RangeImage):
            return NotImplemented
        return (
            np.array_equal(self.data, other.data)
            and self.zenith_min == other.zenith_min
            and self.zenith_max == other.zenith_max
            and self.max_range == other.max_range
        )


QUANT_LEVELS = 65535


def pixel_coordinates(points: np.ndarray, height: int, width: int,
                      zenith_min: float, zenith_max: float):
    """Row/column of each point and a mask of points inside the zenith span."""
    r = np.linalg.norm(points, axis=1)
    valid = r > 0.0
    safe_r = np.where(valid, r, 1.0)
    azimuth = np.arctan2(points[:, 1], points[:, 0])
    zenith = np.arcsin(np.clip(points[:, 2] / safe_r, -1.0, 1.0))
    col = np.rint(azimuth / (TWO_PI / width)).astype(np.int64) % width
    row = np.floor((zenith_max - zenith) / (zenith_max - zenith_min) * height).astype(np.int64)
    inside = valid & (zenith >= zenith_min) & (zenith <= zenith_max)
    row = np.clip(row, 0, height - 1)
    return row, col, r, inside


def project_scan(cloud: PointCloud, height: int, width: int, zenith_min: float,
                 zenith_max: float, max_range: float, quantize: bool = True) -> RangeImage:
    """Spherical projection of a scan onto an H x W range image.

    Each cell keeps the nearest return binned into it, stored as
    ``min(range, max_range) / max_range``. With ``quantize`` the value is
    rounded to 16-bit levels (never below one level, 0 stays "no return").
    """
    if not max_range > 0:
        raise ValueError("max_range must be positive")
    if not zenith_min < zenith_max:
        raise ValueError("zenith_min must be below zenith_max")
    if width < 8 or height < 2:
        raise ValueError(f"image must be at least 2x8, got {height}x{width}")
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(cloud)
    row, col, r, inside = pixel_coordinates(cloud.points, height, width, zenith_min, zenith_max)
    value = np.minimum(r[inside], max_range) / max_range
    if quantize:
        value = np.maximum(np.rint(value * QUANT_LEVELS), 1.0) / QUANT_LEVELS
    flat = np.full(height * width, np.inf)
    np.minimum.at(flat, row[inside] * width + col[inside], value)
    flat[np.isinf(flat)] = 0.0
    return RangeImage(flat.reshape(height, width), zenith_min, zenith_max, max_range)


def shift_columns(img: RangeImage, k: int) -> RangeImage:
    """Circularly shift azimuth columns by ``k`` (matches rotate_yaw by k bins)."""
    return RangeImage(np.roll(img.data, int(k), axis=1), img.zenith_min, img.zenith_max,
                      img.max_range)


@dataclass(frozen=True)
class ProjectionGeometry:
    """Image size and zenith span shared by every projection in a run."""

    height: int = 16
    width: int = 360
    zenith_min: float = math.radians(-26.0)
    zenith_max: float = math.radians(6.0)
    max_range: float = 80.0
    quantize: bool = field(default=True)

    def project(self, cloud: PointCloud) -> RangeImage:
        return project_scan(cloud, self.height, self.width, self.zenith_min,
                            self.zenith_max, self.max_range, self.quantize)

    @property
    def azimuth_resolution(self) -> float:
        return TWO_PI / self.width


SYNTHETIC_GEOMETRY = ProjectionGeometry()
KITTI_GEOMETRY = ProjectionGeometry(64, 720, math.radians(-25.0), math.radians(3.0), 120.0)

"""KITTI-odometry style scan/pose I/O, map/query splitting and triplet sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .geometry import PlanarPose, PointCloud, normalize_angle


@dataclass
class ScanRecord:
    id: int
    cloud: PointCloud | None
    gt_pose: PlanarPose
    timestamp: float = 0.0


@dataclass(frozen=True)
class TripletSample:
    anchor: int
    similar: int
    dissimilar: int
    delta_theta_gt: float


@dataclass(frozen=True)
class SamplingConfig:
    similar_radius: float = 1.5
    hard_negative_min: float = 2.0
    hard_negative_max: float = 5.0
    query_spacing: float = 3.0

    def __post_init__(self):
        if not 0 < self.similar_radius < self.hard_negative_min <= self.hard_negative_max:
            raise ValueError(
                "need 0 < similar_radius < hard_negative_min <= hard_negative_max, got "
                f"{self.similar_radius}, {self.hard_negative_min}, {self.hard_negative_max}"
            )
        if self.query_spacing <= 0:
            raise ValueError("query_spacing must be positive")


# -- scan files --------------------------------------------------------------

def write_kitti_scan(path, cloud: PointCloud):
    """Write ``cloud`` as packed little-endian float32 (x, y, z, reflectance)."""
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    data = np.column_stack([cloud.points, inten]).astype("<f4")
    Path(path).write_bytes(data.tobytes())


def load_kitti_scan(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) == 0:
        raise ValueError(f"{path}: empty scan file")
    if len(raw) % 16:
        whole = len(raw) // 16 * 16
        raise ValueError(f"{path}: truncated record at byte offset {whole} "
                         f"(file size {len(raw)} is not a multiple of 16)")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    bad = ~np.isfinite(data)
    if bad.any():
        rec = int(np.argwhere(bad)[0, 0])
        raise ValueError(f"{path}: non-finite value in record {rec} (byte offset {rec * 16})")
    return PointCloud(data[:, :3], data[:, 3])


def scan_filename(scan_id: int) -> str:
    return f"{scan_id:06d}.bin"


# -- pose files --------------------------------------------------------------

def planar_from_matrix(m: np.ndarray, frame: str = "lidar") -> PlanarPose:
    """Reduce a 3x4 rigid transform to (x, y, yaw).

    ``lidar`` frame: z is up, x forward. ``camera`` frame (KITTI ground truth):
    y is down, z forward, so the ground plane is (z, -x).
    """
    m = np.asarray(m, dtype=np.float64).reshape(3, 4)
    if frame == "lidar":
        return PlanarPose(m[0, 3], m[1, 3], math.atan2(m[1, 0], m[0, 0]))
    if frame == "camera":
        return PlanarPose(m[2, 3], -m[0, 3], math.atan2(-m[0, 2], m[2, 2]))
    raise ValueError(f"unknown pose frame {frame!r}")


def matrix_from_planar(pose: PlanarPose) -> np.ndarray:
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    return np.array([[c, -s, 0.0, pose.x], [s, c, 0.0, pose.y], [0.0, 0.0, 1.0, 0.0]])


def load_pose_file(path, frame: str = "lidar") -> list[PlanarPose]:
    poses = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 12:
                raise ValueError(f"{path}:{lineno}: expected 12 values, got {len(parts)}")
            try:
                vals = np.array([float(p) for p in parts])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if not np.all(np.isfinite(vals)):
                raise ValueError(f"{path}:{lineno}: non-finite value")
            poses.append(planar_from_matrix(vals, frame))
    return poses


def write_pose_file(path, poses):
    with open(path, "w", encoding="utf-8") as f:
        for p in poses:
            f.write(" ".join(repr(float(v)) for v in matrix_from_planar(p).ravel()) + "\n")


# -- manifests ---------------------------------------------------------------

def read_manifest(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_manifest(path, entries: dict):
    with open(path, "w", encoding="utf-8") as f:
        for k, v in entries.items():
            f.write(f"{k}={v}\n")


def sampling_config_from_manifest(entries: dict[str, str]) -> SamplingConfig:
    kw = {fld.name: float(entries[fld.name]) for fld in fields(SamplingConfig)
          if fld.name in entries}
    return SamplingConfig(**kw)


def load_sequence(root, scan_dir: str, pose_file: str, frame: str = "lidar",
                  times_file: str | None = None, lazy: bool = False) -> list[ScanRecord]:
    """Load a KITTI-layout sequence: ``<scan_dir>/<id:06>.bin`` plus a pose file."""
    root = Path(root)
    poses = load_pose_file(root / pose_file, frame)
    if times_file:
        times = np.loadtxt(root / times_file, ndmin=1)
    else:
        times = np.arange(len(poses), dtype=np.float64)
    records = []
    for i, pose in enumerate(poses):
        path = root / scan_dir / scan_filename(i)
        cloud = None if lazy else load_kitti_scan(path)
        records.append(ScanRecord(i, cloud, pose, float(times[i])))
    return records


def write_sequence(root, scan_dir: str, pose_file: str, records, times_file: str | None = None):
    root = Path(root)
    (root / scan_dir).mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(records):
        write_kitti_scan(root / scan_dir / scan_filename(i), rec.cloud)
    write_pose_file(root / pose_file, [r.gt_pose for r in records])
    if times_file:
        with open(root / times_file, "w", encoding="utf-8") as f:
            for r in records:
                f.write(f"{r.timestamp!r}\n")


def load_dataset(manifest_path, split: str, lazy: bool = False) -> list[ScanRecord]:
    """Load split ``split`` (e.g. map, query, train) named in a dataset manifest."""
    manifest_path = Path(manifest_path)
    entries = read_manifest(manifest_path)
    key = f"{split}_scans"
    if key not in entries:
        raise KeyError(f"{manifest_path}: no split {split!r}")
    return load_sequence(manifest_path.parent, entries[key], entries[f"{split}_poses"],
                         entries.get("pose_frame", "lidar"), entries.get(f"{split}_times"),
                         lazy=lazy)


# -- splitting and sampling -------------------------------------------------

def _positions(records) -> np.ndarray:
    return np.array([[r.gt_pose.x, r.gt_pose.y] for r in records], dtype=np.float64)


def pairwise_distances(xy: np.ndarray) -> np.ndarray:
    diff = xy[:, None, :] - xy[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=-1))


def split_map_query(records, config: SamplingConfig = SamplingConfig(),
                    split_time: float | None = None, map_spacing: float | None = None,
                    one_query_per_place: bool = False):
    """Split a time-ordered sequence into map and query sets.

    Records before ``split_time`` form the map, thinned greedily so that map
    places are at least ``map_spacing`` apart (default twice the similarity
    radius, which admits at most one true positive per query). Later records
    become queries when exactly one map place lies within the similarity radius
    and every earlier query is at least ``query_spacing`` away.
    """
    records = sorted(records, key=lambda r: (r.timestamp, r.id))
    if split_time is None:
        ts = np.array([r.timestamp for r in records])
        split_time = 0.5 * (ts.min() + ts.max())
    if map_spacing is None:
        map_spacing = 2.0 * config.similar_radius
    map_recs, later = [], []
    for r in records:
        (map_recs if r.timestamp < split_time else later).append(r)
    kept = []
    for r in map_recs:
        if all(r.gt_pose.distance_to(k.gt_pose) >= map_spacing for k in kept):
            kept.append(r)
    if not kept or not later:
        raise ValueError("insufficient revisits: need records on both sides of split_time")
    map_xy = _positions(kept)
    queries, used = [], set()
    for r in later:
        d = np.hypot(map_xy[:, 0] - r.gt_pose.x, map_xy[:, 1] - r.gt_pose.y)
        close = np.flatnonzero(d < config.similar_radius)
        if len(close) != 1:
            continue
        if one_query_per_place and int(close[0]) in used:
            continue
        if any(r.gt_pose.distance_to(q.gt_pose) < config.query_spacing for q in queries):
            continue
        queries.append(r)
        used.add(int(close[0]))
    if not queries:
        raise ValueError("insufficient revisits: no query has exactly one map place "
                         f"within {config.similar_radius} m")
    return kept, queries


def sample_triplets(records, config: SamplingConfig, stage: int, count: int,
                    rng_seed: int) -> list[TripletSample]:
    """Draw ``count`` (anchor, similar, dissimilar) triplets by ground-truth distance.

    Stage 1 draws the dissimilar uniformly from everything outside the
    similarity radius; stage 2 (hard negatives) only from the
    [hard_negative_min, hard_negative_max] ring around the anchor.
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if len(records) < 3:
        raise ValueError("triplet sampling needs at least 3 records")
    xy = _positions(records)
    dist = pairwise_distances(xy)
    n = len(records)
    eye = np.eye(n, dtype=bool)
    similar = (dist < config.similar_radius) & ~eye
    if stage == 1:
        dissimilar = dist >= config.similar_radius
    else:
        dissimilar = (dist >= config.hard_negative_min) & (dist <= config.hard_negative_max)
    has_sim = similar.any(axis=1)
    has_dis = dissimilar.any(axis=1)
    anchors = np.flatnonzero(has_sim & has_dis)
    if len(anchors) == 0:
        if not has_sim.any():
            raise ValueError(f"no anchor has a similar record within {config.similar_radius} m")
        band = ("beyond the similarity radius" if stage == 1 else
                f"within [{config.hard_negative_min}, {config.hard_negative_max}] m")
        raise ValueError(f"no anchor with a similar record has a dissimilar record {band}")
    sim_lists = [np.flatnonzero(similar[a]) for a in range(n)]
    dis_lists = [np.flatnonzero(dissimilar[a]) for a in range(n)]
    rng = np.random.default_rng([rng_seed, stage])
    out = []
    for _ in range(count):
        a = int(anchors[rng.integers(len(anchors))])
        s = int(sim_lists[a][rng.integers(len(sim_lists[a]))])
        d = int(dis_lists[a][rng.integers(len(dis_lists[a]))])
        dtheta = normalize_angle(records[s].gt_pose.theta - records[a].gt_pose.theta)
        out.append(TripletSample(records[a].id, records[s].id, records[d].id, dtheta))
    return out


def check_triplet(records, t: TripletSample, config: SamplingConfig, stage: int) -> bool:
    by_id = {r.id: r for r in records}
    pa, ps, pd = (by_id[i].gt_pose for i in (t.anchor, t.similar, t.dissimilar))
    if t.anchor == t.similar or not pa.distance_to(ps) < config.similar_radius:
        return False
    dd = pa.distance_to(pd)
    if stage == 1:
        return dd >= config.similar_radius
    return config.hard_negative_min <= dd <= config.hard_negative_max


"""Descriptor map, place retrieval and the full scan-to-pose localization pipeline."""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .descriptor import DESCRIPTOR_DIM, DescriptorExtractor
from .geometry import PlanarPose, PointCloud
from .kdtree import KDTree
from .registration import IcpConfig, TargetIndex, icp_point_to_plane

MAP_MAGIC = b"SLMP"
MAP_VERSION = 1


class DescriptorMap:
    """Immutable table of (id, v, w, x, y) with a kd-tree over the place descriptors."""

    def __init__(self, ids, v, w, xy):
        ids = np.array(ids, dtype=np.int64)
        v = np.array(v, dtype=np.float64)
        w = np.array(w, dtype=np.float64)
        xy = np.array(xy, dtype=np.float64)
        if len(ids) == 0:
            raise ValueError("descriptor map needs at least one entry")
        if len(set(ids.tolist())) != len(ids):
            raise ValueError("map entry ids must be unique")
        if v.shape != (len(ids), DESCRIPTOR_DIM) or w.shape != v.shape or xy.shape != (len(ids), 2):
            raise ValueError("inconsistent map entry shapes")
        for a in (ids, v, w, xy):
            a.setflags(write=False)
        self.ids, self.v, self.w, self.xy = ids, v, w, xy
        self._row = {int(i): r for r, i in enumerate(ids)}
        self.tree = KDTree(v, ids)

    def __len__(self) -> int:
        return len(self.ids)

    def row(self, entry_id: int) -> int:
        return self._row[int(entry_id)]

    def query_knn(self, v, k: int = 1) -> list[tuple[int, float]]:
        """Exact k nearest entries as (id, distance), ascending; ties go to the lower id."""
        if not 1 <= k <= len(self):
            raise ValueError(f"k must be in [1, {len(self)}], got {k}")
        d, ids = self.tree.query(v, k)
        return [(int(i), float(x)) for i, x in zip(ids, d)]

    def save(self, path):
        with open(path, "wb") as f:
            f.write(MAP_MAGIC)
            f.write(struct.pack("<II", MAP_VERSION, DESCRIPTOR_DIM))
            f.write(struct.pack("<Q", len(self)))
            for r in range(len(self)):
                f.write(struct.pack("<q", int(self.ids[r])))
                f.write(struct.pack("<2d", *self.xy[r]))
                f.write(np.ascontiguousarray(self.v[r], dtype="<f8").tobytes())
                f.write(np.ascontiguousarray(self.w[r], dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> DescriptorMap:
        raw = Path(path).read_bytes()
        if raw[:4] != MAP_MAGIC:
            raise ValueError(f"{path}: not a descriptor map (bad magic)")
        version, dim = struct.unpack_from("<II", raw, 4)
        if version != MAP_VERSION or dim != DESCRIPTOR_DIM:
            raise ValueError(f"{path}: unsupported map version {version} / dimension {dim}")
        (count,) = struct.unpack_from("<Q", raw, 12)
        rec = np.dtype([("id", "<i8"), ("xy", "<f8", 2), ("v", "<f8", dim), ("w", "<f8", dim)])
        if len(raw) != 20 + count * rec.itemsize:
            raise ValueError(f"{path}: size does not match entry count {count}")
        arr = np.frombuffer(raw, dtype=rec, offset=20, count=count)
        return cls(arr["id"], arr["v"], arr["w"], arr["xy"])


def build_map(records, extractor: DescriptorExtractor) -> DescriptorMap:
    """Project and describe every map scan, then index the place descriptors."""
    records = list(records)
    if not records:
        raise ValueError("cannot build a map from an empty set of scans")
    d = extractor.transform([r.cloud for r in records])
    return DescriptorMap([r.id for r in records], d[:, :DESCRIPTOR_DIM], d[:, DESCRIPTOR_DIM:],
                         [[r.gt_pose.x, r.gt_pose.y] for r in records])


@dataclass
class LocalizationResult:
    candidates: list[tuple[int, float]]
    candidate_id: int
    candidate_xy: tuple[float, float]
    delta_theta: float
    initial_pose: PlanarPose
    refined_pose: PlanarPose | None
    icp_converged: bool
    icp_iterations: int = 0
    timings_ms: dict[str, float] = field(default_factory=dict)

    @property
    def pose(self) -> PlanarPose:
        """Refined pose when ICP converged, otherwise the initial guess."""
        return self.refined_pose if self.refined_pose is not None else self.initial_pose


STAGES = ("projection", "descriptor", "retrieval", "yaw", "icp")


class GlobalLocalizer(BaseEstimator):
    """Scan-to-pose localizer over a map of described scans.

    ``fit`` takes the map scans (records with clouds and ground-truth poses);
    ``predict`` returns an (N, 3) array of (x, y, theta) for query clouds.
    """

    def __init__(self, extractor: DescriptorExtractor | None = None, k: int = 1,
                 icp_config: IcpConfig = IcpConfig(), refine: bool = True):
        self.extractor = extractor
        self.k = k
        self.icp_config = icp_config
        self.refine = refine

    def fit(self, X, y=None, descriptor_map: DescriptorMap | None = None):
        if self.extractor is None:
            raise ValueError("GlobalLocalizer needs a fitted DescriptorExtractor")
        check_is_fitted(self.extractor, "network_")
        records = list(X)
        self.map_ = descriptor_map if descriptor_map is not None else build_map(records,
                                                                                self.extractor)
        self.map_records_ = {r.id: r for r in records}
        missing = [int(i) for i in self.map_.ids if int(i) not in self.map_records_]
        if missing:
            raise ValueError(f"map entries without scans: {missing[:5]}")
        self._targets = {}
        return self

    def _target(self, entry_id: int) -> TargetIndex:
        if entry_id not in self._targets:
            rec = self.map_records_[entry_id]
            local = TargetIndex(rec.cloud.points, k=self.icp_config.normal_neighbors)
            self._targets[entry_id] = local.transformed(rec.gt_pose)
        return self._targets[entry_id]

    def kneighbors(self, X, k: int | None = None):
        """Candidate ids and descriptor distances for each query, shape (N, k)."""
        check_is_fitted(self, "map_")
        k = self.k if k is None else k
        d = self.extractor.transform(X)
        ids, dist = [], []
        for row in d:
            hits = self.map_.query_knn(row[:DESCRIPTOR_DIM], k)
            ids.append([h[0] for h in hits])
            dist.append([h[1] for h in hits])
        return np.array(dist), np.array(ids, dtype=np.int64)

    def localize(self, cloud: PointCloud, k: int | None = None) -> LocalizationResult:
        check_is_fitted(self, "map_")
        k = self.k if k is None else k
        timings = {}
        t0 = time.perf_counter()
        img = self.extractor.geometry.project(cloud)
        t1 = time.perf_counter()
        desc = self.extractor.transform(img.data[None])[0]
        v, w = desc[:DESCRIPTOR_DIM], desc[DESCRIPTOR_DIM:]
        t2 = time.perf_counter()
        cands = self.map_.query_knn(v, k)
        t3 = time.perf_counter()
        best = cands[0][0]
        row = self.map_.row(best)
        # heading of the map scan minus heading of the query
        dtheta = self.extractor.estimate_yaw(w, self.map_.w[row])
        t4 = time.perf_counter()
        nn_pose = self.map_records_[best].gt_pose
        initial = PlanarPose(nn_pose.x, nn_pose.y, nn_pose.theta - dtheta)
        refined, converged, iters = None, False, 0
        if self.refine:
            res = icp_point_to_plane(cloud, self._target(best), initial, self.icp_config)
            converged, iters = res.converged, res.iterations
            refined = res.pose if res.converged else None
        t5 = time.perf_counter()
        for name, a, b in zip(STAGES, (t0, t1, t2, t3, t4), (t1, t2, t3, t4, t5)):
            timings[name] = 1e3 * (b - a)
        return LocalizationResult(cands, best, (float(self.map_.xy[row, 0]),
                                                float(self.map_.xy[row, 1])),
                                  dtheta, initial, refined, converged, iters, timings)

    def predict(self, X) -> np.ndarray:
        out = []
        for cloud in X:
            cloud = getattr(cloud, "cloud", cloud)
            p = self.localize(cloud).pose
            out.append([p.x, p.y, p.theta])
        return np.array(out)

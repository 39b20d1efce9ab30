"""Planar (x, y, yaw) point-to-plane ICP with PCA normal estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PlanarPose


@dataclass(frozen=True)
class IcpConfig:
    """ICP settings.

    The correspondence gate starts at ``initial_correspondence_distance`` and
    shrinks geometrically to ``max_correspondence_distance`` over
    ``annealing_iterations``; convergence is only declared at the final gate.
    A wide early gate lets the yaw pull in from further away.
    """

    max_iterations: int = 80
    max_correspondence_distance: float = 1.0
    initial_correspondence_distance: float = 8.0
    annealing_iterations: int = 20
    translation_tolerance: float = 1e-4
    rotation_tolerance: float = 1e-4
    normal_neighbors: int = 10
    min_correspondences: int = 10

    def __post_init__(self):
        for name in ("max_iterations", "max_correspondence_distance", "translation_tolerance",
                     "rotation_tolerance", "normal_neighbors", "min_correspondences"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.initial_correspondence_distance < self.max_correspondence_distance:
            raise ValueError("initial_correspondence_distance must be >= max_correspondence_distance")
        if self.annealing_iterations < 0:
            raise ValueError("annealing_iterations must be non-negative")

    def gate(self, iteration: int) -> float:
        """Correspondence distance cap for a 0-based iteration."""
        r0, r1 = self.initial_correspondence_distance, self.max_correspondence_distance
        if iteration >= self.annealing_iterations or r0 == r1:
            return r1
        return max(r1, r0 * (r1 / r0) ** (iteration / self.annealing_iterations))


@dataclass(frozen=True)
class IcpResult:
    pose: PlanarPose
    converged: bool
    iterations: int
    residual: float
    n_correspondences: int = 0


def estimate_normals(points, k: int = 10, viewpoint=(0.0, 0.0, 0.0), rank_tol: float = 1e-10):
    """Unit normals from the smallest principal axis of each k-neighbourhood.

    Normals are flipped to face ``viewpoint`` (the sensor origin by default).
    Returns ``(normals, valid)``; neighbourhoods of rank < 2 are marked invalid
    and their normal set to zero.
    """
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < k:
        raise ValueError(f"need at least {k} points for normal estimation, got {len(pts)}")
    _, idx = cKDTree(pts).query(pts, k=k)
    nb = pts[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    scale = np.maximum(evals[:, 2], 1e-300)
    valid = evals[:, 1] > rank_tol * scale
    valid &= evals[:, 2] > 0
    to_view = np.asarray(viewpoint, dtype=np.float64) - pts
    flip = (normals * to_view).sum(axis=1) < 0
    normals = np.where(flip[:, None], -normals, normals)
    normals[~valid] = 0.0
    return normals, valid


def _apply(pose: PlanarPose, pts: np.ndarray) -> np.ndarray:
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    out = np.empty_like(pts)
    out[:, 0] = c * pts[:, 0] - s * pts[:, 1] + pose.x
    out[:, 1] = s * pts[:, 0] + c * pts[:, 1] + pose.y
    out[:, 2] = pts[:, 2]
    return out


def point_to_plane_system(src: np.ndarray, dst: np.ndarray, normals: np.ndarray):
    """Jacobian rows and residuals of n . (src - dst) w.r.t. a left increment (dx, dy, dtheta)."""
    r = ((src - dst) * normals).sum(axis=1)
    jac = np.column_stack([normals[:, 0], normals[:, 1],
                           normals[:, 1] * src[:, 0] - normals[:, 0] * src[:, 1]])
    return jac, r


def solve_increment(src: np.ndarray, dst: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Gauss-Newton step minimising sum (n . (R(d) src + t - dst))^2 to first order."""
    jac, r = point_to_plane_system(src, dst, normals)
    h = jac.T @ jac
    g = jac.T @ r
    delta, *_ = np.linalg.lstsq(h, -g, rcond=1e-12)
    return delta


def point_to_plane_cost(src, dst, normals) -> float:
    return float((((src - dst) * normals).sum(axis=1) ** 2).sum())


class TargetIndex:
    """Target cloud with precomputed normals and a 3-D kd-tree over valid points."""

    def __init__(self, points, normals=None, valid=None, k: int = 10,
                 viewpoint=(0.0, 0.0, 0.0)):
        pts = np.asarray(points, dtype=np.float64)
        if normals is None:
            normals, valid = estimate_normals(pts, k, viewpoint)
        keep = np.asarray(valid, dtype=bool)
        self.points = pts[keep]
        self.normals = np.asarray(normals)[keep]
        if len(self.points) == 0:
            raise ValueError("target has no valid normals")
        self.tree = cKDTree(self.points)

    def transformed(self, pose: PlanarPose) -> TargetIndex:
        """Same surface expressed in a parent frame via ``pose``."""
        c, s = math.cos(pose.theta), math.sin(pose.theta)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        out = TargetIndex.__new__(TargetIndex)
        out.points = _apply(pose, self.points)
        out.normals = self.normals @ rot.T
        out.tree = cKDTree(out.points)
        return out


def icp_point_to_plane(query, target, initial: PlanarPose = PlanarPose(),
                       config: IcpConfig = IcpConfig()) -> IcpResult:
    """Register ``query`` (sensor frame) onto ``target`` (points or a TargetIndex).

    Each iteration pairs every transformed query point with its nearest target
    point within the current distance gate and solves the 3x3 normal equations of the
    linearised point-to-plane cost. Stops when the increment falls below both
    tolerances (converged) or after ``max_iterations``.
    """
    q = np.asarray(getattr(query, "points", query), dtype=np.float64)
    if len(q) == 0:
        raise ValueError("query cloud is empty")
    if not isinstance(target, TargetIndex):
        target = TargetIndex(getattr(target, "points", target), k=config.normal_neighbors)
    pose = initial
    residual = math.inf
    n_corr = 0
    settled = False
    for it in range(1, config.max_iterations + 1):
        src = _apply(pose, q)
        gate = config.max_correspondence_distance if settled else config.gate(it - 1)
        dist, idx = target.tree.query(src, distance_upper_bound=gate)
        ok = np.isfinite(dist)
        n_corr = int(ok.sum())
        if n_corr < config.min_correspondences:
            return IcpResult(pose, False, it, residual, n_corr)
        s, d, n = src[ok], target.points[idx[ok]], target.normals[idx[ok]]
        jac, r = point_to_plane_system(s, d, n)
        residual = float(np.mean(np.abs(r)))
        h = jac.T @ jac
        if np.linalg.matrix_rank(h, tol=1e-9 * max(np.trace(h), 1e-300)) < 3:
            return IcpResult(pose, False, it, residual, n_corr)
        delta = np.linalg.solve(h, -(jac.T @ r))
        pose = PlanarPose(delta[0], delta[1], delta[2]).compose(pose)
        small = (math.hypot(delta[0], delta[1]) < config.translation_tolerance
                 and abs(delta[2]) < config.rotation_tolerance)
        if small and gate > config.max_correspondence_distance:
            # settled under the wide gate: finish at the final one
            settled = True
        elif small:
            src = _apply(pose, q)
            dist, idx = target.tree.query(src,
                                          distance_upper_bound=config.max_correspondence_distance)
            ok = np.isfinite(dist)
            if ok.any():
                _, r = point_to_plane_system(src[ok], target.points[idx[ok]],
                                             target.normals[idx[ok]])
                residual = float(np.mean(np.abs(r)))
            return IcpResult(pose, True, it, residual, int(ok.sum()))
    return IcpResult(pose, False, config.max_iterations, residual, n_corr)

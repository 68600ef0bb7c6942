"""Rigid alignment of a predicted mesh onto a ground-truth point cloud.

Landmark Procrustes gives the starting pose; trimmed point-to-plane ICP
(GT points against the mesh surface) refines it.  Transforms are returned
as ``(R, t)`` acting on the mesh: ``aligned = V @ R.T + t``.
"""
from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateLandmarks, IndexOutOfRange
from ..so3 import exp_so3
from .bvh import build_bvh, query_bvh

INLIER_FRACTION = 0.9
MAX_ITERATIONS = 50
RMSE_RTOL = 1e-6


@dataclass
class RigidTransform:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def apply(self, points):
        return self.scale * (np.asarray(points, dtype=np.float64) @ self.R.T) + self.t

    def compose(self, other):
        """``self`` after ``other``."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def to_dict(self):
        return {"R": self.R.tolist(), "t": self.t.tolist(), "scale": self.scale}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["R"], dtype=np.float64), np.asarray(d["t"], dtype=np.float64),
                   float(d.get("scale", 1.0)))


def _check_spread(points, what):
    c = points - points.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    if s[0] <= 1e-12 or s[1] <= 1e-9 * s[0]:
        raise DegenerateLandmarks(f"{what} landmarks are coincident or collinear")


def procrustes(src, dst):
    """Least-squares rotation and translation taking ``src`` onto ``dst`` (no scale)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"expected matching (K, 3) arrays, got {src.shape} and {dst.shape}")
    if src.shape[0] < 3:
        raise DegenerateLandmarks(f"need at least 3 landmark pairs, got {src.shape[0]}")
    _check_spread(src, "mesh")
    _check_spread(dst, "ground-truth")
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    H = (src - ms).T @ (dst - md)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, md - R @ ms)


def _point_to_plane_step(p, n, q):
    """Small motion (w, tau) of the mesh minimising sum (n . (p + w x p + tau - q))^2."""
    A = np.hstack([np.cross(p, n), n])
    r = np.einsum("ij,ij->i", n, q - p)
    sol, *_ = np.linalg.lstsq(A, r, rcond=None)
    return sol[:3], sol[3:]


def icp(vertices, triangles, gt_points, init=None, inlier_fraction=INLIER_FRACTION,
        max_iterations=MAX_ITERATIONS, rtol=RMSE_RTOL):
    """Trimmed point-to-plane ICP.  Returns ``(transform, rmse_trace)``."""
    T = init or RigidTransform()
    V0 = np.asarray(vertices, dtype=np.float64)
    q = np.asarray(gt_points, dtype=np.float64)
    keep = max(6, int(np.ceil(inlier_fraction * q.shape[0])))
    trace = []
    prev = None
    for _ in range(max_iterations):
        hit = query_bvh(build_bvh(T.apply(V0), triangles), q)
        order = np.argsort(hit.distance, kind="stable")[:keep]
        rmse = float(np.sqrt(np.mean(hit.distance[order] ** 2)))
        trace.append(rmse)
        if rmse == 0.0 or (prev is not None and abs(prev - rmse) <= rtol * prev):
            break
        prev = rmse
        w, tau = _point_to_plane_step(hit.point[order], hit.normal[order], q[order])
        dR = exp_so3(w)
        T = RigidTransform(dR @ T.R, dR @ T.t + tau)
    return T, trace


def rigid_align(vertices, triangles, gt, landmark_pairs, **icp_kw):
    """Landmark Procrustes then ICP.  ``landmark_pairs``: [(vertex id, gt xyz), ...]."""
    V = np.asarray(vertices, dtype=np.float64)
    if len(landmark_pairs) < 3:
        raise DegenerateLandmarks(f"need at least 3 landmark pairs, got {len(landmark_pairs)}")
    ids = np.array([int(i) for i, _ in landmark_pairs])
    if np.any(ids < 0) or np.any(ids >= V.shape[0]):
        raise IndexOutOfRange("landmark vertex id out of range")
    target = np.array([np.asarray(p, dtype=np.float64).reshape(3) for _, p in landmark_pairs])
    init = procrustes(V[ids], target)
    points = gt.points if hasattr(gt, "points") else np.asarray(gt)
    T, _ = icp(V, triangles, points, init=init, **icp_kw)
    return T

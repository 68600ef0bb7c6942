"""Pinhole camera.

Convention: camera looks down +z, +x right, +y down, pixel origin at the
top-left corner of the image, pixel (i, j) covers [i, i+1) x [j, j+1).
"""
import json
from dataclasses import dataclass

import numpy as np

from . import so3
from .errors import DimensionMismatch, NearZeroDepth

MIN_DEPTH = 1e-6


@dataclass
class CameraParams:
    rotation: np.ndarray         # axis-angle, radians
    translation: np.ndarray      # meters
    focal_length: float          # pixels
    principal_point: np.ndarray  # pixels

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.principal_point = np.asarray(self.principal_point, dtype=np.float64).reshape(2)
        self.focal_length = float(self.focal_length)

    def copy(self):
        return CameraParams(self.rotation.copy(), self.translation.copy(),
                            self.focal_length, self.principal_point.copy())

    def validate(self):
        values = np.concatenate([self.rotation, self.translation, self.principal_point, [self.focal_length]])
        if not np.all(np.isfinite(values)):
            raise ValueError("camera parameters must be finite")
        if self.focal_length <= 0:
            raise ValueError(f"focal_length must be positive, got {self.focal_length}")
        if np.linalg.norm(self.rotation) >= np.pi:
            raise ValueError("rotation angle must be below pi")
        return self

    def rotation_matrix(self):
        return so3.exp_so3(self.rotation)

    def to_camera(self, points):
        """World points (M, 3) to camera frame."""
        return np.asarray(points, dtype=np.float64) @ self.rotation_matrix().T + self.translation

    def to_dict(self):
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
                "focal_length": self.focal_length, "principal_point": self.principal_point.tolist()}

    @classmethod
    def from_dict(cls, d):
        try:
            cam = cls(d["rotation"], d["translation"], d["focal_length"], d["principal_point"])
        except KeyError as exc:
            raise DimensionMismatch(f"camera json missing key {exc}") from None
        except ValueError as exc:
            raise DimensionMismatch(f"camera json: {exc}") from None
        return cam.validate()

    @classmethod
    def frontal(cls, focal_length, width, height, distance):
        return cls(np.zeros(3), [0.0, 0.0, distance], focal_length, [width / 2.0, height / 2.0])


def save_camera(path, cam):
    with open(path, "w") as f:
        json.dump(cam.to_dict(), f, indent=2)


def load_camera(path):
    with open(path) as f:
        return CameraParams.from_dict(json.load(f))


def project_camera_frame(x_cam, focal_length, principal_point):
    """Pixel coordinates of camera-frame points; no depth check."""
    return focal_length * x_cam[:, :2] / x_cam[:, 2:3] + principal_point


def project(points, cam):
    """Project world points.

    Returns ``(pixels (M, 2), depth (M,))``.  Points at or behind the camera
    are not an error; callers test ``depth > 0``.
    """
    x_cam = cam.to_camera(points)
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = project_camera_frame(x_cam, cam.focal_length, cam.principal_point)
    return pix, x_cam[:, 2].copy()


def unproject(pixels, depth, cam):
    """Camera-frame points for pixels at known depth (inverse of projection)."""
    xy = (np.asarray(pixels, dtype=np.float64) - cam.principal_point) / cam.focal_length
    depth = np.asarray(depth, dtype=np.float64)
    return np.column_stack([xy * depth[:, None], depth])


def projection_point_jacobian(x_cam, focal_length):
    """d pixel / d x_cam, shape (M, 2, 3)."""
    inv_z = 1.0 / x_cam[:, 2]
    J = np.zeros((x_cam.shape[0], 2, 3))
    J[:, 0, 0] = focal_length * inv_z
    J[:, 1, 1] = focal_length * inv_z
    J[:, 0, 2] = -focal_length * x_cam[:, 0] * inv_z ** 2
    J[:, 1, 2] = -focal_length * x_cam[:, 1] * inv_z ** 2
    return J


@dataclass
class ProjectionJacobian:
    d_points: np.ndarray       # (M, 2, 3)
    d_rotation: np.ndarray     # (M, 2, 3)
    d_translation: np.ndarray  # (M, 2, 3)
    d_focal: np.ndarray        # (M, 2)
    d_principal: np.ndarray    # (M, 2, 2)


def project_jacobian(points, cam):
    points = np.asarray(points, dtype=np.float64)
    x_cam = cam.to_camera(points)
    if np.any(x_cam[:, 2] <= MIN_DEPTH):
        bad = int(np.argmax(x_cam[:, 2] <= MIN_DEPTH))
        raise NearZeroDepth(f"point {bad} has depth {x_cam[bad, 2]:.3g}")
    J_cam = projection_point_jacobian(x_cam, cam.focal_length)
    R = cam.rotation_matrix()
    d_points = J_cam @ R
    d_rotation = J_cam @ so3.rotate_jacobian(cam.rotation, points)
    M = points.shape[0]
    return ProjectionJacobian(
        d_points=d_points,
        d_rotation=d_rotation,
        d_translation=J_cam,
        d_focal=x_cam[:, :2] / x_cam[:, 2:3],
        d_principal=np.broadcast_to(np.eye(2), (M, 2, 2)).copy(),
    )

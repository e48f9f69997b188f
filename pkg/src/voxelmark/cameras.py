"""Pinhole cameras and per-pixel ray generation.

Poses follow the Blender/OpenGL convention: the 4x4 matrix maps camera
coordinates to world coordinates, with the camera looking down its local
-z axis, x to the right and y up.
"""

from dataclasses import dataclass, field

import numpy as np

ROTATION_TOL = 1e-6


class InvalidCamera(ValueError):
    """Raised for poses that are not rigid transforms or bad intrinsics."""


@dataclass
class Camera:
    width: int
    height: int
    fov_x: float
    pose: np.ndarray = field(repr=False)   # (4,4) world-from-camera

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        validate_pose(self.pose, tol=ROTATION_TOL)
        if not (0.0 < self.fov_x < np.pi):
            raise InvalidCamera(f"fov_x must be in (0, pi), got {self.fov_x}")
        if self.width < 1 or self.height < 1:
            raise InvalidCamera("image dimensions must be positive")

    @property
    def position(self):
        return self.pose[:3, 3]

    @property
    def rotation(self):
        return self.pose[:3, :3]


def validate_pose(pose, tol=ROTATION_TOL):
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise InvalidCamera(f"pose must be 4x4, got {pose.shape}")
    r = pose[:3, :3]
    err = np.max(np.abs(r.T @ r - np.eye(3)))
    if err > tol:
        raise InvalidCamera(f"rotation not orthonormal (error {err:.2e})")
    if np.linalg.det(r) < 0:
        raise InvalidCamera("improper rotation (determinant -1)")
    if np.max(np.abs(pose[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > tol:
        raise InvalidCamera("last pose row must be [0, 0, 0, 1]")
    return pose


def camera_rays(camera):
    """Per-pixel rays: ``(origins, directions)`` of shape (H, W, 3) each.

    Pixel-center convention: pixel (row, col) samples the point
    (col + 0.5, row + 0.5) on the image plane. Directions are unit norm.
    """
    w, h = camera.width, camera.height
    focal = (w / 2.0) / np.tan(camera.fov_x / 2.0)
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    x = (cols + 0.5 - w / 2.0) / focal
    y = -(rows + 0.5 - h / 2.0) / focal
    dirs_cam = np.stack([x, y, -np.ones_like(x)], axis=-1)
    dirs = dirs_cam @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    return origins, dirs


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World-from-camera pose for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise InvalidCamera("eye and target coincide")
    forward /= norm
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-12:
        # looking straight along the up axis; pick any perpendicular
        up = np.array([1.0, 0.0, 0.0])
        right = np.cross(forward, up)
        rnorm = np.linalg.norm(right)
    right /= rnorm
    cam_up = np.cross(right, forward)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = cam_up
    pose[:3, 2] = -forward     # camera looks down -z
    pose[:3, 3] = eye
    return pose

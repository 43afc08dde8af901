"""Closed-form geometric kernel: planes, reflections, mirrored cameras, and
the 3D->2D Gaussian projection.

Conventions (fixed once, used everywhere):
  * PoseTransform is world-to-camera. Camera frame is x-right, y-down,
    z-forward; a point is visible when its camera-space z exceeds znear.
  * Pixel (ix, iy) is sampled at integer coordinates (ix, iy); the principal
    point (cx, cy) is expressed on the same grid.
  * Planes are stored as (normal, offset) with n.p + offset == 0 on the
    plane; every consumer requires a unit normal.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InvalidPlaneError

DEGENERATE_NORMAL_EPS = 1e-12
UNIT_NORMAL_TOL = 1e-6


@dataclass(frozen=True)
class PlaneParam:
    """Infinite plane; points p on it satisfy normal . p + offset == 0."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3).copy()
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    def is_normalized(self, tol: float = UNIT_NORMAL_TOL) -> bool:
        return abs(float(np.linalg.norm(self.normal)) - 1.0) <= tol


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    znear: float = 0.01

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")
        if self.znear <= 0:
            raise ValueError("znear must be positive")


@dataclass(frozen=True)
class PoseTransform:
    """4x4 homogeneous world-to-camera transform.

    The rotation block may be improper (det -1): that is how a mirrored
    camera is represented, and the renderer accepts it unchanged.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(4, 4).copy()
        if not np.array_equal(m[3], np.array([0.0, 0.0, 0.0, 1.0])):
            raise ValueError("bottom row must be exactly (0, 0, 0, 1)")
        r = m[:3, :3]
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ValueError("rotation block is not orthogonal")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @property
    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def det_rotation(self) -> float:
        return float(np.linalg.det(self.rotation))

    def camera_to_world(self) -> np.ndarray:
        inv = np.eye(4)
        inv[:3, :3] = self.rotation.T
        inv[:3, 3] = self.camera_center
        return inv


@dataclass(frozen=True)
class ProjectedGaussian:
    """Image-plane footprint of one 3D Gaussian."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    view_depth: float


def normalize_plane(plane: PlaneParam) -> PlaneParam:
    """Scale (normal, offset) so the normal has unit length.

    The represented point set is unchanged. Raises InvalidPlaneError for a
    degenerate normal.
    """
    norm = float(np.linalg.norm(plane.normal))
    if norm <= DEGENERATE_NORMAL_EPS:
        raise InvalidPlaneError(f"plane normal has near-zero length {norm:g}")
    return PlaneParam(plane.normal / norm, plane.offset / norm)


def _require_normalized(plane: PlaneParam):
    if not plane.is_normalized():
        raise InvalidPlaneError(
            "operation requires a unit plane normal; call normalize_plane first"
        )


def plane_point_residual(plane: PlaneParam, point) -> float:
    """Signed distance n.p + offset; zero iff the point lies on the plane."""
    p = np.asarray(point, dtype=np.float64).reshape(3)
    return float(plane.normal @ p + plane.offset)


def reflect_point(plane: PlaneParam, point) -> np.ndarray:
    """Householder reflection p - 2 (n.p + d) n across a normalized plane."""
    p = np.asarray(point, dtype=np.float64).reshape(3)
    return p - 2.0 * (plane.normal @ p + plane.offset) * plane.normal


def mirror_transform(plane: PlaneParam) -> np.ndarray:
    """4x4 homogeneous reflection about a normalized plane.

    Involutive (T @ T == I) and improper (det of the 3x3 block is -1);
    points on the plane are fixed.
    """
    _require_normalized(plane)
    a, b, c = plane.normal
    d = plane.offset
    t = np.eye(4)
    t[:3, :3] -= 2.0 * np.outer(plane.normal, plane.normal)
    t[0, 3] = -2.0 * a * d
    t[1, 3] = -2.0 * b * d
    t[2, 3] = -2.0 * c * d
    return t


def mirror_camera(plane: PlaneParam, pose: PoseTransform) -> PoseTransform:
    """Pose of the virtual camera observed in the mirror.

    Mirroring the camera-to-world matrix by T and inverting collapses, for an
    involutive T, to post-composing the world-to-camera matrix with T. The
    result has an improper rotation block iff the input was proper.
    """
    t = mirror_transform(plane)
    return PoseTransform(pose.matrix @ t)


def perspective_jacobian(camera: CameraModel, t_cam) -> np.ndarray:
    """2x3 Jacobian of the pinhole map at camera-space point(s).

    Accepts a single (3,) point or an (N, 3) batch; returns (2, 3) or
    (N, 2, 3) accordingly.
    """
    pts = np.asarray(t_cam, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    inv_z = 1.0 / z
    j = np.zeros((pts.shape[0], 2, 3))
    j[:, 0, 0] = camera.fx * inv_z
    j[:, 0, 2] = -camera.fx * x * inv_z * inv_z
    j[:, 1, 1] = camera.fy * inv_z
    j[:, 1, 2] = -camera.fy * y * inv_z * inv_z
    return j[0] if single else j


def project_gaussians(
    camera: CameraModel,
    pose: PoseTransform,
    means: np.ndarray,
    covs: np.ndarray,
):
    """Project a batch of 3D Gaussians onto the image plane.

    Returns (mean2d (N,2), cov2d (N,2,2), view_depth (N,), valid (N,)) where
    valid is False for Gaussians at or behind the near plane. Invalid rows
    hold unspecified values and must be ignored by the caller. No low-pass
    floor is applied here; the rasterizer owns that.
    """
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    covs = np.asarray(covs, dtype=np.float64).reshape(-1, 3, 3)
    r = pose.rotation
    t = pose.translation
    t_cam = means @ r.T + t
    depth = t_cam[:, 2]
    valid = depth > camera.znear

    safe = t_cam.copy()
    safe[~valid, 2] = 1.0  # keep the math finite on culled rows
    inv_z = 1.0 / safe[:, 2]
    mean2d = np.empty((means.shape[0], 2))
    mean2d[:, 0] = camera.fx * safe[:, 0] * inv_z + camera.cx
    mean2d[:, 1] = camera.fy * safe[:, 1] * inv_z + camera.cy

    j = perspective_jacobian(camera, safe)
    m = j @ r  # (N, 2, 3): Jacobian composed with the view rotation
    cov2d = m @ covs @ m.transpose(0, 2, 1)
    return mean2d, cov2d, depth, valid


def project_gaussian(
    camera: CameraModel,
    pose: PoseTransform,
    mean,
    cov,
) -> ProjectedGaussian | None:
    """Single-Gaussian projection; returns None as the cull signal."""
    mean2d, cov2d, depth, valid = project_gaussians(
        camera, pose, np.asarray(mean).reshape(1, 3), np.asarray(cov).reshape(1, 3, 3)
    )
    if not valid[0]:
        return None
    return ProjectedGaussian(mean2d[0], cov2d[0], float(depth[0]))


def look_at_pose(eye, target, up=(0.0, 1.0, 0.0)) -> PoseTransform:
    """World-to-camera pose for a camera at `eye` looking at `target`.

    `up` is the world up direction; the camera frame is x-right, y-down,
    z-forward, so images render upright for worlds with +y up.
    """
    eye = np.asarray(eye, dtype=np.float64).reshape(3)
    target = np.asarray(target, dtype=np.float64).reshape(3)
    up = np.asarray(up, dtype=np.float64).reshape(3)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("eye and target coincide")
    fwd = fwd / n
    right = np.cross(fwd, up)
    rn = np.linalg.norm(right)
    if rn < 1e-12:
        raise ValueError("view direction is parallel to up")
    right = right / rn
    down = np.cross(fwd, right)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = down
    c2w[:3, 2] = fwd
    c2w[:3, 3] = eye
    w2c = np.eye(4)
    w2c[:3, :3] = c2w[:3, :3].T
    w2c[:3, 3] = -c2w[:3, :3].T @ eye
    return PoseTransform(w2c)


def plane_to_json(plane: PlaneParam) -> str:
    """Serialize a plane as {"normal": [a, b, c], "offset": d}, normalized."""
    p = normalize_plane(plane)
    return json.dumps({"normal": [float(v) for v in p.normal], "offset": p.offset})


def plane_from_json(text: str) -> PlaneParam:
    data = json.loads(text)
    try:
        plane = PlaneParam(np.array(data["normal"], dtype=np.float64), data["offset"])
    except (KeyError, TypeError) as exc:
        raise InvalidPlaneError(f"malformed plane JSON: {exc}") from exc
    return normalize_plane(plane)

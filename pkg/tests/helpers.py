"""Shared test utilities: scene factories, an independent per-pixel
reference renderer, and finite-difference helpers.

The dense renderer here is deliberately written from scratch (own
quaternion, projection, and SH math; no tile or radius culling) so it can
catch bugs that a shared-code oracle would reproduce.
"""
from __future__ import annotations

import numpy as np

from mirror_splat.geometry import CameraModel, PlaneParam, PoseTransform, look_at_pose
from mirror_splat.scene import GaussianScene

# Blending contract constants, restated independently of the package.
COV2D_FLOOR = 0.3
SIGMA_MAX = 0.999
T_CUTOFF = 1e-4
DEPTH_EPS = 1e-6

_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396)


def default_camera(width: int = 64, height: int = 64, f: float = 70.0,
                   znear: float = 0.01) -> CameraModel:
    return CameraModel(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                       width=width, height=height, znear=znear)


def identity_pose() -> PoseTransform:
    return PoseTransform(np.eye(4))


def random_pose(rng: np.random.Generator, target=(0.0, 0.0, 2.5),
                radius: float = 2.5) -> PoseTransform:
    v = rng.standard_normal(3)
    v /= np.linalg.norm(v)
    eye = np.asarray(target, dtype=np.float64) + radius * v
    up = rng.standard_normal(3)
    fwd = np.asarray(target) - eye
    # Reject ups parallel to the view direction.
    while np.linalg.norm(np.cross(fwd, up)) < 1e-6 * np.linalg.norm(up):
        up = rng.standard_normal(3)
    return look_at_pose(eye, target, up / np.linalg.norm(up))


def random_plane(rng: np.random.Generator) -> PlaneParam:
    n = rng.standard_normal(3)
    n /= np.linalg.norm(n)
    return PlaneParam(n, float(rng.uniform(-2.0, 2.0)))


def random_scene(rng: np.random.Generator, n: int, sh_degree: int = 0,
                 dtype=np.float32, center=(0.0, 0.0, 2.5), spread: float = 0.9,
                 scale_range=(-3.8, -1.4), opacity_range=(-2.0, 2.0),
                 mirror_range=(-4.0, 4.0)) -> GaussianScene:
    """Random but well-conditioned scene in front of the default camera."""
    k = (sh_degree + 1) ** 2
    positions = np.asarray(center) + rng.uniform(-spread, spread, size=(n, 3))
    quats = rng.standard_normal((n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = rng.uniform(-0.5, 1.2, size=(n, 3))
    if k > 1:
        sh[:, 1:, :] = rng.uniform(-0.15, 0.15, size=(n, k - 1, 3))
    return GaussianScene(
        positions=positions.astype(dtype),
        rotations=quats.astype(dtype),
        log_scales=rng.uniform(*scale_range, size=(n, 3)).astype(dtype),
        opacity_logits=rng.uniform(*opacity_range, size=n).astype(dtype),
        sh_coeffs=sh.astype(dtype),
        mirror_logits=rng.uniform(*mirror_range, size=n).astype(dtype),
        sh_degree=sh_degree,
    )


def _quat_to_rot(q):
    """Independent quaternion (w,x,y,z) to rotation matrix."""
    w, x, y, z = (np.asarray(q, dtype=np.float64)
                  / np.linalg.norm(q)).tolist()
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _sh_color(coeffs, d, degree):
    """Independent real-SH color: basis . coeffs + 0.5, clamped at 0."""
    x, y, z = d
    vals = [_C0]
    if degree >= 1:
        vals += [-_C1 * y, _C1 * z, -_C1 * x]
    if degree >= 2:
        vals += [_C2[0] * x * y, _C2[1] * y * z,
                 _C2[2] * (2 * z * z - x * x - y * y),
                 _C2[3] * x * z, _C2[4] * (x * x - y * y)]
    rgb = np.asarray(vals) @ np.asarray(coeffs, dtype=np.float64)[:len(vals)] + 0.5
    return np.maximum(rgb, 0.0)


def dense_reference_render(scene: GaussianScene, camera: CameraModel,
                           pose: PoseTransform, opacity_scale=None):
    """Per-pixel reference renderer with no tile or radius culling.

    Requires distinct view depths (ordering falls back to camera-space z
    only). Returns (color, mask, depth, alpha) in float64. Slow; keep the
    scenes and images small.
    """
    n = len(scene)
    h, w = camera.height, camera.width
    r = pose.matrix[:3, :3].astype(np.float64)
    t = pose.matrix[:3, 3].astype(np.float64)
    scale = (np.ones(n) if opacity_scale is None
             else np.asarray(opacity_scale, dtype=np.float64))

    rows = []
    for i in range(n):
        p_cam = r @ scene.positions[i].astype(np.float64) + t
        z = p_cam[2]
        if z <= camera.znear:
            continue
        mx = camera.fx * p_cam[0] / z + camera.cx
        my = camera.fy * p_cam[1] / z + camera.cy
        jac = np.array([
            [camera.fx / z, 0.0, -camera.fx * p_cam[0] / (z * z)],
            [0.0, camera.fy / z, -camera.fy * p_cam[1] / (z * z)],
        ])
        rq = _quat_to_rot(scene.rotations[i])
        s2 = np.exp(2.0 * scene.log_scales[i].astype(np.float64))
        sigma = rq @ np.diag(s2) @ rq.T
        m = jac @ r
        cov2 = m @ sigma @ m.T + COV2D_FLOOR * np.eye(2)
        det = cov2[0, 0] * cov2[1, 1] - cov2[0, 1] * cov2[1, 0]
        conic = np.array([cov2[1, 1], -cov2[0, 1], cov2[0, 0]]) / det

        cam_center = -r.T @ t
        rel = scene.positions[i].astype(np.float64) - cam_center
        dist = np.linalg.norm(rel)
        d = rel / dist if dist > 0 else np.array([0.0, 0.0, 1.0])
        color = _sh_color(scene.sh_coeffs[i], d, scene.sh_degree)
        alpha = float(1.0 / (1.0 + np.exp(-float(scene.opacity_logits[i]))))
        mirror = float(1.0 / (1.0 + np.exp(-float(scene.mirror_logits[i]))))
        rows.append((z, mx, my, conic, alpha * scale[i], color, mirror))
    rows.sort(key=lambda row: row[0])

    color = np.zeros((h, w, 3))
    mask = np.zeros((h, w))
    dsum = np.zeros((h, w))
    alpha_out = np.zeros((h, w))
    for py in range(h):
        for px in range(w):
            trans = 1.0
            for z, mx, my, conic, a_eff, c, mirror in rows:
                dx = px - mx
                dy = py - my
                power = (-0.5 * (conic[0] * dx * dx + conic[2] * dy * dy)
                         - conic[1] * dx * dy)
                if power > 0.0:
                    continue
                sig = a_eff * np.exp(power)
                if sig > SIGMA_MAX:
                    sig = SIGMA_MAX
                tnext = trans * (1.0 - sig)
                weight = sig * trans
                color[py, px] += weight * c
                mask[py, px] += weight * mirror
                dsum[py, px] += weight * z
                trans = tnext
                if trans < T_CUTOFF:
                    break
            alpha_out[py, px] = 1.0 - trans
    depth = dsum / np.maximum(alpha_out, DEPTH_EPS)
    return color, mask, depth, alpha_out


def fd_scalar(f, x0: float, eps: float = 1e-6) -> float:
    """Central finite difference of a scalar->scalar callable."""
    return (f(x0 + eps) - f(x0 - eps)) / (2.0 * eps)


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def angle_deg(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    c = float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))
    return float(np.degrees(np.arccos(np.clip(abs(c), -1.0, 1.0))))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a) > 0.5
    b = np.asarray(b) > 0.5
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def mirrored_scene(scene: GaussianScene, plane: PlaneParam) -> GaussianScene:
    """Reflect every primitive across the plane (positions moved, rotations
    conjugated). Only valid for view-independent color (sh_degree 0)."""
    from mirror_splat.scene import quat_to_rotmat, rotmat_to_quat

    n = plane.normal
    house = np.eye(3) - 2.0 * np.outer(n, n)
    pos = scene.positions.astype(np.float64)
    resid = pos @ n + plane.offset
    new_pos = pos - 2.0 * resid[:, None] * n[None, :]
    rots = quat_to_rotmat(scene.rotations.astype(np.float64))
    new_quats = np.stack([rotmat_to_quat(-(house @ rots[i]))
                          for i in range(len(scene))])
    out = scene.copy()
    out.positions = new_pos.astype(scene.dtype)
    out.rotations = new_quats.astype(scene.dtype)
    return out

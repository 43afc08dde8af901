"""Mirror-specific operations on a Gaussian scene.

Covers the full mirror path: selecting mirror-tagged Gaussians, recovering
the mirror plane from them (RANSAC + weighted least-squares refinement),
penalizing drift from the plane, rendering the scene from the mirrored
viewpoint, and fusing the two renders. A per-ray reference renderer
provides an independent check of the mirrored view.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PlaneEstimationError, RenderError
from .geometry import (
    CameraModel,
    PlaneParam,
    PoseTransform,
    mirror_camera,
    normalize_plane,
)
from .rasterizer import RADIUS_SIGMA, RenderOutput, oracle_render, render
from .scene import GaussianScene, sigmoid

COLLINEAR_EPS = 1e-12


def filter_mirror_gaussians(scene: GaussianScene, tau_m: float = 0.5,
                            tau_alpha: float = 0.5) -> np.ndarray:
    """Indices of Gaussians with mirror weight > tau_m and opacity > tau_alpha.

    Both comparisons are strict, so thresholds of exactly 0.5 exclude
    logits of exactly zero.
    """
    m = sigmoid(scene.mirror_logits.astype(np.float64))
    a = sigmoid(scene.opacity_logits.astype(np.float64))
    return np.flatnonzero((m > tau_m) & (a > tau_alpha))


@dataclass(frozen=True)
class MirrorEstimate:
    """Result of a plane fit: the plane plus its supporting evidence.

    `support` is the inlier fraction (inliers / points fitted), in [0, 1].
    """

    plane: PlaneParam
    inlier_indices: np.ndarray
    support: float
    inlier_rms: float

    def to_dict(self) -> dict:
        return {
            "plane": {"normal": [float(v) for v in self.plane.normal],
                      "offset": float(self.plane.offset)},
            "support": float(self.support),
            "inlier_rms": float(self.inlier_rms),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MirrorEstimate":
        plane = PlaneParam(np.asarray(data["plane"]["normal"], dtype=np.float64),
                           float(data["plane"]["offset"]))
        return cls(plane=plane, inlier_indices=np.arange(0),
                   support=float(data["support"]),
                   inlier_rms=float(data["inlier_rms"]))


def _fit_plane(points: np.ndarray, weights: np.ndarray) -> PlaneParam:
    # Weighted total least squares: centroid plus the smallest-eigenvector
    # of the weighted scatter matrix.
    wsum = float(weights.sum())
    if wsum <= 0.0:
        raise PlaneEstimationError("plane refinement weights sum to zero")
    centroid = (points * weights[:, None]).sum(axis=0) / wsum
    q = points - centroid
    scatter = (q * weights[:, None]).T @ q
    _, eigvecs = np.linalg.eigh(scatter)
    normal = eigvecs[:, 0]
    return normalize_plane(PlaneParam(normal, -float(normal @ centroid)))


def ransac_plane(points: np.ndarray, iterations: int = 512,
                 threshold: float = 0.01, seed: int = 0,
                 weights: np.ndarray | None = None) -> MirrorEstimate:
    """Robust plane fit: RANSAC over 3-point hypotheses, then a weighted
    least-squares refinement and one inlier re-selection pass.

    `weights` (defaults to uniform) only influence the refinement step;
    hypothesis scoring is a plain inlier count. Deterministic for a fixed
    seed. Raises PlaneEstimationError when fewer than 3 points are given
    or every sampled triple is collinear.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    if n < 3:
        raise PlaneEstimationError(f"plane fit needs at least 3 points, got {n}")
    if iterations < 1:
        raise PlaneEstimationError("iterations must be positive")
    if not (threshold > 0.0):
        raise PlaneEstimationError("inlier threshold must be positive")
    if weights is None:
        w = np.ones(n, dtype=np.float64)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(n)
        if np.any(w < 0.0):
            raise PlaneEstimationError("refinement weights must be nonnegative")

    rng = np.random.default_rng(seed)
    best_support = -1
    best_inliers = None
    for _ in range(iterations):
        i0, i1, i2 = rng.choice(n, size=3, replace=False)
        e1 = pts[i1] - pts[i0]
        e2 = pts[i2] - pts[i0]
        cross = np.cross(e1, e2)
        norm = np.linalg.norm(cross)
        # Relative collinearity test so the guard is scale invariant.
        if norm <= COLLINEAR_EPS * (np.linalg.norm(e1) * np.linalg.norm(e2) + 1e-300):
            continue
        normal = cross / norm
        offset = -float(normal @ pts[i0])
        residuals = np.abs(pts @ normal + offset)
        inliers = residuals < threshold
        support = int(inliers.sum())
        if support > best_support:
            best_support = support
            best_inliers = inliers
    if best_inliers is None:
        raise PlaneEstimationError("all sampled triples were collinear")
    if best_support < 3:
        raise PlaneEstimationError(
            f"best hypothesis has only {best_support} inliers; "
            "points do not support a plane at this threshold")

    plane = _fit_plane(pts[best_inliers], w[best_inliers])
    # One re-selection pass against the refined plane, then a final fit so
    # the reported inliers are consistent with the reported plane.
    reselect = np.abs(pts @ plane.normal + plane.offset) < threshold
    if int(reselect.sum()) >= 3:
        plane = _fit_plane(pts[reselect], w[reselect])
    final = np.abs(pts @ plane.normal + plane.offset) < threshold
    idx = np.flatnonzero(final)
    if idx.size < 3:
        raise PlaneEstimationError(
            "refined plane lost its inlier support; threshold too tight")
    res = pts[idx] @ plane.normal + plane.offset
    rms = float(np.sqrt(np.mean(res * res)))
    return MirrorEstimate(plane=plane, inlier_indices=idx,
                          support=idx.size / n, inlier_rms=rms)


def orient_plane(plane: PlaneParam, toward: np.ndarray) -> PlaneParam:
    """Flip (normal, offset) if needed so `toward` lies on the positive side."""
    side = float(plane.normal @ np.asarray(toward, dtype=np.float64).reshape(3)
                 + plane.offset)
    if side < 0.0:
        return PlaneParam(-plane.normal, -plane.offset)
    return plane


def plane_loss(plane: PlaneParam, points: np.ndarray
               ) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean absolute point-to-plane residual and its subgradients.

    Returns (loss, grad wrt (normal, offset) as a 4-vector, grad wrt points).
    The subgradient at a zero residual is zero. An empty point set yields
    a zero loss and zero plane gradient.
    """
    if not plane.is_normalized():
        raise PlaneEstimationError("plane_loss requires a unit normal")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    if n == 0:
        return 0.0, np.zeros(4), np.zeros((0, 3))
    r = pts @ plane.normal + plane.offset
    s = np.sign(r)
    loss = float(np.abs(r).mean())
    grad_plane = np.empty(4)
    grad_plane[:3] = (s[:, None] * pts).mean(axis=0)
    grad_plane[3] = float(s.mean())
    grad_points = (s[:, None] * plane.normal[None, :]) / n
    return loss, grad_plane, grad_points


def fuse_images(base: np.ndarray, mirrored: np.ndarray,
                mask: np.ndarray) -> np.ndarray:
    """Per-pixel blend: mask * mirrored + (1 - mask) * base."""
    b = np.asarray(base)
    m = np.asarray(mirrored)
    w = np.asarray(mask)
    if b.ndim != 3 or b.shape[2] != 3:
        raise RenderError(f"base image must be (H, W, 3), got {b.shape}")
    if m.shape != b.shape:
        raise RenderError(f"mirrored image shape {m.shape} != base {b.shape}")
    if w.shape != b.shape[:2]:
        raise RenderError(f"mask shape {w.shape} != image grid {b.shape[:2]}")
    w3 = w[:, :, None]
    return b * (1.0 - w3) + m * w3


def fuse_backward(grad_fused: np.ndarray, base: np.ndarray, mirrored: np.ndarray,
                  mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adjoint of fuse_images: gradients wrt (base, mirrored, mask)."""
    g = np.asarray(grad_fused, dtype=np.float64)
    w3 = np.asarray(mask, dtype=np.float64)[:, :, None]
    grad_base = g * (1.0 - w3)
    grad_mirrored = g * w3
    diff = np.asarray(mirrored, dtype=np.float64) - np.asarray(base, dtype=np.float64)
    grad_mask = (g * diff).sum(axis=2)
    return grad_base, grad_mirrored, grad_mask


def mirror_suppression(scene: GaussianScene) -> np.ndarray:
    """Per-Gaussian opacity scale 1 - m used for mirrored-view renders.

    The mirror surface itself would otherwise occlude the virtual camera,
    which sits behind the plane and looks through it.
    """
    return 1.0 - sigmoid(scene.mirror_logits.astype(np.float64))


def render_mirror_view(scene: GaussianScene, camera: CameraModel,
                       pose: PoseTransform, plane: PlaneParam,
                       dtype=None, radius_sigma: float = RADIUS_SIGMA,
                       renderer: str = "tile") -> RenderOutput:
    """Render the scene from the mirrored camera of `pose` across `plane`.

    Equivalent to render(scene, camera, mirror_camera(plane, pose)) with
    mirror-tagged Gaussians suppressed by a per-Gaussian opacity scale of
    (1 - m): without the suppression the mirror surface itself blocks the
    virtual viewpoint.
    """
    vpose = mirror_camera(plane, pose)
    scale = mirror_suppression(scene)
    if renderer == "oracle":
        return oracle_render(scene, camera, vpose, opacity_scale=scale,
                             radius_sigma=radius_sigma)
    return render(scene, camera, vpose, opacity_scale=scale, dtype=dtype,
                  radius_sigma=radius_sigma)


def render_fused(scene: GaussianScene, plane: PlaneParam | None,
                 camera: CameraModel, pose: PoseTransform,
                 renderer: str = "tile", dtype=None,
                 radius_sigma: float = RADIUS_SIGMA
                 ) -> tuple[RenderOutput, RenderOutput | None, np.ndarray]:
    """Base render, mirrored render, and their fusion under the rendered mask.

    With no plane the fusion degenerates to the base color and the mirrored
    output is None.
    """
    if renderer == "oracle":
        base = oracle_render(scene, camera, pose, radius_sigma=radius_sigma)
    else:
        base = render(scene, camera, pose, dtype=dtype, radius_sigma=radius_sigma)
    if plane is None:
        return base, None, base.color.copy()
    mirrored = render_mirror_view(scene, camera, pose, plane, dtype=dtype,
                                  radius_sigma=radius_sigma, renderer=renderer)
    fused = fuse_images(base.color, mirrored.color, base.mask)
    return base, mirrored, fused


def _bilinear(img: np.ndarray, u: float, v: float) -> np.ndarray:
    """Bilinear sample of an (H, W, 3) image at pixel-center coordinates."""
    h, w = img.shape[:2]
    uc = min(max(u, 0.0), w - 1.0)
    vc = min(max(v, 0.0), h - 1.0)
    x0 = int(uc)
    y0 = int(vc)
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fu = uc - x0
    fv = vc - y0
    top = img[y0, x0] * (1.0 - fu) + img[y0, x1] * fu
    bot = img[y1, x0] * (1.0 - fu) + img[y1, x1] * fu
    return top * (1.0 - fv) + bot * fv


def reflect_ray_oracle(scene: GaussianScene, camera: CameraModel,
                       pose: PoseTransform, plane: PlaneParam,
                       mask: np.ndarray,
                       radius_sigma: float = RADIUS_SIGMA) -> np.ndarray:
    """Reference mirrored view built from per-pixel reflected rays.

    For every pixel with mask > 0.5: cast the pixel ray, intersect it with
    the plane, and reflect its direction about the normal. All reflected
    rays pass through the reflection of the camera center, so together
    they form one ordinary pinhole view. That view is rendered once with
    the brute-force blend in a proper right-handed frame — the reflected
    camera axes with the x axis negated and the principal point mirrored,
    which undoes the handedness flip of the reflection — and each masked
    pixel then samples bilinearly where its own reflected ray pierces that
    image grid. The only approximation is that resampling, and with the
    mirrored principal point the reflected rays land exactly on pixel
    centers. Pixels outside the mask, with rays parallel to the plane, or
    with the intersection behind the camera stay zero. Mirror-surface
    primitives are damped by (1 - m) exactly as in render_mirror_view: the
    reflected rays originate on the plane, so without the damping the
    surface itself would occlude the content it reflects. The reflected
    frame is derived here from the plane alone (no shared mirror-transform
    composition), so the result independently checks render_mirror_view.
    """
    if not plane.is_normalized():
        raise PlaneEstimationError("reflect_ray_oracle requires a unit normal")
    w = np.asarray(mask, dtype=np.float64)
    if w.shape != (camera.height, camera.width):
        raise RenderError(f"mask shape {w.shape} does not match camera "
                          f"({camera.height}, {camera.width})")
    out = np.zeros((camera.height, camera.width, 3), dtype=np.float64)
    ys, xs = np.nonzero(w > 0.5)
    if ys.size == 0:
        return out
    scale = mirror_suppression(scene)
    rot_c2w = pose.rotation.T
    origin = pose.camera_center
    n = plane.normal
    d = plane.offset
    side = float(n @ origin + d)

    house = np.eye(3) - 2.0 * np.outer(n, n)
    rot_o = pose.rotation @ house
    rot_o[0] = -rot_o[0]
    cx_o = camera.width - 1.0 - camera.cx
    if not 0.0 <= cx_o <= camera.width:
        # Principal point at the extreme image edge; keep it unmirrored and
        # let the resampling below absorb the grid offset.
        cx_o = camera.cx
    cam_o = CameraModel(fx=camera.fx, fy=camera.fy, cx=cx_o, cy=camera.cy,
                        width=camera.width, height=camera.height,
                        znear=camera.znear)
    matrix = np.eye(4)
    matrix[:3, :3] = rot_o
    matrix[:3, 3] = -rot_o @ (origin - 2.0 * side * n)
    img = oracle_render(scene, cam_o, PoseTransform(matrix),
                        opacity_scale=scale, radius_sigma=radius_sigma).color

    for py, px in zip(ys.tolist(), xs.tolist()):
        dir_cam = np.array([(px - camera.cx) / camera.fx,
                            (py - camera.cy) / camera.fy, 1.0])
        dir_w = rot_c2w @ dir_cam
        dir_w /= np.linalg.norm(dir_w)
        denom = float(n @ dir_w)
        if abs(denom) < 1e-12:
            continue
        t_hit = -side / denom
        if t_hit <= 0.0:
            continue
        refl = dir_w - 2.0 * denom * n
        d_o = rot_o @ refl
        if d_o[2] <= 1e-12:
            continue
        u = cx_o + camera.fx * d_o[0] / d_o[2]
        v = camera.cy + camera.fy * d_o[1] / d_o[2]
        out[py, px] = _bilinear(img, u, v)
    return out

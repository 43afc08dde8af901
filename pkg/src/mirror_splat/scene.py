"""Gaussian scene representation: primitives, covariance factorization,
spherical-harmonics color, dataset records, and scene initialization.

Opacity and the mirror attribute are stored as logits, scales as logs, so
the optimizer works on unconstrained parameters while the activated values
stay inside their ranges by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, PlaneParam, PoseTransform

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


def quat_to_rotmat(quats: np.ndarray) -> np.ndarray:
    """(N,4) unit quaternions (w,x,y,z) -> (N,3,3) rotation matrices."""
    q = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((q.shape[0], 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    """Single 3x3 proper rotation -> unit quaternion (w,x,y,z)."""
    r = np.asarray(r, dtype=np.float64).reshape(3, 3)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        if i == 0:
            s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            q = np.array([(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s])
        elif i == 1:
            s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            q = np.array([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s])
        else:
            s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            q = np.array([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s])
    return q / np.linalg.norm(q)


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values for unit directions; (N, (degree+1)^2)."""
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = d.shape[0]
    k = (degree + 1) ** 2
    b = np.empty((n, k))
    b[:, 0] = SH_C0
    if degree >= 1:
        x, y, z = d[:, 0], d[:, 1], d[:, 2]
        b[:, 1] = -SH_C1 * y
        b[:, 2] = SH_C1 * z
        b[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        b[:, 4] = SH_C2[0] * xy
        b[:, 5] = SH_C2[1] * yz
        b[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
        b[:, 7] = SH_C2[3] * xz
        b[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        b[:, 9] = SH_C3[0] * y * (3 * xx - yy)
        b[:, 10] = SH_C3[1] * xy * z
        b[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        b[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        b[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        b[:, 14] = SH_C3[5] * z * (xx - yy)
        b[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return b


def sh_basis_gradient(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(direction) for unit directions; (N, (degree+1)^2, 3)."""
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = d.shape[0]
    k = (degree + 1) ** 2
    g = np.zeros((n, k, 3))
    if degree >= 1:
        x, y, z = d[:, 0], d[:, 1], d[:, 2]
        g[:, 1, 1] = -SH_C1
        g[:, 2, 2] = SH_C1
        g[:, 3, 0] = -SH_C1
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        g[:, 4, 0] = SH_C2[0] * y
        g[:, 4, 1] = SH_C2[0] * x
        g[:, 5, 1] = SH_C2[1] * z
        g[:, 5, 2] = SH_C2[1] * y
        g[:, 6, 0] = SH_C2[2] * (-2 * x)
        g[:, 6, 1] = SH_C2[2] * (-2 * y)
        g[:, 6, 2] = SH_C2[2] * (4 * z)
        g[:, 7, 0] = SH_C2[3] * z
        g[:, 7, 2] = SH_C2[3] * x
        g[:, 8, 0] = SH_C2[4] * (2 * x)
        g[:, 8, 1] = SH_C2[4] * (-2 * y)
    if degree >= 3:
        g[:, 9, 0] = SH_C3[0] * 6 * x * y
        g[:, 9, 1] = SH_C3[0] * (3 * xx - 3 * yy)
        g[:, 10, 0] = SH_C3[1] * y * z
        g[:, 10, 1] = SH_C3[1] * x * z
        g[:, 10, 2] = SH_C3[1] * x * y
        g[:, 11, 0] = SH_C3[2] * (-2 * x * y)
        g[:, 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
        g[:, 11, 2] = SH_C3[2] * (8 * y * z)
        g[:, 12, 0] = SH_C3[3] * (-6 * x * z)
        g[:, 12, 1] = SH_C3[3] * (-6 * y * z)
        g[:, 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
        g[:, 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
        g[:, 13, 1] = SH_C3[4] * (-2 * x * y)
        g[:, 13, 2] = SH_C3[4] * (8 * x * z)
        g[:, 14, 0] = SH_C3[5] * (2 * x * z)
        g[:, 14, 1] = SH_C3[5] * (-2 * y * z)
        g[:, 14, 2] = SH_C3[5] * (xx - yy)
        g[:, 15, 0] = SH_C3[6] * (3 * xx - 3 * yy)
        g[:, 15, 1] = SH_C3[6] * (-6 * x * y)
    return g


def evaluate_sh(sh_coeffs, view_dir, degree: int) -> np.ndarray:
    """Color for one Gaussian seen from `view_dir` (unit vector).

    3DGS convention: basis-weighted sum plus a 0.5 offset, clamped at 0.
    """
    coeffs = np.asarray(sh_coeffs, dtype=np.float64).reshape(-1, 3)
    b = sh_basis(np.asarray(view_dir).reshape(1, 3), degree)[0]
    k = (degree + 1) ** 2
    rgb = b @ coeffs[:k] + 0.5
    return np.maximum(rgb, 0.0)


@dataclass(frozen=True)
class GaussianPrimitive:
    """One anisotropic Gaussian with its mirror attribute."""

    position: np.ndarray
    rotation: np.ndarray  # unit quaternion (w,x,y,z)
    log_scale: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray  # ((degree+1)^2, 3)
    mirror_logit: float

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def mirror(self) -> float:
        return float(sigmoid(self.mirror_logit))


def covariance(primitive: GaussianPrimitive) -> np.ndarray:
    """World-space covariance R diag(exp(log_scale))^2 R^T (3x3, SPD)."""
    return covariance_matrices(
        np.asarray(primitive.rotation).reshape(1, 4),
        np.asarray(primitive.log_scale).reshape(1, 3),
    )[0]


def covariance_matrices(rotations: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """Vectorized covariance factorization for the whole scene; (N,3,3)."""
    q = np.asarray(rotations, dtype=np.float64).reshape(-1, 4)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    r = quat_to_rotmat(q)
    s2 = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64).reshape(-1, 3))
    return (r * s2[:, None, :]) @ r.transpose(0, 2, 1)


class GaussianScene:
    """Ordered collection of Gaussians, stored as arrays for speed.

    All arrays share one dtype (float32 for training, float64 for the
    double-precision oracle/gradient paths).
    """

    FIELDS = ("positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs", "mirror_logits")

    def __init__(self, positions, rotations, log_scales, opacity_logits,
                 sh_coeffs, mirror_logits, sh_degree: int):
        if not 0 <= sh_degree <= 3:
            raise ValueError("sh_degree must be in 0..3")
        n = len(positions)
        k = (sh_degree + 1) ** 2
        dtype = np.asarray(positions).dtype
        if dtype not in (np.float32, np.float64):
            dtype = np.float64
        self.positions = np.ascontiguousarray(positions, dtype=dtype).reshape(n, 3)
        self.rotations = np.ascontiguousarray(rotations, dtype=dtype).reshape(n, 4)
        self.log_scales = np.ascontiguousarray(log_scales, dtype=dtype).reshape(n, 3)
        self.opacity_logits = np.ascontiguousarray(opacity_logits, dtype=dtype).reshape(n)
        self.sh_coeffs = np.ascontiguousarray(sh_coeffs, dtype=dtype).reshape(n, k, 3)
        self.mirror_logits = np.ascontiguousarray(mirror_logits, dtype=dtype).reshape(n)
        self.sh_degree = int(sh_degree)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def dtype(self):
        return self.positions.dtype

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def mirrors(self) -> np.ndarray:
        return sigmoid(self.mirror_logits)

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            position=self.positions[i].astype(np.float64),
            rotation=self.rotations[i].astype(np.float64),
            log_scale=self.log_scales[i].astype(np.float64),
            opacity_logit=float(self.opacity_logits[i]),
            sh_coeffs=self.sh_coeffs[i].astype(np.float64),
            mirror_logit=float(self.mirror_logits[i]),
        )

    @property
    def primitives(self) -> list[GaussianPrimitive]:
        return [self.primitive(i) for i in range(len(self))]

    @classmethod
    def from_primitives(cls, prims, sh_degree: int, dtype=np.float32) -> "GaussianScene":
        return cls(
            np.array([p.position for p in prims], dtype=dtype),
            np.array([p.rotation for p in prims], dtype=dtype),
            np.array([p.log_scale for p in prims], dtype=dtype),
            np.array([p.opacity_logit for p in prims], dtype=dtype),
            np.array([p.sh_coeffs for p in prims], dtype=dtype),
            np.array([p.mirror_logit for p in prims], dtype=dtype),
            sh_degree,
        )

    def astype(self, dtype) -> "GaussianScene":
        return GaussianScene(
            self.positions.astype(dtype), self.rotations.astype(dtype),
            self.log_scales.astype(dtype), self.opacity_logits.astype(dtype),
            self.sh_coeffs.astype(dtype), self.mirror_logits.astype(dtype),
            self.sh_degree,
        )

    def copy(self) -> "GaussianScene":
        return self.astype(self.dtype)

    def select(self, indices) -> "GaussianScene":
        return GaussianScene(
            self.positions[indices], self.rotations[indices],
            self.log_scales[indices], self.opacity_logits[indices],
            self.sh_coeffs[indices], self.mirror_logits[indices],
            self.sh_degree,
        )

    def params(self) -> dict[str, np.ndarray]:
        """Live parameter arrays, keyed by field name (optimizer interface)."""
        return {name: getattr(self, name) for name in self.FIELDS}

    def covariances(self) -> np.ndarray:
        return covariance_matrices(self.rotations, self.log_scales)

    def normalize_rotations(self):
        q = self.rotations.astype(np.float64)
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        self.rotations[:] = q.astype(self.dtype)


@dataclass
class ViewRecord:
    """One calibrated view with its supervision targets."""

    camera: CameraModel
    pose: PoseTransform
    image: np.ndarray                 # (H, W, 3) linear floats in [0, 1]
    mirror_mask: np.ndarray           # (H, W) floats in [0, 1]
    depth: np.ndarray | None = None   # (H, W) floats, world units
    name: str = ""

    def __post_init__(self):
        h, w = self.camera.height, self.camera.width
        if self.image.shape != (h, w, 3):
            raise ValueError(f"image shape {self.image.shape} does not match camera {h}x{w}")
        if self.mirror_mask.shape != (h, w):
            raise ValueError(f"mask shape {self.mirror_mask.shape} does not match camera {h}x{w}")
        if self.depth is not None and self.depth.shape != (h, w):
            raise ValueError(f"depth shape {self.depth.shape} does not match camera {h}x{w}")


@dataclass
class MirrorDataset:
    """Train/test views plus, for synthetic data, the true mirror plane."""

    train_views: list[ViewRecord]
    test_views: list[ViewRecord] = field(default_factory=list)
    gt_plane: PlaneParam | None = None

    def __post_init__(self):
        if not self.train_views:
            raise ValueError("dataset needs at least one training view")
        shapes = {(v.camera.height, v.camera.width) for v in self.train_views + self.test_views}
        if len(shapes) != 1:
            raise ValueError(f"all views must share image dimensions, got {shapes}")


def frustum_union_box(dataset: MirrorDataset) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box containing every training view's frustum.

    Frusta are truncated at the dataset's maximum finite depth (plus 5%);
    without depth maps, at twice the camera spread.
    """
    far = 0.0
    for v in dataset.train_views:
        if v.depth is not None:
            d = v.depth[np.isfinite(v.depth) & (v.depth > 0)]
            if d.size:
                far = max(far, float(d.max()))
    if far <= 0.0:
        centers = np.array([v.pose.camera_center for v in dataset.train_views])
        spread = float(np.linalg.norm(centers.max(0) - centers.min(0)))
        far = max(2.0 * spread, 1.0)
    far *= 1.05

    corners = []
    for v in dataset.train_views:
        cam = v.camera
        xs = np.array([-cam.cx, cam.width - cam.cx])
        ys = np.array([-cam.cy, cam.height - cam.cy])
        c2w = v.pose.camera_to_world()
        for z in (cam.znear, far):
            for px in xs:
                for py in ys:
                    p_cam = np.array([px / cam.fx * z, py / cam.fy * z, z, 1.0])
                    corners.append((c2w @ p_cam)[:3])
        corners.append(v.pose.camera_center)
    corners = np.array(corners)
    return corners.min(axis=0), corners.max(axis=0)


def init_scene(dataset: MirrorDataset, n_points: int, seed: int,
               sh_degree: int = 2, dtype=np.float32) -> GaussianScene:
    """Seed a scene with Gaussians sampled uniformly in the frustum-union box.

    Replaces SfM initialization: opacity starts at 0.1, the mirror attribute
    at 0.01, and the DC color at a random gray per Gaussian.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = frustum_union_box(dataset)

    volume = float(np.prod(hi - lo))
    nn_dist = 0.40 * (volume / n_points) ** (1.0 / 3.0)

    # Reject samples so close to a camera that their splat would cover the
    # screen (projected sigma capped near one tile); such points carry no
    # usable signal and dominate rasterization cost.
    centers = np.array([v.pose.camera_center for v in dataset.train_views])
    max_fx = max(max(v.camera.fx, v.camera.fy) for v in dataset.train_views)
    z_min = nn_dist * max_fx / 16.0
    positions = np.empty((0, 3))
    while positions.shape[0] < n_points:
        cand = rng.uniform(lo, hi, size=(n_points, 3))
        d2 = ((cand[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        kept = cand[d2.min(axis=1) >= z_min * z_min]
        if kept.shape[0] == 0:
            z_min *= 0.5  # exclusion spheres blanket the box; relax
            continue
        positions = np.concatenate([positions, kept])
    positions = positions[:n_points]

    quats = rng.standard_normal((n_points, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)

    log_scales = np.full((n_points, 3), np.log(max(nn_dist, 1e-4)))

    k = (sh_degree + 1) ** 2
    sh = np.zeros((n_points, k, 3))
    gray = rng.uniform(0.2, 0.8, size=n_points)
    sh[:, 0, :] = ((gray - 0.5) / SH_C0)[:, None]

    return GaussianScene(
        positions.astype(dtype),
        quats.astype(dtype),
        log_scales.astype(dtype),
        np.full(n_points, logit(0.1), dtype=dtype),
        sh.astype(dtype),
        np.full(n_points, logit(0.01), dtype=dtype),
        sh_degree,
    )

"""Ground-truth toy scenes with a planar mirror, and the datasets they
generate.

The scene is a rectangular mirror with a narrow frame ring, colored
Gaussian clusters off to the sides, and a large backdrop behind the
cameras that is visible only in the reflection. The space behind the
mirror is empty and seen directly by oblique cameras, so the reflection
cannot be explained away as geometry parked behind the plane. Every
dataset image is produced by the oracle renderer through the same fusion
path the trainer learns, so a stored view is reproducible bit-for-bit
from the GT scene.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset_io import quantize_image
from .errors import ConfigError, SynthesisError
from .geometry import CameraModel, PlaneParam, PoseTransform, look_at_pose
from .mirror import mirror_suppression, render_mirror_view, fuse_images
from .rasterizer import oracle_render
from .scene import SH_C0, GaussianScene, MirrorDataset, ViewRecord

MIRROR_HALF_W = 1.1
MIRROR_HALF_H = 0.8
MIRROR_SIGMA = 0.18
PANEL_SPACING = 0.2
PANEL_GRAY = 0.12
FRAME_MARGIN = 0.25      # mirror edge -> frame cutout edge
FRAME_BAND = 0.45        # width of the frame ring around the cutout
FRAME_SPACING = 0.11
FRAME_SIGMA = 0.06
FRAME_BEHIND = 0.25      # frame ring sits this far behind the mirror plane
BACKDROP_HALF_W = 7.5
BACKDROP_HALF_H = 4.5
BACKDROP_SPACING = 0.26
BACKDROP_SIGMA = 0.22
BACKDROP_BEHIND_CAMERAS = 3.7
FLAT_SIGMA = 0.002
OPAQUE_LOGIT = 6.0
ALPHA_VALID = 0.5        # depth is defined where the render is this opaque
# Near clip for sampled cameras. The backdrop extends past the camera
# band; points of it crossing the camera plane at z ~ 0 would otherwise
# splat across the whole image (the EWA Jacobian diverges as 1/z).
SYNTH_ZNEAR = 0.8


@dataclass
class SynthConfig:
    """Toy dataset layout. Geometry is keyed off the mirror plane z."""

    n_train_views: int = 30
    n_test_views: int = 8
    width: int = 64
    height: int = 64
    plane_z: float = 1.2
    camera_z: tuple[float, float] = (-2.8, -1.5)
    azimuth_deg: float = 32.0
    elevation_deg: tuple[float, float] = (-10.0, 16.0)

    def validate(self) -> "SynthConfig":
        if self.n_train_views < 1 or self.n_test_views < 0:
            raise ConfigError("view counts must be positive")
        if self.n_train_views + self.n_test_views < 8:
            raise ConfigError("toy datasets need at least 8 views total")
        if self.width < 32 or self.height < 32:
            raise ConfigError("image size must be at least 32x32")
        if self.camera_z[0] > self.camera_z[1]:
            raise ConfigError("camera_z must be (low, high)")
        return self


def _flat_grid(xs, ys, z, skip=None):
    pts = []
    for x in xs:
        for y in ys:
            if skip is not None and skip(x, y):
                continue
            pts.append((x, y, z))
    return np.array(pts, dtype=np.float64)


def _color_field(pts, base, amp, freq, phase):
    """Smooth per-Gaussian colors: three shifted sinusoids over the plane."""
    c = np.empty((len(pts), 3))
    for ch in range(3):
        wave = np.sin(freq[ch][0] * pts[:, 0] + freq[ch][1] * pts[:, 1] + phase[ch])
        c[:, ch] = base[ch] + amp * wave
    return np.clip(c, 0.02, 0.98)


class _SceneBuilder:
    def __init__(self, sh_degree: int = 2):
        self.k = (sh_degree + 1) ** 2
        self.sh_degree = sh_degree
        self.rows: list[tuple] = []

    def add(self, positions, sigmas, colors, opacity_logit, mirror_logit,
            quats=None, sh_rest=None):
        n = len(positions)
        if quats is None:
            quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        sh = np.zeros((n, self.k, 3))
        sh[:, 0, :] = (np.asarray(colors) - 0.5) / SH_C0
        if sh_rest is not None:
            sh[:, 1:1 + sh_rest.shape[1], :] = sh_rest
        self.rows.append((np.asarray(positions, dtype=np.float64),
                          np.asarray(quats, dtype=np.float64),
                          np.log(np.asarray(sigmas, dtype=np.float64)),
                          np.full(n, opacity_logit, dtype=np.float64),
                          sh,
                          np.full(n, mirror_logit, dtype=np.float64)))

    def build(self) -> GaussianScene:
        parts = [np.concatenate([r[i] for r in self.rows]) for i in range(6)]
        return GaussianScene(parts[0].astype(np.float32),
                             parts[1].astype(np.float32),
                             parts[2].astype(np.float32),
                             parts[3].astype(np.float32),
                             parts[4].astype(np.float32),
                             parts[5].astype(np.float32),
                             self.sh_degree)


def build_ground_truth(cfg: SynthConfig, rng: np.random.Generator
                       ) -> tuple[GaussianScene, PlaneParam]:
    """GT scene: mirror panel, a narrow frame ring, side clusters, and a
    reflected-only backdrop. Mirror logits are +/- inf so masks are
    exactly 1 on the panel and exactly 0 elsewhere. Apart from the ring
    the space behind the plane is empty AND observed (oblique cameras see
    past the ring), which is what makes the mirror pipeline necessary:
    explaining the reflection with ordinary geometry behind the mirror
    contradicts those sight lines."""
    z0 = cfg.plane_z
    b = _SceneBuilder()

    # Mirror panel: flattened pancakes tiling the rectangle on the plane.
    xs = np.arange(-MIRROR_HALF_W, MIRROR_HALF_W + 1e-9, PANEL_SPACING)
    ys = np.arange(-MIRROR_HALF_H, MIRROR_HALF_H + 1e-9, PANEL_SPACING)
    panel = _flat_grid(xs, ys, z0)
    b.add(panel, np.tile([MIRROR_SIGMA, MIRROR_SIGMA, FLAT_SIGMA], (len(panel), 1)),
          np.full((len(panel), 3), PANEL_GRAY), OPAQUE_LOGIT, np.inf)

    # Frame ring just behind the plane. Deliberately narrow: oblique
    # cameras see past its outer edge into the empty space behind the
    # mirror, so content parked back there to imitate the reflection
    # contradicts those views.
    hole_w = MIRROR_HALF_W + FRAME_MARGIN
    hole_h = MIRROR_HALF_H + FRAME_MARGIN
    xs = np.arange(-hole_w - FRAME_BAND, hole_w + FRAME_BAND + 1e-9,
                   FRAME_SPACING)
    ys = np.arange(-hole_h - FRAME_BAND, hole_h + FRAME_BAND + 1e-9,
                   FRAME_SPACING)
    frame = _flat_grid(xs, ys, z0 + FRAME_BEHIND,
                       skip=lambda x, y: abs(x) < hole_w and abs(y) < hole_h)
    frame_colors = _color_field(frame, (0.55, 0.42, 0.30), 0.18,
                                ((2.3, 1.1), (1.7, 2.6), (3.1, 0.7)),
                                (0.0, 1.3, 2.1))
    b.add(frame, np.tile([FRAME_SIGMA, FRAME_SIGMA, FLAT_SIGMA], (len(frame), 1)),
          frame_colors, OPAQUE_LOGIT, -np.inf)

    # Backdrop behind the cameras: appears only inside the reflection.
    z_back = cfg.camera_z[0] - BACKDROP_BEHIND_CAMERAS
    xs = np.arange(-BACKDROP_HALF_W, BACKDROP_HALF_W + 1e-9, BACKDROP_SPACING)
    ys = np.arange(-BACKDROP_HALF_H, BACKDROP_HALF_H + 1e-9, BACKDROP_SPACING)
    back = _flat_grid(xs, ys, z_back)
    back_colors = _color_field(back, (0.30, 0.42, 0.58), 0.20,
                               ((2.4, 1.3), (1.6, 2.8), (3.1, 0.9)),
                               (0.7, 2.9, 1.9))
    b.add(back, np.tile([BACKDROP_SIGMA, BACKDROP_SIGMA, 2 * FLAT_SIGMA],
                        (len(back), 1)),
          back_colors, OPAQUE_LOGIT, -np.inf)

    # Colored clusters on the far x sides. Camera-to-mirror sight lines
    # stay within |x| < 1.4 at these depths, so the panel is never occluded.
    centers = np.array([
        (-2.45, 0.15, z0 - 0.85), (2.45, -0.30, z0 - 0.80),
        (-2.50, -0.55, z0 - 1.45), (2.50, 0.55, z0 - 1.40),
        (-2.40, 0.70, z0 - 1.15), (2.40, 0.30, z0 - 1.55),
    ])
    cluster_colors = np.array([
        (0.85, 0.25, 0.20), (0.20, 0.70, 0.30), (0.90, 0.75, 0.15),
        (0.25, 0.40, 0.85), (0.80, 0.35, 0.75), (0.20, 0.75, 0.75),
    ])
    for center, color in zip(centers, cluster_colors):
        n = 9
        pos = center + rng.normal(0.0, 0.07, (n, 3))
        quats = rng.standard_normal((n, 4))
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        sigmas = rng.uniform(0.04, 0.075, (n, 3))
        colors = np.clip(color + rng.normal(0.0, 0.05, (n, 3)), 0.05, 0.95)
        sh_rest = rng.normal(0.0, 0.03, (n, b.k - 1, 3))
        b.add(pos, sigmas, colors, rng.uniform(2.5, 5.0), -np.inf,
              quats=quats, sh_rest=sh_rest)

    plane = PlaneParam(np.array([0.0, 0.0, -1.0]), z0)
    return b.build(), plane


def sample_cameras(cfg: SynthConfig, rng: np.random.Generator
                   ) -> list[tuple[CameraModel, PoseTransform]]:
    cam = CameraModel(fx=0.9 * cfg.width, fy=0.9 * cfg.width,
                      cx=cfg.width / 2.0, cy=cfg.height / 2.0,
                      width=cfg.width, height=cfg.height, znear=SYNTH_ZNEAR)
    n = cfg.n_train_views + cfg.n_test_views
    out = []
    for _ in range(n):
        z = rng.uniform(*cfg.camera_z)
        span = cfg.plane_z - z
        theta = np.radians(rng.uniform(-cfg.azimuth_deg, cfg.azimuth_deg))
        phi = np.radians(rng.uniform(*cfg.elevation_deg))
        eye = np.array([span * np.tan(theta), span * np.tan(phi), z])
        target = np.array([rng.uniform(-0.25, 0.25), rng.uniform(-0.2, 0.2),
                           cfg.plane_z])
        out.append((cam, look_at_pose(eye, target)))
    return out


def plane_ray_depth(plane: PlaneParam, camera: CameraModel,
                    pose: PoseTransform) -> np.ndarray:
    """Camera-z of the per-pixel ray/plane intersection (inf if parallel
    or behind the camera). Pixel rays sample integer coordinates, matching
    the rasterizer grid."""
    px = np.arange(camera.width, dtype=np.float64)
    py = np.arange(camera.height, dtype=np.float64)
    gx, gy = np.meshgrid((px - camera.cx) / camera.fx,
                         (py - camera.cy) / camera.fy)
    dirs_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
    rot = pose.matrix[:3, :3]
    dirs_w = dirs_cam @ rot          # row-vector form of rot.T @ dir
    origin = pose.camera_center
    denom = dirs_w @ plane.normal
    num = -(float(plane.normal @ origin) + plane.offset)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = num / denom
    u[~np.isfinite(u) | (u <= 0)] = np.inf
    return u


def render_ground_truth_view(scene: GaussianScene, plane: PlaneParam,
                             camera: CameraModel, pose: PoseTransform,
                             name: str = "") -> ViewRecord:
    """One dataset view: fused oracle image, rendered mirror mask, and
    depth (mirror pixels carry the plane-surface depth; pixels with
    nothing opaque behind them carry inf)."""
    base = oracle_render(scene, camera, pose)
    mirrored = render_mirror_view(scene, camera, pose, plane, renderer="oracle")
    mask = np.asarray(base.mask, dtype=np.float64)
    fused = fuse_images(np.asarray(base.color, dtype=np.float64),
                        np.asarray(mirrored.color, dtype=np.float64), mask)
    image = quantize_image(np.clip(fused, 0.0, 1.0))
    mask_q = np.round(np.clip(mask, 0.0, 1.0) * 255.0) / 255.0

    depth = np.asarray(base.depth, dtype=np.float64).copy()
    in_mirror = mask_q > 0.5
    depth[in_mirror] = plane_ray_depth(plane, camera, pose)[in_mirror]
    invalid = ~in_mirror & (np.asarray(base.alpha, dtype=np.float64) <= ALPHA_VALID)
    depth[invalid] = np.inf
    depth = depth.astype(np.float32).astype(np.float64)
    return ViewRecord(camera, pose, image, mask_q, depth, name=name)


def synthesize_toy_scene(seed: int, config: SynthConfig | None = None
                         ) -> tuple[GaussianScene, PlaneParam, MirrorDataset]:
    """Build the GT scene and render a complete train/test dataset.

    Deterministic given the seed. Raises SynthesisError when the mirror
    plane faces away from every sampled camera.
    """
    cfg = (config or SynthConfig()).validate()
    rng = np.random.default_rng(seed)
    cameras = sample_cameras(cfg, rng)
    scene, plane = build_ground_truth(cfg, rng)

    sides = [float(plane.normal @ pose.camera_center) + plane.offset
             for _, pose in cameras]
    if all(s <= 0.0 for s in sides):
        raise SynthesisError(
            "mirror plane lies behind every sampled camera; move the camera "
            "band in front of plane_z")

    views = []
    for i, (camera, pose) in enumerate(cameras):
        split = "train" if i < cfg.n_train_views else "test"
        j = i if i < cfg.n_train_views else i - cfg.n_train_views
        views.append(render_ground_truth_view(scene, plane, camera, pose,
                                              name=f"{split}_{j:03d}"))
    dataset = MirrorDataset(views[:cfg.n_train_views],
                            views[cfg.n_train_views:], gt_plane=plane)
    return scene, plane, dataset

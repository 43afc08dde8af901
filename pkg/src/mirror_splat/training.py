"""Two-stage training: coarse geometry plus plane recovery, then fused
refinement against the unmasked ground truth.

Stage 1 trains against red-filled targets so the mirror interior carries
no photometric signal, learns the per-Gaussian mirror attribute from GT
masks, and recovers the mirror plane (RANSAC init at a warmup step, then
co-optimization). Stage 2 freezes the plane and backpropagates through
the fusion of the original and mirrored renders.
"""
from __future__ import annotations

import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .dataset_io import quantize_image
from .errors import ConfigError, TrainingError
from .geometry import PlaneParam, mirror_camera, normalize_plane
from .losses import (
    LossReport,
    combine_stage1,
    combine_stage2,
    d_ssim_loss_grad,
    depth_loss_grad,
    l1_loss_grad,
    mask_loss_grad,
    psnr,
    red_fill,
    ssim,
)
from .mirror import (
    MirrorEstimate,
    filter_mirror_gaussians,
    fuse_backward,
    fuse_images,
    mirror_suppression,
    orient_plane,
    plane_loss,
    ransac_plane,
    render_fused,
)
from .optim import AdamOptimizer, densify_and_prune, position_lr_scale
from .rasterizer import _backward, _forward, _project_scene, render
from .scene import GaussianScene, MirrorDataset, ViewRecord, init_scene, sigmoid

PSNR_CAP_DB = 100.0


@dataclass
class TrainConfig:
    """Hyperparameters for both stages. Defaults are desk scale; the
    "paper" preset restores the published step schedule."""

    gamma: float = 0.2
    lambda_mask: float = 1.0
    lambda_depth: float = 0.1
    stage1_steps: int = 1000
    stage2_steps: int = 4000
    lr_position: float = 1.6e-4
    lr_position_final: float = 0.01
    lr_rotation: float = 1e-3
    lr_log_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_mirror: float = 5e-2
    lr_plane: float = 1e-4
    tau_m: float = 0.5
    tau_alpha: float = 0.5
    ransac_iterations: int = 512
    ransac_threshold_rel: float = 0.01
    plane_warmup_steps: int = 500
    densify_interval: int = 200
    densify_grad_threshold: float = 1.5e-4
    densify_size_rel: float = 0.01
    split_factor: float = 1.6
    prune_opacity: float = 0.005
    max_gaussians: int = 12000
    n_init_points: int = 5000
    sh_degree: int = 2
    radius_sigma_train: float = 3.3
    freeze_plane_points: bool = False
    vanilla: bool = False
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if not (0.0 <= self.gamma < 1.0):
            raise ConfigError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.lambda_mask < 0 or self.lambda_depth < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.stage1_steps < 1 or self.stage2_steps < 1:
            raise ConfigError("step counts must be >= 1")
        for name in ("lr_position", "lr_rotation", "lr_log_scale", "lr_opacity",
                     "lr_sh", "lr_mirror", "lr_plane"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not (0.0 < self.tau_m < 1.0 and 0.0 < self.tau_alpha < 1.0):
            raise ConfigError("filter thresholds must lie in (0, 1)")
        if self.ransac_iterations < 1 or self.ransac_threshold_rel <= 0:
            raise ConfigError("invalid RANSAC parameters")
        if self.densify_interval < 1 or self.max_gaussians < 1:
            raise ConfigError("invalid densify schedule")
        if self.n_init_points < 1:
            raise ConfigError("n_init_points must be >= 1")
        if not 0 <= self.sh_degree <= 3:
            raise ConfigError("sh_degree must be in 0..3")
        if self.radius_sigma_train <= 0:
            raise ConfigError("radius_sigma_train must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        # A run manifest embeds the config under "config"; accept it directly
        # so a manifest file reproduces its run.
        if "config" in data and isinstance(data["config"], dict):
            data = data["config"]
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            cfg = cls(**data)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from exc
        return cfg

    @classmethod
    def from_preset(cls, name: str) -> "TrainConfig":
        if name == "desk":
            return cls()
        if name == "paper":
            return cls(stage1_steps=5000, stage2_steps=65000,
                       plane_warmup_steps=500, n_init_points=100000,
                       max_gaussians=500000)
        raise ConfigError(f"unknown preset '{name}' (expected desk or paper)")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        p = Path(path)
        text = p.read_bytes()
        if p.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError as exc:
                raise ConfigError(
                    "TOML configs need Python >= 3.11; use JSON instead") from exc
            try:
                data = tomllib.loads(text.decode("utf-8"))
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"invalid TOML in {p}: {exc}") from exc
        else:
            import json

            try:
                data = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid JSON in {p}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config root in {p} must be a table/object")
        return cls.from_dict(data)


@dataclass
class StageResult:
    scene: GaussianScene
    plane: PlaneParam | None
    estimate: MirrorEstimate | None
    reports: list[LossReport]
    no_mirror: bool
    skipped_steps: int
    seconds: float


def _adam_lrs(cfg: TrainConfig) -> dict[str, float]:
    return {
        "positions": cfg.lr_position,
        "rotations": cfg.lr_rotation,
        "log_scales": cfg.lr_log_scale,
        "opacity_logits": cfg.lr_opacity,
        "sh_coeffs": cfg.lr_sh,
        "mirror_logits": cfg.lr_mirror,
        "plane": cfg.lr_plane,
    }


def _depth_terms(out, view: ViewRecord, want_grad: bool):
    if view.depth is None:
        zero = np.zeros_like(np.asarray(out.depth, dtype=np.float64))
        return 0.0, (zero if want_grad else None)
    valid = (np.asarray(out.alpha, dtype=np.float64) > 0.5) & np.isfinite(view.depth)
    if want_grad:
        return depth_loss_grad(out.depth, view.depth, valid)
    from .losses import depth_loss

    return depth_loss(out.depth, view.depth, valid), None


def stage1_loss(outputs, view: ViewRecord, plane: PlaneParam | None,
                filtered_points: np.ndarray, config: TrainConfig,
                step: int = 0) -> LossReport:
    """Stage-1 total: lambda_mask * mask + (1-gamma) L1 + gamma D-SSIM
    + lambda_depth * depth + plane, with the rgb terms against the
    red-filled target."""
    target = red_fill(view.image, view.mirror_mask)
    l1, _ = l1_loss_grad(outputs.color, target)
    ds, _ = d_ssim_loss_grad(outputs.color, target)
    mk, _ = mask_loss_grad(outputs.mask, view.mirror_mask)
    dp, _ = _depth_terms(outputs, view, want_grad=True)
    if plane is not None:
        pl, _, _ = plane_loss(plane, filtered_points)
    else:
        pl = 0.0
    return combine_stage1(l1, ds, mk, dp, pl, config.gamma, config.lambda_mask,
                          config.lambda_depth, stage=1, step=step)


def stage2_loss(c_fuse, m, view: ViewRecord, config: TrainConfig,
                step: int = 0) -> LossReport:
    """Stage-2 total: lambda_mask * mask + (1-gamma) L1 + gamma D-SSIM of
    the fused image against the unmasked ground truth."""
    l1, _ = l1_loss_grad(c_fuse, view.image)
    ds, _ = d_ssim_loss_grad(c_fuse, view.image)
    mk, _ = mask_loss_grad(m, view.mirror_mask)
    return combine_stage2(l1, ds, mk, config.gamma, config.lambda_mask, step=step)


def _dataset_has_mirror(dataset: MirrorDataset) -> bool:
    return any(np.any(v.mirror_mask > 0.5) for v in dataset.train_views)


def _bbox_diagonal(positions: np.ndarray) -> float:
    p = positions.astype(np.float64)
    return float(np.linalg.norm(p.max(axis=0) - p.min(axis=0)))


def _mean_camera_center(dataset: MirrorDataset) -> np.ndarray:
    centers = np.stack([v.pose.camera_center for v in dataset.train_views])
    return centers.mean(axis=0)


def _init_plane(scene: GaussianScene, dataset: MirrorDataset,
                cfg: TrainConfig, visibility: np.ndarray
                ) -> tuple[PlaneParam, MirrorEstimate]:
    idx = filter_mirror_gaussians(scene, cfg.tau_m, cfg.tau_alpha)
    # Occluded Gaussians keep whatever mirror attribute they froze with
    # (nothing renders them, so nothing corrects them); only primitives
    # that actually contributed to recent renders may vote on the plane.
    idx = idx[visibility[idx] > 0.0]
    if idx.size < 3:
        raise TrainingError(
            f"only {idx.size} visible mirror Gaussians above tau_m={cfg.tau_m}, "
            f"tau_alpha={cfg.tau_alpha} at the plane warmup step; lower the "
            "thresholds or extend the warmup")
    pts = scene.positions[idx].astype(np.float64)
    alpha = sigmoid(scene.opacity_logits[idx].astype(np.float64))
    m = sigmoid(scene.mirror_logits[idx].astype(np.float64))
    # Threshold is relative to the extent of the point set being fit; the
    # full scene's bounding box would scale it past the mirror itself.
    threshold = cfg.ransac_threshold_rel * _bbox_diagonal(pts)
    estimate = ransac_plane(pts, iterations=cfg.ransac_iterations,
                            threshold=threshold, seed=cfg.seed,
                            weights=alpha * m)
    plane = orient_plane(estimate.plane, _mean_camera_center(dataset))
    estimate = replace(estimate, plane=plane)
    return plane, estimate


class _DensifyTracker:
    """Accumulates per-Gaussian positional gradient norms between calls."""

    def __init__(self, n: int):
        self.reset(n)

    def reset(self, n: int):
        self.accum = np.zeros(n, dtype=np.float64)
        self.count = 0

    def add(self, pos_grads: np.ndarray):
        self.accum += np.linalg.norm(pos_grads, axis=1)
        self.count += 1

    def stats(self) -> np.ndarray:
        return self.accum / max(self.count, 1)


def _maybe_densify(scene: GaussianScene, opt: AdamOptimizer,
                   tracker: _DensifyTracker, rng: np.random.Generator,
                   cfg: TrainConfig, step: int, stage_steps: int
                   ) -> GaussianScene:
    if step > stage_steps // 2 or step % cfg.densify_interval != 0:
        return scene
    new_scene, keep_idx, n_new = densify_and_prune(
        scene, tracker.stats(), rng,
        grad_threshold=cfg.densify_grad_threshold,
        size_rel=cfg.densify_size_rel, split_factor=cfg.split_factor,
        prune_opacity=cfg.prune_opacity, max_gaussians=cfg.max_gaussians)
    opt.remap(keep_idx, n_new)
    tracker.reset(len(new_scene))
    return new_scene


def run_stage1(scene: GaussianScene, dataset: MirrorDataset, cfg: TrainConfig,
               global_step_offset: int = 0, total_steps: int | None = None
               ) -> StageResult:
    t_start = time.perf_counter()
    views = dataset.train_views
    rng_views = np.random.default_rng([cfg.seed, 1])
    rng_densify = np.random.default_rng([cfg.seed, 2])
    opt = AdamOptimizer(_adam_lrs(cfg))
    tracker = _DensifyTracker(len(scene))
    has_mirror = _dataset_has_mirror(dataset) and not cfg.vanilla
    total = total_steps if total_steps is not None else cfg.stage1_steps + cfg.stage2_steps

    plane: PlaneParam | None = None
    plane_vec: np.ndarray | None = None
    estimate: MirrorEstimate | None = None
    reports: list[LossReport] = []
    order = np.empty(0, dtype=np.int64)
    cursor = 0

    for step in range(1, cfg.stage1_steps + 1):
        if cursor >= order.size:
            order = rng_views.permutation(len(views))
            cursor = 0
        view = views[order[cursor]]
        cursor += 1

        p = _project_scene(scene, view.camera, view.pose, None,
                           cfg.radius_sigma_train)
        out = _forward(p, scene.dtype)

        if cfg.vanilla:
            target = np.asarray(view.image, dtype=np.float64)
        else:
            target = red_fill(view.image, view.mirror_mask)
        l1, gl1 = l1_loss_grad(out.color, target)
        ds, gds = d_ssim_loss_grad(out.color, target)
        grad_color = (1.0 - cfg.gamma) * gl1 + cfg.gamma * gds

        if cfg.vanilla:
            mk, dp, pl = 0.0, 0.0, 0.0
            grad_mask = np.zeros_like(out.mask, dtype=np.float64)
            grad_depth = np.zeros_like(out.depth, dtype=np.float64)
            fil = np.empty(0, dtype=np.int64)
            gplane = gpts = None
        else:
            mk, gmk = mask_loss_grad(out.mask, view.mirror_mask)
            dp, gdp = _depth_terms(out, view, want_grad=True)
            grad_mask = cfg.lambda_mask * gmk
            grad_depth = cfg.lambda_depth * gdp
            if plane is not None:
                fil = filter_mirror_gaussians(scene, cfg.tau_m, cfg.tau_alpha)
                pl, gplane, gpts = plane_loss(plane, scene.positions[fil].astype(np.float64))
            else:
                fil = np.empty(0, dtype=np.int64)
                pl, gplane, gpts = 0.0, None, None

        grads, _ = _backward(p, grad_color, grad_mask, grad_depth)
        gd = grads.as_dict()
        if gpts is not None and not cfg.freeze_plane_points and fil.size:
            gd["positions"][fil] += gpts
        tracker.add(gd["positions"])

        params = scene.params()
        if plane_vec is not None:
            params = dict(params)
            params["plane"] = plane_vec
            gd["plane"] = gplane if gplane is not None else np.zeros(4)
        gstep = global_step_offset + step - 1
        applied = opt.step(params, gd, {
            "positions": position_lr_scale(gstep, total, cfg.lr_position_final)})
        if applied:
            scene.normalize_rotations()
            if plane_vec is not None:
                norm = float(np.linalg.norm(plane_vec[:3]))
                if norm <= 0 or not np.isfinite(norm):
                    raise TrainingError("plane normal collapsed during stage 1")
                plane_vec /= norm
                plane = PlaneParam(plane_vec[:3].copy(), float(plane_vec[3]))

        reports.append(combine_stage1(
            l1, ds, mk, dp, pl, cfg.gamma, cfg.lambda_mask, cfg.lambda_depth,
            stage=1, step=step, n_gaussians=len(scene)))

        if has_mirror and plane is None and step == cfg.plane_warmup_steps:
            plane, estimate = _init_plane(scene, dataset, cfg, tracker.stats())
            plane_vec = np.concatenate([plane.normal, [plane.offset]])

        scene = _maybe_densify(scene, opt, tracker, rng_densify, cfg, step,
                               cfg.stage1_steps)

    if has_mirror and plane is None:
        raise TrainingError(
            f"stage 1 finished after {cfg.stage1_steps} steps without reaching "
            f"the plane warmup at step {cfg.plane_warmup_steps}; no plane was "
            "estimated")
    if plane is not None:
        plane = normalize_plane(plane)
    return StageResult(scene=scene, plane=plane, estimate=estimate,
                       reports=reports, no_mirror=not has_mirror,
                       skipped_steps=opt.skipped,
                       seconds=time.perf_counter() - t_start)


def train_stage1(scene: GaussianScene, dataset: MirrorDataset,
                 config: TrainConfig) -> tuple[GaussianScene, PlaneParam | None]:
    """Spec-facing wrapper: returns the trained scene and the recovered
    plane (None when the dataset has no mirror or in vanilla mode)."""
    result = run_stage1(scene, dataset, config)
    return result.scene, result.plane


def run_stage2(scene: GaussianScene, plane: PlaneParam | None,
               dataset: MirrorDataset, cfg: TrainConfig,
               global_step_offset: int | None = None,
               total_steps: int | None = None) -> StageResult:
    t_start = time.perf_counter()
    fused_mode = plane is not None and not cfg.vanilla
    if fused_mode and not plane.is_normalized():
        raise TrainingError("stage 2 requires a normalized plane")
    plane_bytes = None
    if plane is not None:
        plane_bytes = (plane.normal.tobytes(), plane.offset)

    views = dataset.train_views
    rng_views = np.random.default_rng([cfg.seed, 3])
    rng_densify = np.random.default_rng([cfg.seed, 4])
    opt = AdamOptimizer(_adam_lrs(cfg))
    tracker = _DensifyTracker(len(scene))
    offset = global_step_offset if global_step_offset is not None else cfg.stage1_steps
    total = total_steps if total_steps is not None else cfg.stage1_steps + cfg.stage2_steps

    reports: list[LossReport] = []
    order = np.empty(0, dtype=np.int64)
    cursor = 0

    for step in range(1, cfg.stage2_steps + 1):
        if cursor >= order.size:
            order = rng_views.permutation(len(views))
            cursor = 0
        view = views[order[cursor]]
        cursor += 1

        p = _project_scene(scene, view.camera, view.pose, None,
                           cfg.radius_sigma_train)
        out = _forward(p, scene.dtype)

        if fused_mode:
            scale = mirror_suppression(scene)
            vpose = mirror_camera(plane, view.pose)
            pm = _project_scene(scene, view.camera, vpose, scale,
                                cfg.radius_sigma_train)
            outm = _forward(pm, scene.dtype)
            fused = fuse_images(np.asarray(out.color, dtype=np.float64),
                                np.asarray(outm.color, dtype=np.float64),
                                np.asarray(out.mask, dtype=np.float64))
            l1, gl1 = l1_loss_grad(fused, view.image)
            ds, gds = d_ssim_loss_grad(fused, view.image)
            mk, gmk = mask_loss_grad(out.mask, view.mirror_mask)
            grad_fuse = (1.0 - cfg.gamma) * gl1 + cfg.gamma * gds
            g_base, g_mirr, g_mask_fuse = fuse_backward(
                grad_fuse, out.color, outm.color, out.mask)
            grad_mask = g_mask_fuse + cfg.lambda_mask * gmk
            zero_depth = np.zeros((view.camera.height, view.camera.width))
            grads_o, _ = _backward(p, g_base, grad_mask, zero_depth)
            grads_m, d_scale = _backward(pm, g_mirr,
                                         np.zeros_like(zero_depth), zero_depth)
            gd = grads_o.as_dict()
            gm = grads_m.as_dict()
            for name in gd:
                gd[name] = gd[name] + gm[name]
            # Suppression chain: scale = 1 - sigmoid(mirror_logit).
            m = sigmoid(scene.mirror_logits.astype(np.float64))
            gd["mirror_logits"] += d_scale * (-m * (1.0 - m))
        else:
            l1, gl1 = l1_loss_grad(out.color, view.image)
            ds, gds = d_ssim_loss_grad(out.color, view.image)
            mk = 0.0
            grad_color = (1.0 - cfg.gamma) * gl1 + cfg.gamma * gds
            zero = np.zeros_like(np.asarray(out.mask, dtype=np.float64))
            grads_o, _ = _backward(p, grad_color, zero, zero)
            gd = grads_o.as_dict()

        tracker.add(gd["positions"])
        gstep = offset + step - 1
        applied = opt.step(scene.params(), gd, {
            "positions": position_lr_scale(gstep, total, cfg.lr_position_final)})
        if applied:
            scene.normalize_rotations()

        reports.append(combine_stage2(
            l1, ds, mk, cfg.gamma, cfg.lambda_mask, step=step,
            n_gaussians=len(scene)))

        scene = _maybe_densify(scene, opt, tracker, rng_densify, cfg, step,
                               cfg.stage2_steps)

    if plane is not None:
        now = (plane.normal.tobytes(), plane.offset)
        if now != plane_bytes:
            raise TrainingError("plane changed during stage 2; it must be frozen")
    return StageResult(scene=scene, plane=plane, estimate=None,
                       reports=reports, no_mirror=plane is None,
                       skipped_steps=opt.skipped,
                       seconds=time.perf_counter() - t_start)


def train_stage2(scene: GaussianScene, plane: PlaneParam | None,
                 dataset: MirrorDataset, config: TrainConfig) -> GaussianScene:
    """Spec-facing wrapper: stage 2 with the plane frozen."""
    return run_stage2(scene, plane, dataset, config).scene


@dataclass
class TrainOutput:
    scene: GaussianScene
    plane: PlaneParam | None
    estimate: MirrorEstimate | None
    reports: list[LossReport]
    no_mirror: bool
    skipped_steps: int
    stage_seconds: dict[str, float] = field(default_factory=dict)


def train_full(dataset: MirrorDataset, cfg: TrainConfig) -> TrainOutput:
    """Init, stage 1, stage 2. The single entry point used by the CLI."""
    cfg.validate()
    scene = init_scene(dataset, cfg.n_init_points, cfg.seed, cfg.sh_degree)
    total = cfg.stage1_steps + cfg.stage2_steps
    s1 = run_stage1(scene, dataset, cfg, global_step_offset=0, total_steps=total)
    s2 = run_stage2(s1.scene, s1.plane, dataset, cfg,
                    global_step_offset=cfg.stage1_steps, total_steps=total)
    return TrainOutput(scene=s2.scene, plane=s2.plane, estimate=s1.estimate,
                       reports=s1.reports + s2.reports,
                       no_mirror=s1.no_mirror,
                       skipped_steps=s1.skipped_steps + s2.skipped_steps,
                       stage_seconds={"stage1": s1.seconds, "stage2": s2.seconds})


def _region_ssim(a: np.ndarray, b: np.ndarray, sel: np.ndarray) -> float | None:
    """SSIM averaged over 11x11 windows whose center pixel is selected."""
    from .losses import SSIM_WINDOW, _ssim_channel_maps, gaussian_window

    half = SSIM_WINDOW // 2
    h, w = sel.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        return None
    centers = sel[half:h - half, half:w - half]
    if not np.any(centers):
        return None
    win = gaussian_window()
    total = 0.0
    for c in range(a.shape[2]):
        _, _, a1, a2, b1, b2 = _ssim_channel_maps(
            np.asarray(a[:, :, c], dtype=np.float64),
            np.asarray(b[:, :, c], dtype=np.float64), win)
        smap = a1 * a2 / (b1 * b2)
        total += float(smap[centers].mean())
    return total / a.shape[2]


def evaluate(scene: GaussianScene, plane: PlaneParam | None,
             dataset: MirrorDataset, region: str = "full",
             fps_renders: int = 50) -> dict:
    """PSNR/SSIM of quantized fused renders against stored GT, plus FPS.

    Renders go through the same 8-bit sRGB quantization as the dataset
    export so a checkpoint of the generating scene scores an exact match
    (PSNR reported at the 100 dB cap). region="mirror" restricts metrics
    to pixels with M_gt > 0.5; views without mirror pixels are reported
    as undefined and excluded from aggregates.
    """
    if region not in ("full", "mirror"):
        raise ConfigError(f"region must be 'full' or 'mirror', got '{region}'")
    if not dataset.test_views:
        raise TrainingError("dataset has no test views to evaluate")

    per_view = []
    undefined = []
    depth_rels = []
    for view in dataset.test_views:
        base, _, fused = render_fused(scene, plane, view.camera, view.pose,
                                      renderer="oracle")
        pred = quantize_image(np.clip(fused, 0.0, 1.0))
        gt = np.asarray(view.image, dtype=np.float64)
        sel = np.asarray(view.mirror_mask, dtype=np.float64) > 0.5
        if region == "mirror":
            if not np.any(sel):
                undefined.append(view.name)
                per_view.append({"view": view.name, "psnr": None, "ssim": None})
                continue
            view_psnr = psnr(pred[sel], gt[sel], cap_db=PSNR_CAP_DB)
            view_ssim = _region_ssim(pred, gt, sel)
        else:
            view_psnr = psnr(pred, gt, cap_db=PSNR_CAP_DB)
            view_ssim = ssim(pred, gt)
        per_view.append({"view": view.name, "psnr": view_psnr, "ssim": view_ssim})
        if view.depth is not None and np.any(sel):
            d = np.asarray(base.depth, dtype=np.float64)
            gt_d = np.asarray(view.depth, dtype=np.float64)
            ok = sel & np.isfinite(gt_d) & (gt_d > 0)
            if np.any(ok):
                depth_rels.append(float(np.mean(np.abs(d[ok] - gt_d[ok]) / gt_d[ok])))

    defined = [v for v in per_view if v["psnr"] is not None]
    ssims = [v["ssim"] for v in defined if v["ssim"] is not None]
    timing_view = dataset.test_views[0]
    n_render = max(int(fps_renders), 50)
    t0 = time.perf_counter()
    for _ in range(n_render):
        render_fused(scene, plane, timing_view.camera, timing_view.pose,
                     renderer="tile")
    elapsed = time.perf_counter() - t0
    return {
        "region": region,
        "psnr": float(np.mean([v["psnr"] for v in defined])) if defined else None,
        "ssim": float(np.mean(ssims)) if ssims else None,
        "fps": n_render / elapsed if elapsed > 0 else float("inf"),
        "views": per_view,
        "undefined_views": undefined,
        "depth_rel_mirror": float(np.mean(depth_rels)) if depth_rels else None,
        "n_gaussians": len(scene),
    }

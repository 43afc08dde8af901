"""Training losses with analytic gradients.

Every loss ships a *_grad variant returning (value, gradient wrt the
prediction) so the training loop never needs numeric differentiation.
All loss math runs in float64 regardless of render dtype.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .errors import TrainingError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def _check_shapes(a: np.ndarray, b: np.ndarray, op: str):
    if a.shape != b.shape:
        raise TrainingError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def l1_loss(pred, target) -> float:
    p, t = _as64(pred), _as64(target)
    _check_shapes(p, t, "l1_loss")
    return float(np.abs(p - t).mean())


def l1_loss_grad(pred, target) -> tuple[float, np.ndarray]:
    p, t = _as64(pred), _as64(target)
    _check_shapes(p, t, "l1_loss")
    diff = p - t
    # Subgradient 0 where pred == target.
    grad = np.sign(diff) / diff.size
    return float(np.abs(diff).mean()), grad


def mask_loss(pred_mask, gt_mask) -> float:
    return l1_loss(pred_mask, gt_mask)


def mask_loss_grad(pred_mask, gt_mask) -> tuple[float, np.ndarray]:
    return l1_loss_grad(pred_mask, gt_mask)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2D Gaussian window used by SSIM."""
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def _ssim_channel_maps(p: np.ndarray, t: np.ndarray, win: np.ndarray):
    mu1 = convolve2d(p, win, mode="valid")
    mu2 = convolve2d(t, win, mode="valid")
    p2 = convolve2d(p * p, win, mode="valid")
    t2 = convolve2d(t * t, win, mode="valid")
    pt = convolve2d(p * t, win, mode="valid")
    s1 = p2 - mu1 * mu1
    s2 = t2 - mu2 * mu2
    s12 = pt - mu1 * mu2
    c1 = SSIM_K1 * SSIM_K1
    c2 = SSIM_K2 * SSIM_K2
    a1 = 2.0 * mu1 * mu2 + c1
    a2 = 2.0 * s12 + c2
    b1 = mu1 * mu1 + mu2 * mu2 + c1
    b2 = s1 + s2 + c2
    return mu1, mu2, a1, a2, b1, b2


def _ssim_prepare(pred, target, op: str):
    p, t = _as64(pred), _as64(target)
    _check_shapes(p, t, op)
    if p.ndim == 2:
        p = p[:, :, None]
        t = t[:, :, None]
    if p.ndim != 3:
        raise TrainingError(f"{op}: expected (H, W) or (H, W, C) images, got {p.shape}")
    if p.shape[0] < SSIM_WINDOW or p.shape[1] < SSIM_WINDOW:
        raise TrainingError(
            f"{op}: images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {p.shape[:2]}")
    return p, t


def ssim(pred, target) -> float:
    """Mean SSIM, 11x11 Gaussian window sigma=1.5, dynamic range 1."""
    p, t, = _ssim_prepare(pred, target, "ssim")
    win = gaussian_window()
    total = 0.0
    for c in range(p.shape[2]):
        _, _, a1, a2, b1, b2 = _ssim_channel_maps(p[:, :, c], t[:, :, c], win)
        total += float((a1 * a2 / (b1 * b2)).mean())
    return total / p.shape[2]


def d_ssim_loss(pred, target) -> float:
    return (1.0 - ssim(pred, target)) / 2.0


def d_ssim_loss_grad(pred, target) -> tuple[float, np.ndarray]:
    """(1 - SSIM)/2 and its gradient wrt pred via adjoint convolutions."""
    p, t = _ssim_prepare(pred, target, "d_ssim_loss")
    win = gaussian_window()
    grad = np.zeros_like(p)
    total = 0.0
    nval = None
    for c in range(p.shape[2]):
        pc, tc = p[:, :, c], t[:, :, c]
        mu1, mu2, a1, a2, b1, b2 = _ssim_channel_maps(pc, tc, win)
        s_map = a1 * a2 / (b1 * b2)
        total += float(s_map.mean())
        if nval is None:
            nval = s_map.size
        # d(loss)/d(S_ij): loss = (1 - mean S)/2 over all channels jointly.
        gmap = -1.0 / (2.0 * nval * p.shape[2])
        inv_bb = 1.0 / (b1 * b2)
        g_a1 = gmap * a2 * inv_bb
        g_a2 = gmap * a1 * inv_bb
        g_b1 = -gmap * s_map / b1
        g_b2 = -gmap * s_map / b2
        # Conv outputs: mu1, P=conv(p^2), R=conv(p*t). a2 and b2 fold in the
        # mu-dependence of s12 and s1.
        d_mu1 = 2.0 * mu2 * g_a1 - 2.0 * mu2 * g_a2 + 2.0 * mu1 * g_b1 - 2.0 * mu1 * g_b2
        d_p2 = g_b2
        d_pt = 2.0 * g_a2
        # Adjoint of a 'valid' correlation with a symmetric kernel is a
        # 'full' convolution with the same kernel.
        grad[:, :, c] = (convolve2d(d_mu1, win, mode="full")
                         + convolve2d(d_p2, win, mode="full") * 2.0 * pc
                         + convolve2d(d_pt, win, mode="full") * tc)
    value = (1.0 - total / p.shape[2]) / 2.0
    if np.asarray(pred).ndim == 2:
        return value, grad[:, :, 0]
    return value, grad


def depth_loss(pred, target, valid_mask) -> float:
    p, t = _as64(pred), _as64(target)
    _check_shapes(p, t, "depth_loss")
    v = np.asarray(valid_mask, dtype=bool)
    _check_shapes(np.empty(v.shape), p, "depth_loss valid_mask")
    count = int(v.sum())
    if count == 0:
        return 0.0
    return float(np.abs(p[v] - t[v]).sum() / count)


def depth_loss_grad(pred, target, valid_mask) -> tuple[float, np.ndarray]:
    p, t = _as64(pred), _as64(target)
    _check_shapes(p, t, "depth_loss")
    v = np.asarray(valid_mask, dtype=bool)
    count = int(v.sum())
    grad = np.zeros_like(p)
    if count == 0:
        return 0.0, grad
    diff = p - t
    grad[v] = np.sign(diff[v]) / count
    return float(np.abs(diff[v]).sum() / count), grad


def psnr(pred, target, cap_db: float = 100.0) -> float:
    """Peak signal-to-noise ratio for unit dynamic range, capped at cap_db.

    A zero MSE (identical images) reports the cap rather than infinity.
    """
    p, t = _as64(pred), _as64(target)
    _check_shapes(p, t, "psnr")
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return cap_db
    return float(min(cap_db, 10.0 * np.log10(1.0 / mse)))


def red_fill(image, mask) -> np.ndarray:
    """Copy of `image` with (1, 0, 0) wherever mask > 0.5."""
    img = _as64(image)
    m = np.asarray(mask)
    if img.ndim != 3 or img.shape[2] != 3:
        raise TrainingError(f"red_fill: expected (H, W, 3) image, got {img.shape}")
    if m.shape != img.shape[:2]:
        raise TrainingError(f"red_fill: mask {m.shape} does not match image {img.shape[:2]}")
    out = img.copy()
    out[m > 0.5] = (1.0, 0.0, 0.0)
    return out


@dataclass
class LossReport:
    """Per-step loss breakdown. `rgb` is the composite (1-gamma) L1 + gamma
    D-SSIM term; `total` applies the stage weighting to the raw terms."""

    stage: int
    step: int
    rgb: float
    mask: float
    depth: float
    plane: float
    total: float
    l1: float = 0.0
    dssim: float = 0.0
    gamma: float = 0.0
    lambda_mask: float = 0.0
    lambda_depth: float = 0.0
    n_gaussians: int = 0
    extras: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {
            "stage": self.stage, "step": self.step, "rgb": self.rgb,
            "mask": self.mask, "depth": self.depth, "plane": self.plane,
            "total": self.total, "l1": self.l1, "dssim": self.dssim,
            "gamma": self.gamma, "lambda_mask": self.lambda_mask,
            "lambda_depth": self.lambda_depth, "n_gaussians": self.n_gaussians,
        }
        d.update(self.extras)
        return d


def combine_stage1(l1: float, dssim: float, mask_l: float, depth_l: float,
                   plane_l: float, gamma: float, lambda_mask: float,
                   lambda_depth: float, stage: int = 1, step: int = 0,
                   n_gaussians: int = 0) -> LossReport:
    rgb = (1.0 - gamma) * l1 + gamma * dssim
    total = lambda_mask * mask_l + rgb + lambda_depth * depth_l + plane_l
    return LossReport(stage=stage, step=step, rgb=rgb, mask=mask_l,
                      depth=depth_l, plane=plane_l, total=total, l1=l1,
                      dssim=dssim, gamma=gamma, lambda_mask=lambda_mask,
                      lambda_depth=lambda_depth, n_gaussians=n_gaussians)


def combine_stage2(l1: float, dssim: float, mask_l: float, gamma: float,
                   lambda_mask: float, step: int = 0,
                   n_gaussians: int = 0) -> LossReport:
    rgb = (1.0 - gamma) * l1 + gamma * dssim
    total = lambda_mask * mask_l + rgb
    return LossReport(stage=2, step=step, rgb=rgb, mask=mask_l, depth=0.0,
                      plane=0.0, total=total, l1=l1, dssim=dssim, gamma=gamma,
                      lambda_mask=lambda_mask, lambda_depth=0.0,
                      n_gaussians=n_gaussians)

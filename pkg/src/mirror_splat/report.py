"""Run reports: delimited loss/eval tables plus matplotlib figures.

Everything renders through the Agg backend so reports work in headless
environments; figures land in the same directory as the CSV files.
"""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .dataset_io import srgb_encode
from .errors import TrainingError
from .geometry import PlaneParam
from .losses import LossReport
from .mirror import render_fused
from .scene import GaussianScene, MirrorDataset

LOSS_COLUMNS = ["stage", "step", "total", "rgb", "l1", "dssim", "mask",
                "depth", "plane", "n_gaussians"]
EVAL_COLUMNS = ["region", "view", "psnr", "ssim", "fps", "depth_rel_mirror"]


def write_loss_csv(reports: list[LossReport], path) -> Path:
    p = Path(path)
    with p.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOSS_COLUMNS)
        for r in reports:
            w.writerow([r.stage, r.step, f"{r.total:.8g}", f"{r.rgb:.8g}",
                        f"{r.l1:.8g}", f"{r.dssim:.8g}", f"{r.mask:.8g}",
                        f"{r.depth:.8g}", f"{r.plane:.8g}", r.n_gaussians])
    return p


def write_eval_csv(results: list[dict], path) -> Path:
    """One row per (region, view) plus a mean row per region; metric cells
    stay empty for views whose region is undefined."""

    def fmt(value):
        return "" if value is None else f"{value:.6g}"

    p = Path(path)
    with p.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(EVAL_COLUMNS)
        for res in results:
            for row in res.get("views", []):
                w.writerow([res["region"], row["view"], fmt(row["psnr"]),
                            fmt(row["ssim"]), "", ""])
            w.writerow([res["region"], "mean", fmt(res["psnr"]),
                        fmt(res["ssim"]), fmt(res.get("fps")),
                        fmt(res.get("depth_rel_mirror"))])
    return p


def _smooth(values: np.ndarray, window: int = 25) -> np.ndarray:
    if values.size <= window:
        return values
    kernel = np.ones(window) / window
    pad = np.concatenate([np.full(window - 1, values[0]), values])
    return np.convolve(pad, kernel, mode="valid")


def plot_loss_curves(reports: list[LossReport], path) -> Path:
    if not reports:
        raise TrainingError("no loss reports to plot")
    p = Path(path)
    step = np.array([r.step for r in reports])
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))

    ax = axes[0]
    ax.plot(step, _smooth(np.array([r.total for r in reports])), label="total")
    ax.plot(step, _smooth(np.array([r.rgb for r in reports])), label="rgb")
    ax.plot(step, _smooth(np.array([r.mask for r in reports])), label="mask")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)

    ax = axes[1]
    ax.plot(step, [r.n_gaussians for r in reports], color="tab:gray")
    ax.set_xlabel("step")
    ax.set_ylabel("gaussians")

    boundary = [r.step for r in reports if r.stage == 2]
    if boundary and boundary[0] > step.min():
        for a in axes:
            a.axvline(boundary[0], color="k", linewidth=0.8, linestyle=":")

    fig.tight_layout()
    fig.savefig(p, dpi=110)
    plt.close(fig)
    return p


def _to_display(img: np.ndarray) -> np.ndarray:
    return srgb_encode(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0))


def plot_view_grid(scene: GaussianScene, plane: PlaneParam | None,
                   dataset: MirrorDataset, path, max_views: int = 4) -> Path:
    """Ground truth, fused render, and rendered mirror mask per test view."""
    views = dataset.test_views[:max_views]
    if not views:
        raise TrainingError("dataset has no test views to plot")
    p = Path(path)
    fig, axes = plt.subplots(len(views), 3, figsize=(7.5, 2.5 * len(views)),
                             squeeze=False)
    for i, view in enumerate(views):
        base, _, fused = render_fused(scene, plane, view.camera, view.pose,
                                      renderer="oracle")
        axes[i][0].imshow(_to_display(view.image))
        axes[i][1].imshow(_to_display(fused))
        axes[i][2].imshow(np.clip(base.mask, 0.0, 1.0), cmap="gray",
                          vmin=0.0, vmax=1.0)
        axes[i][0].set_ylabel(view.name, fontsize=8)
        for ax in axes[i]:
            ax.set_xticks([])
            ax.set_yticks([])
    for ax, title in zip(axes[0], ["ground truth", "fused render", "mask"]):
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(p, dpi=110)
    plt.close(fig)
    return p


def write_report(out_dir, reports: list[LossReport],
                 eval_results: list[dict] | None = None,
                 scene: GaussianScene | None = None,
                 plane: PlaneParam | None = None,
                 dataset: MirrorDataset | None = None) -> list[Path]:
    """Write losses.csv + loss_curves.png, and optionally eval.csv and a
    test-view figure. Returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [write_loss_csv(reports, out / "losses.csv"),
               plot_loss_curves(reports, out / "loss_curves.png")]
    if eval_results:
        written.append(write_eval_csv(eval_results, out / "eval.csv"))
    if scene is not None and dataset is not None and dataset.test_views:
        written.append(plot_view_grid(scene, plane, dataset, out / "views.png"))
    return written

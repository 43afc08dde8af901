"""Command-line entry point: synth / train / render / eval / inspect.

Every run writes a RunManifest up front (atomically) and finalizes it on
exit, so a finished run can be reproduced bit-for-bit by pointing --config
at the manifest. Exit codes: 0 success, 2 configuration, 3 data/IO,
4 training/estimation failures.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataset_io import (
    _camera_from_json,
    image_to_uint8,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
    write_png,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    InvalidPlaneError,
    MirrorSplatError,
    PlaneEstimationError,
    RenderError,
    SynthesisError,
    TrainingError,
)
from .geometry import PoseTransform, plane_to_json
from .mirror import render_fused
from .scene import sigmoid
from .synthesizer import SynthConfig, synthesize_toy_scene
from .training import TrainConfig, evaluate, train_full

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAIN = 4


@dataclass
class RunManifest:
    """Reproducibility record for one command invocation.

    Written atomically when the run starts and finalized (status, timings)
    when it ends. Feeding the file back through --config reproduces the run:
    TrainConfig.from_dict reads the embedded config snapshot.
    """

    command: str
    seed: int
    config: dict
    dataset: str
    outputs: dict
    version_tag: str = __version__
    status: str = "running"
    timings: dict = field(default_factory=dict)

    def write(self, path) -> None:
        p = Path(path)
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, p)


def _flag_name(field_name: str) -> str:
    return "--" + field_name.replace("_", "-")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """Surface every TrainConfig field as a flag; None means 'not given'."""
    group = parser.add_argument_group("hyperparameters")
    for f in fields(TrainConfig):
        if f.name in ("seed", "vanilla"):
            continue
        if isinstance(f.default, bool):
            group.add_argument(_flag_name(f.name), dest=f.name, default=None,
                               action=argparse.BooleanOptionalAction)
        else:
            group.add_argument(_flag_name(f.name), dest=f.name, default=None,
                               type=type(f.default), metavar="V")


def _build_config(args) -> TrainConfig:
    if args.config and args.preset:
        raise ConfigError("--config and --preset are mutually exclusive")
    if args.config:
        cfg = TrainConfig.from_file(args.config)
    elif args.preset:
        cfg = TrainConfig.from_preset(args.preset)
    else:
        cfg = TrainConfig()
    overrides = {}
    for f in fields(TrainConfig):
        if f.name in ("seed", "vanilla"):
            continue
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.vanilla:
        overrides["vanilla"] = True
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg.validate()


def cmd_synth(args) -> int:
    config = SynthConfig(n_train_views=args.train_views,
                         n_test_views=args.test_views,
                         width=args.resolution, height=args.resolution)
    config.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command="synth", seed=args.seed,
        config={"synth": asdict(config)}, dataset=str(out),
        outputs={"dataset": str(out), "gt_checkpoint": str(out / "gt_scene")})
    manifest.write(out / "run_manifest.json")

    t0 = time.perf_counter()
    scene, plane, dataset = synthesize_toy_scene(args.seed, config)
    save_dataset(dataset, out)
    save_checkpoint(scene, plane, out / "gt_scene")
    manifest.status = "complete"
    manifest.timings = {"synth": time.perf_counter() - t0}
    manifest.write(out / "run_manifest.json")
    n = len(dataset.train_views) + len(dataset.test_views)
    print(f"wrote {n} views to {out} (gt scene: {len(scene)} gaussians)")
    return 0


def cmd_train(args) -> int:
    cfg = _build_config(args)
    dataset = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {
        "checkpoint": str(out / "checkpoint"),
        "plane": str(out / "plane.json"),
        "loss_log": str(out / "losses.jsonl"),
        "report": str(out),
    }
    manifest = RunManifest(command="train", seed=cfg.seed, config=cfg.to_dict(),
                           dataset=str(args.dataset), outputs=outputs)
    manifest.write(out / "run_manifest.json")

    result = train_full(dataset, cfg)

    estimate = result.estimate.to_dict() if result.estimate is not None else None
    save_checkpoint(result.scene, result.plane, out / "checkpoint",
                    mirror_estimate=estimate)
    if result.plane is not None:
        (out / "plane.json").write_text(plane_to_json(result.plane) + "\n")
    with (out / "losses.jsonl").open("w") as f:
        for r in result.reports:
            f.write(json.dumps(r.as_dict(), sort_keys=True) + "\n")

    from .report import write_report

    write_report(out, result.reports, scene=result.scene, plane=result.plane,
                 dataset=dataset)

    manifest.status = "complete"
    manifest.timings = dict(result.stage_seconds)
    manifest.write(out / "run_manifest.json")
    mode = "vanilla" if cfg.vanilla else ("no-mirror" if result.no_mirror else "mirror")
    print(f"trained {len(result.scene)} gaussians ({mode}) in "
          f"{sum(result.stage_seconds.values()):.0f}s; outputs in {out}")
    return 0


def _resolve_view(args):
    if args.view:
        if not args.dataset:
            raise ConfigError("--view needs --dataset to resolve the pose")
        split, _, index = args.view.partition(":")
        if split not in ("train", "test") or not index.isdigit():
            raise ConfigError(f"--view must be train:N or test:N, got '{args.view}'")
        dataset = load_dataset(args.dataset)
        views = dataset.train_views if split == "train" else dataset.test_views
        i = int(index)
        if i >= len(views):
            raise ConfigError(f"view {args.view} out of range ({len(views)} in split)")
        return views[i].camera, views[i].pose
    if args.pose:
        spec = json.loads(Path(args.pose).read_text())
        try:
            camera = _camera_from_json(spec["camera"])
            pose = PoseTransform(np.array(spec["pose"], dtype=np.float64))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad pose spec {args.pose}: {exc}") from exc
        return camera, pose
    raise ConfigError("give either --view split:N (with --dataset) or --pose file")


def cmd_render(args) -> int:
    scene, plane, _ = load_checkpoint(args.checkpoint)
    camera, pose = _resolve_view(args)
    base, _, fused = render_fused(scene, plane, camera, pose,
                                  renderer=args.renderer)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    write_png(out, image_to_uint8(np.clip(fused, 0.0, 1.0)))
    if args.mask_out:
        mask = np.round(np.clip(base.mask, 0.0, 1.0) * 255.0).astype(np.uint8)
        write_png(args.mask_out, mask)
    if args.depth_out:
        depth = np.asarray(base.depth, dtype=np.float64)
        finite = np.isfinite(depth) & (np.asarray(base.alpha) > 0.5)
        vis = np.zeros_like(depth)
        if np.any(finite):
            lo, hi = depth[finite].min(), depth[finite].max()
            span = hi - lo if hi > lo else 1.0
            # Near = bright, far = dark; undefined pixels stay black.
            vis[finite] = 1.0 - (depth[finite] - lo) / span
        write_png(args.depth_out, np.round(vis * 255.0).astype(np.uint8))
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    scene, plane, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    result = evaluate(scene, plane, dataset, region=args.region)
    summary = {k: v for k, v in result.items() if k != "views"}
    print(json.dumps(summary, indent=2, sort_keys=True))
    if args.out:
        from .report import plot_view_grid, write_eval_csv

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_eval_csv([result], out / "eval.csv")
        plot_view_grid(scene, plane, dataset, out / "views.png")
    return 0


def _print_histogram(name: str, values: np.ndarray, bins: int = 10) -> None:
    counts, edges = np.histogram(values, bins=bins)
    peak = max(int(counts.max()), 1)
    print(f"  {name}:")
    for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
        bar = "#" * max(1, round(40 * c / peak)) if c else ""
        print(f"    [{lo:10.4f}, {hi:10.4f})  {c:7d}  {bar}")


def cmd_inspect(args) -> int:
    scene, plane, estimate = load_checkpoint(args.checkpoint)
    m = sigmoid(scene.mirror_logits.astype(np.float64))
    alpha = sigmoid(scene.opacity_logits.astype(np.float64))
    print(f"gaussians: {len(scene)} (sh degree {scene.sh_degree})")
    print(f"mirror gaussians (m > 0.5): {int((m > 0.5).sum())}")
    if plane is not None:
        n = plane.normal
        print(f"plane: normal [{n[0]:.6f}, {n[1]:.6f}, {n[2]:.6f}], "
              f"offset {plane.offset:.6f}")
    else:
        print("plane: none")
    if estimate:
        print(f"ransac support: {estimate.get('support'):.3f} inlier fraction, "
              f"inlier rms {estimate.get('inlier_rms'):.3g}")
    print("histograms:")
    _print_histogram("opacity", alpha)
    _print_histogram("mirror", m)
    _print_histogram("log_scale", scene.log_scales.astype(np.float64).ravel())
    ext = scene.positions.astype(np.float64)
    print(f"  position bounds: min {np.round(ext.min(axis=0), 3).tolist()} "
          f"max {np.round(ext.max(axis=0), 3).tolist()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mirror-splat",
        description="Gaussian splatting with learned planar mirrors.",
        epilog="MIRROR_SPLAT_THREADS caps rasterizer tile parallelism.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic mirror dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--train-views", type=int, default=30)
    p.add_argument("--test-views", type=int, default=8)
    p.add_argument("--resolution", type=int, default=64,
                   help="square image size in pixels (minimum 32)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the two-stage training pipeline")
    p.add_argument("dataset", help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None,
                   help="JSON/TOML config or a run_manifest.json to reproduce")
    p.add_argument("--preset", choices=("desk", "paper"), default=None)
    p.add_argument("--vanilla", action="store_true",
                   help="plain 3DGS baseline: no mirror attributes, plane, or fusion")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a fused view from a checkpoint")
    p.add_argument("checkpoint", help="checkpoint directory")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--dataset", default=None, help="dataset to take poses from")
    p.add_argument("--view", default=None, help="pose by split index, e.g. test:0")
    p.add_argument("--pose", default=None,
                   help="JSON file with 'camera' and 4x4 'pose' entries")
    p.add_argument("--renderer", choices=("oracle", "tile"), default="oracle")
    p.add_argument("--mask-out", default=None, help="also write the mirror mask PNG")
    p.add_argument("--depth-out", default=None, help="also write a depth PNG")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM/FPS of a checkpoint on a dataset")
    p.add_argument("checkpoint", help="checkpoint directory")
    p.add_argument("dataset", help="dataset directory")
    p.add_argument("--region", choices=("full", "mirror"), default="full")
    p.add_argument("--out", default=None,
                   help="directory for eval.csv and the view figure")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="summarize a checkpoint")
    p.add_argument("checkpoint", help="checkpoint directory")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, SynthesisError, InvalidPlaneError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, PlaneEstimationError, RenderError,
            MirrorSplatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())

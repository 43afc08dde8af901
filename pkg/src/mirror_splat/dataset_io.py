"""Disk formats: dataset directories (PNG + PFM + JSON manifest) and
checkpoints (JSON header + packed float32 records).

All in-memory images are linear; sRGB encoding happens only at the PNG
boundary. PFM depth is little-endian float32 with bottom-up rows.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CheckpointError, DatasetError
from .geometry import CameraModel, PlaneParam, PoseTransform, plane_from_json, plane_to_json
from .scene import GaussianScene, MirrorDataset, ViewRecord

DATASET_VERSION = 1
CHECKPOINT_VERSION = 1


def srgb_encode(linear: np.ndarray) -> np.ndarray:
    l = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return np.where(l <= 0.0031308, 12.92 * l, 1.055 * np.power(l, 1.0 / 2.4) - 0.055)


def srgb_decode(encoded: np.ndarray) -> np.ndarray:
    s = np.clip(np.asarray(encoded, dtype=np.float64), 0.0, 1.0)
    return np.where(s <= 0.04045, s / 12.92, np.power((s + 0.055) / 1.055, 2.4))


def image_to_uint8(linear: np.ndarray) -> np.ndarray:
    """Linear [0,1] floats -> 8-bit sRGB bytes (the PNG export path)."""
    return np.round(srgb_encode(linear) * 255.0).astype(np.uint8)


def uint8_to_image(data: np.ndarray) -> np.ndarray:
    return srgb_decode(data.astype(np.float64) / 255.0)


def quantize_image(linear: np.ndarray) -> np.ndarray:
    """Round-trip through the 8-bit sRGB export; what a saved PNG holds."""
    return uint8_to_image(image_to_uint8(linear))


def write_png(path: Path, data: np.ndarray):
    Image.fromarray(data).save(path, format="PNG")


def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im)


def write_pfm(path: Path, data: np.ndarray):
    """Grayscale PFM, scale header -1.0 (little-endian), rows bottom-up."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("PFM writer expects a 2-D array")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{arr.shape[1]} {arr.shape[0]}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"Pf":
            raise DatasetError(f"{path}: expected grayscale PFM magic 'Pf', got {magic!r}")
        dims = f.readline().split()
        if len(dims) != 2:
            raise DatasetError(f"{path}: malformed PFM dimension line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        if scale >= 0:
            raise DatasetError(f"{path}: big-endian PFM not supported (scale {scale})")
        payload = f.read(w * h * 4)
    if len(payload) != w * h * 4:
        raise DatasetError(f"{path}: truncated PFM payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w)
    return np.ascontiguousarray(arr[::-1]).astype(np.float64)


def _camera_to_json(cam: CameraModel) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height, "znear": cam.znear}


def _camera_from_json(d: dict) -> CameraModel:
    return CameraModel(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                       width=d["width"], height=d["height"], znear=d["znear"])


def _dump_json(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_dataset(dataset: MirrorDataset, path) -> None:
    """Write the dataset directory layout; images pass through 8-bit sRGB."""
    root = Path(path)
    for sub in ("images", "masks", "depth"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    views = []
    for split, records in (("train", dataset.train_views), ("test", dataset.test_views)):
        for i, view in enumerate(records):
            name = view.name or f"{split}_{i:03d}"
            entry = {
                "name": name,
                "split": split,
                "camera": _camera_to_json(view.camera),
                "pose": [[float(x) for x in row] for row in view.pose.matrix],
                "image": f"images/{name}.png",
                "mask": f"masks/{name}.png",
            }
            write_png(root / entry["image"], image_to_uint8(view.image))
            write_png(root / entry["mask"], np.round(np.clip(view.mirror_mask, 0, 1) * 255).astype(np.uint8))
            if view.depth is not None:
                entry["depth"] = f"depth/{name}.pfm"
                write_pfm(root / entry["depth"], view.depth)
            views.append(entry)

    _dump_json({"version": DATASET_VERSION, "views": views}, root / "manifest.json")
    if dataset.gt_plane is not None:
        _dump_json(plane_to_json(dataset.gt_plane), root / "gt_plane.json")


def load_dataset(path) -> MirrorDataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{manifest_path}: invalid JSON ({e})") from e
    version = manifest.get("version")
    if version != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {version!r} (expected {DATASET_VERSION})")

    splits: dict[str, list[ViewRecord]] = {"train": [], "test": []}
    for entry in manifest.get("views", []):
        name = entry.get("name", "<unnamed>")
        try:
            camera = _camera_from_json(entry["camera"])
            pose = PoseTransform(np.array(entry["pose"], dtype=np.float64))
        except (KeyError, ValueError) as e:
            raise DatasetError(f"view {name}: bad camera/pose ({e})") from e

        image_path = root / entry.get("image", "")
        if not image_path.is_file():
            raise DatasetError(f"view {name}: missing image file {entry.get('image')}")
        image_raw = read_png(image_path)
        if image_raw.ndim != 3 or image_raw.shape[2] != 3:
            raise DatasetError(f"view {name}: image is not RGB")
        image = uint8_to_image(image_raw)

        mask_path = root / entry.get("mask", "")
        if not mask_path.is_file():
            raise DatasetError(f"view {name}: missing mask file {entry.get('mask')}")
        mask_raw = read_png(mask_path)
        if mask_raw.ndim != 2:
            raise DatasetError(f"view {name}: mask is not single-channel")
        mask = mask_raw.astype(np.float64) / 255.0

        depth = None
        if "depth" in entry:
            depth_path = root / entry["depth"]
            if not depth_path.is_file():
                raise DatasetError(f"view {name}: missing depth file {entry['depth']}")
            depth = read_pfm(depth_path)

        try:
            record = ViewRecord(camera=camera, pose=pose, image=image,
                                mirror_mask=mask, depth=depth, name=name)
        except ValueError as e:
            raise DatasetError(f"view {name}: {e}") from e
        split = entry.get("split", "train")
        if split not in splits:
            raise DatasetError(f"view {name}: unknown split {split!r}")
        splits[split].append(record)

    gt_plane = None
    plane_path = root / "gt_plane.json"
    if plane_path.is_file():
        gt_plane = plane_from_json(json.loads(plane_path.read_text()))

    try:
        return MirrorDataset(train_views=splits["train"], test_views=splits["test"], gt_plane=gt_plane)
    except ValueError as e:
        raise DatasetError(str(e)) from e


def _record_width(sh_degree: int) -> int:
    return 12 + 3 * (sh_degree + 1) ** 2


def save_checkpoint(scene: GaussianScene, plane: PlaneParam | None, path,
                    mirror_estimate: dict | None = None) -> None:
    """Checkpoint directory: checkpoint.json + primitives.bin.

    Records are little-endian float32 in field order: position(3),
    rotation(4), log_scale(3), opacity_logit(1), sh_coeffs(3K), mirror_logit(1).
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    n = len(scene)
    k = (scene.sh_degree + 1) ** 2
    rec = np.empty((n, _record_width(scene.sh_degree)), dtype="<f4")
    rec[:, 0:3] = scene.positions
    rec[:, 3:7] = scene.rotations
    rec[:, 7:10] = scene.log_scales
    rec[:, 10] = scene.opacity_logits
    rec[:, 11:11 + 3 * k] = scene.sh_coeffs.reshape(n, 3 * k)
    rec[:, 11 + 3 * k] = scene.mirror_logits
    (root / "primitives.bin").write_bytes(rec.tobytes())

    header = {
        "version": CHECKPOINT_VERSION,
        "sh_degree": scene.sh_degree,
        "count": n,
        "plane": plane_to_json(plane) if plane is not None else None,
    }
    if mirror_estimate is not None:
        header["mirror_estimate"] = mirror_estimate
    _dump_json(header, root / "checkpoint.json")


def load_checkpoint(path) -> tuple[GaussianScene, PlaneParam | None, dict | None]:
    root = Path(path)
    header_path = root / "checkpoint.json"
    if not header_path.is_file():
        raise CheckpointError(f"no checkpoint.json under {root}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{header_path}: invalid JSON ({e})") from e
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")

    sh_degree = int(header["sh_degree"])
    n = int(header["count"])
    width = _record_width(sh_degree)
    payload = (root / "primitives.bin").read_bytes() if (root / "primitives.bin").is_file() else None
    if payload is None:
        raise CheckpointError(f"no primitives.bin under {root}")
    if len(payload) != n * width * 4:
        raise CheckpointError(
            f"primitives.bin holds {len(payload)} bytes, expected {n * width * 4} "
            f"({n} records of {width} float32)")
    rec = np.frombuffer(payload, dtype="<f4").reshape(n, width)

    k = (sh_degree + 1) ** 2
    scene = GaussianScene(
        rec[:, 0:3].copy(), rec[:, 3:7].copy(), rec[:, 7:10].copy(),
        rec[:, 10].copy(), rec[:, 11:11 + 3 * k].reshape(n, k, 3).copy(),
        rec[:, 11 + 3 * k].copy(), sh_degree,
    )
    plane = plane_from_json(header["plane"]) if header.get("plane") else None
    return scene, plane, header.get("mirror_estimate")

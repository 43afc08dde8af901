"""Adam over named parameter groups, plus adaptive density control.

The optimizer state lives in float64 regardless of parameter dtype; the
update is computed in float64 and cast back, so float32 scenes step
deterministically. Density control rebuilds the scene arrays and reports
the row mapping so optimizer state can follow.
"""
from __future__ import annotations

import numpy as np

from .scene import GaussianScene, quat_to_rotmat, sigmoid

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


class AdamOptimizer:
    """Adam with per-group learning rates and a skip-on-non-finite guard."""

    def __init__(self, lrs: dict[str, float]):
        self.lrs = dict(lrs)
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        self.skipped = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr_scale: dict[str, float] | None = None) -> bool:
        """One Adam step, updating `params` in place.

        Skips the whole step (and counts it) if any gradient is non-finite,
        so a single bad view cannot corrupt the moment estimates. Returns
        whether the step was applied.
        """
        for name in params:
            if name not in self.lrs:
                raise KeyError(f"no learning rate configured for group '{name}'")
            if not np.all(np.isfinite(grads[name])):
                self.skipped += 1
                return False
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1 ** self.t
        bc2 = 1.0 - ADAM_BETA2 ** self.t
        scale = lr_scale or {}
        for name, p in params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if name not in self.m:
                self.m[name] = np.zeros(p.shape, dtype=np.float64)
                self.v[name] = np.zeros(p.shape, dtype=np.float64)
            m = self.m[name]
            v = self.v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            lr = self.lrs[name] * scale.get(name, 1.0)
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
            p[...] = (p.astype(np.float64) - update).astype(p.dtype)
        return True

    def remap(self, keep_idx: np.ndarray, n_new: int,
              per_gaussian: tuple[str, ...] = GaussianScene.FIELDS) -> None:
        """Follow a densify/prune rebuild: select surviving rows, zero-init
        state for appended Gaussians. Non-per-Gaussian groups are untouched."""
        for name in per_gaussian:
            if name not in self.m:
                continue
            old_m, old_v = self.m[name], self.v[name]
            tail = (old_m.shape[1:] if old_m.ndim > 1 else ())
            self.m[name] = np.concatenate(
                [old_m[keep_idx], np.zeros((n_new, *tail), dtype=np.float64)])
            self.v[name] = np.concatenate(
                [old_v[keep_idx], np.zeros((n_new, *tail), dtype=np.float64)])


def position_lr_scale(step: int, total_steps: int, final_scale: float) -> float:
    """Exponential decay multiplier: 1.0 at step 0, final_scale at the end."""
    if total_steps <= 1:
        return 1.0
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return float(final_scale ** frac)


def densify_and_prune(scene: GaussianScene, grad_stats: np.ndarray,
                      rng: np.random.Generator, grad_threshold: float,
                      size_rel: float = 0.01, split_factor: float = 1.6,
                      prune_opacity: float = 0.005, max_gaussians: int = 100000
                      ) -> tuple[GaussianScene, np.ndarray, int]:
    """Prune transparent Gaussians, clone/split high-gradient ones.

    grad_stats: per-Gaussian mean positional gradient norm since the last
    call. Small high-gradient Gaussians (max scale below size_rel times the
    scene extent) are cloned in place; large ones are replaced by two
    samples drawn from their own footprint with scales divided by
    split_factor. The result never exceeds max_gaussians; when the budget
    binds, candidates with the largest gradients win. Returns
    (new_scene, survivor indices into the old scene, number of appended rows).
    """
    n = len(scene)
    if n == 0:
        return scene, np.arange(0), 0
    stats = np.asarray(grad_stats, dtype=np.float64).reshape(n)
    alpha = sigmoid(scene.opacity_logits.astype(np.float64))
    keep = alpha >= prune_opacity
    keep_idx = np.flatnonzero(keep)

    positions = scene.positions
    extent = float(np.linalg.norm(positions.max(axis=0) - positions.min(axis=0)))
    size_threshold = size_rel * extent
    max_scale = np.exp(scene.log_scales.astype(np.float64)).max(axis=1)

    hot = keep & (stats > grad_threshold)
    clone_idx = np.flatnonzero(hot & (max_scale <= size_threshold))
    split_idx = np.flatnonzero(hot & (max_scale > size_threshold))

    # Budget: splits add one net row each (parent removed, two children),
    # clones add one. Rank all candidates by gradient, largest first.
    n_survive = int(keep_idx.size)
    budget = max(0, max_gaussians - n_survive)
    cand = np.concatenate([clone_idx, split_idx])
    if cand.size > budget:
        order = np.argsort(-stats[cand], kind="stable")
        chosen = np.sort(cand[order[:budget]])
        clone_idx = np.intersect1d(clone_idx, chosen)
        split_idx = np.intersect1d(split_idx, chosen)

    parts = {f: [getattr(scene, f)[keep_idx]] for f in GaussianScene.FIELDS}
    # Splits replace their parent: drop parents from the survivor block.
    if split_idx.size:
        drop = np.isin(keep_idx, split_idx)
        for f in GaussianScene.FIELDS:
            parts[f][0] = parts[f][0][~drop]
        keep_idx = keep_idx[~drop]
        n_survive = int(keep_idx.size)

    n_new = 0
    if clone_idx.size:
        for f in GaussianScene.FIELDS:
            parts[f].append(getattr(scene, f)[clone_idx])
        n_new += int(clone_idx.size)
    if split_idx.size:
        rot = quat_to_rotmat(scene.rotations[split_idx].astype(np.float64))
        s = np.exp(scene.log_scales[split_idx].astype(np.float64))
        for _ in range(2):
            eps = rng.standard_normal((split_idx.size, 3))
            offsets = np.einsum("nij,nj->ni", rot, eps * s)
            for f in GaussianScene.FIELDS:
                block = getattr(scene, f)[split_idx].copy()
                if f == "positions":
                    block = (block.astype(np.float64) + offsets).astype(scene.dtype)
                elif f == "log_scales":
                    block = (block.astype(np.float64) - np.log(split_factor)).astype(scene.dtype)
                parts[f].append(block)
        n_new += 2 * int(split_idx.size)

    arrays = {f: np.concatenate(parts[f], axis=0) for f in GaussianScene.FIELDS}
    new_scene = GaussianScene(sh_degree=scene.sh_degree, **arrays)
    return new_scene, keep_idx, n_new

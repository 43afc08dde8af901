"""Numba kernels for tile-based splatting.

Per-pair Gaussian math (exponent, sigma, transmittance) always runs in
float64 so the early-termination decision is identical across precision
builds; only the image accumulators take the output dtype. Tiles own
disjoint pixels and disjoint pair slots, so the prange loops are race-free
and bitwise deterministic for a fixed tile grid.
"""
from __future__ import annotations

import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

import numba
import numpy as np
from numba import njit, prange

TILE = 16
T_CUTOFF = 1e-4
SIGMA_MAX = 0.999
DEPTH_EPS = 1e-6


def configure_threads():
    """Honor MIRROR_SPLAT_THREADS as a cap on numba's tile parallelism."""
    cap = os.environ.get("MIRROR_SPLAT_THREADS")
    if not cap:
        return
    try:
        n = int(cap)
    except ValueError:
        return
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


configure_threads()


@njit(cache=True)
def expand_tile_pairs(order, tx0, tx1, ty0, ty1, ntx):
    """Emit (tile_id, gaussian) pairs in globally sorted order.

    `order` is the depth-sorted index list; tile ranges are per original
    index. A stable sort by tile_id afterwards keeps depth order per tile.
    """
    n = order.shape[0]
    total = 0
    for i in range(n):
        g = order[i]
        total += (tx1[g] - tx0[g] + 1) * (ty1[g] - ty0[g] + 1)
    pair_tile = np.empty(total, np.int64)
    pair_gauss = np.empty(total, np.int64)
    k = 0
    for i in range(n):
        g = order[i]
        for ty in range(ty0[g], ty1[g] + 1):
            base = ty * ntx
            for tx in range(tx0[g], tx1[g] + 1):
                pair_tile[k] = base + tx
                pair_gauss[k] = g
                k += 1
    return pair_tile, pair_gauss


@njit(cache=True, parallel=True)
def forward_kernel(pair_data, offsets, ntx, nty, width, height,
                   out_color, out_mask, out_dsum, out_alpha, out_count):
    """Blend pre-gathered pair rows front to back per pixel.

    pair_data columns: mean_x, mean_y, conic_a, conic_b, conic_c, alpha_eff,
    color_r, color_g, color_b, mirror, zdepth. Rows are grouped by tile in
    depth order, so the hot loop walks contiguous memory.
    """
    for tile in prange(ntx * nty):
        ty = tile // ntx
        tx = tile - ty * ntx
        y0 = ty * TILE
        x0 = tx * TILE
        y1 = min(y0 + TILE, height)
        x1 = min(x0 + TILE, width)
        s = offsets[tile]
        e = offsets[tile + 1]
        for py in range(y0, y1):
            fy = np.float64(py)
            for px in range(x0, x1):
                fx = np.float64(px)
                t = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                msk = 0.0
                dsum = 0.0
                last = e
                for k in range(s, e):
                    dx = fx - pair_data[k, 0]
                    dy = fy - pair_data[k, 1]
                    power = (-0.5 * (pair_data[k, 2] * dx * dx + pair_data[k, 4] * dy * dy)
                             - pair_data[k, 3] * dx * dy)
                    if power > 0.0:
                        continue
                    sigma = pair_data[k, 5] * np.exp(power)
                    if sigma > SIGMA_MAX:
                        sigma = SIGMA_MAX
                    tnext = t * (1.0 - sigma)
                    if tnext < T_CUTOFF:
                        last = k
                        break
                    w = sigma * t
                    c0 += w * pair_data[k, 6]
                    c1 += w * pair_data[k, 7]
                    c2 += w * pair_data[k, 8]
                    msk += w * pair_data[k, 9]
                    dsum += w * pair_data[k, 10]
                    t = tnext
                out_color[py, px, 0] = c0
                out_color[py, px, 1] = c1
                out_color[py, px, 2] = c2
                out_mask[py, px] = msk
                out_dsum[py, px] = dsum
                # 1 - t in float64 before the cast: keeps small coverages
                # meaningful instead of cancelling against 1.
                out_alpha[py, px] = 1.0 - t
                out_count[py, px] = last - s


@njit(cache=True, parallel=True)
def backward_kernel(pair_data, offsets, ntx, nty, width, height,
                    grad_color, grad_mask, grad_depth, pair_grads):
    """Recompute the forward blend per pixel, then push gradients per pair.

    pair_data columns are as in forward_kernel. pair_grads columns:
    dmean_x, dmean_y, dconic_a, dconic_b, dconic_c, dalpha_eff, dcolor_r,
    dcolor_g, dcolor_b, dmirror, dzdepth.
    Depth normalization D = Dsum / max(1 - T_final, eps) is differentiated
    here, so grad_depth is the gradient w.r.t. the normalized depth map.
    """
    for tile in prange(ntx * nty):
        ty = tile // ntx
        tx = tile - ty * ntx
        y0 = ty * TILE
        x0 = tx * TILE
        y1 = min(y0 + TILE, height)
        x1 = min(x0 + TILE, width)
        s = offsets[tile]
        e = offsets[tile + 1]
        for py in range(y0, y1):
            fy = np.float64(py)
            for px in range(x0, x1):
                fx = np.float64(px)
                gc0 = grad_color[py, px, 0]
                gc1 = grad_color[py, px, 1]
                gc2 = grad_color[py, px, 2]
                gm = grad_mask[py, px]
                gd = grad_depth[py, px]
                if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and gm == 0.0 and gd == 0.0:
                    continue

                # Pass 1: recompute finals for the suffix-sum trick.
                t = 1.0
                fc0 = 0.0
                fc1 = 0.0
                fc2 = 0.0
                fm = 0.0
                fd = 0.0
                last = e
                for k in range(s, e):
                    dx = fx - pair_data[k, 0]
                    dy = fy - pair_data[k, 1]
                    power = (-0.5 * (pair_data[k, 2] * dx * dx + pair_data[k, 4] * dy * dy)
                             - pair_data[k, 3] * dx * dy)
                    if power > 0.0:
                        continue
                    sigma = pair_data[k, 5] * np.exp(power)
                    if sigma > SIGMA_MAX:
                        sigma = SIGMA_MAX
                    tnext = t * (1.0 - sigma)
                    if tnext < T_CUTOFF:
                        last = k
                        break
                    w = sigma * t
                    fc0 += w * pair_data[k, 6]
                    fc1 += w * pair_data[k, 7]
                    fc2 += w * pair_data[k, 8]
                    fm += w * pair_data[k, 9]
                    fd += w * pair_data[k, 10]
                    t = tnext
                t_final = t

                alpha = 1.0 - t_final
                denom = alpha if alpha > DEPTH_EPS else DEPTH_EPS
                gdsum = gd / denom
                # dL/dT_final through D = Dsum / max(1-T, eps).
                gt_final = gd * fd / (denom * denom) if alpha > DEPTH_EPS else 0.0

                # Pass 2: identical traversal, emitting per-pair gradients.
                t = 1.0
                pc0 = 0.0
                pc1 = 0.0
                pc2 = 0.0
                pm = 0.0
                pd = 0.0
                for k in range(s, last):
                    dx = fx - pair_data[k, 0]
                    dy = fy - pair_data[k, 1]
                    power = (-0.5 * (pair_data[k, 2] * dx * dx + pair_data[k, 4] * dy * dy)
                             - pair_data[k, 3] * dx * dy)
                    if power > 0.0:
                        continue
                    gexp = np.exp(power)
                    sigma_raw = pair_data[k, 5] * gexp
                    clipped = sigma_raw > SIGMA_MAX
                    sigma = SIGMA_MAX if clipped else sigma_raw
                    w = sigma * t
                    pair_grads[k, 6] += gc0 * w
                    pair_grads[k, 7] += gc1 * w
                    pair_grads[k, 8] += gc2 * w
                    pair_grads[k, 9] += gm * w
                    pair_grads[k, 10] += gdsum * w
                    pc0 += w * pair_data[k, 6]
                    pc1 += w * pair_data[k, 7]
                    pc2 += w * pair_data[k, 8]
                    pm += w * pair_data[k, 9]
                    pd += w * pair_data[k, 10]
                    one_minus = 1.0 - sigma
                    dsigma = ((gc0 * pair_data[k, 6] + gc1 * pair_data[k, 7]
                               + gc2 * pair_data[k, 8]
                               + gm * pair_data[k, 9] + gdsum * pair_data[k, 10]) * t
                              - (gc0 * (fc0 - pc0) + gc1 * (fc1 - pc1) + gc2 * (fc2 - pc2)
                                 + gm * (fm - pm) + gdsum * (fd - pd)) / one_minus
                              - gt_final * t_final / one_minus)
                    if not clipped:
                        dpower = dsigma * sigma
                        pair_grads[k, 5] += dsigma * gexp
                        pair_grads[k, 0] += dpower * (pair_data[k, 2] * dx + pair_data[k, 3] * dy)
                        pair_grads[k, 1] += dpower * (pair_data[k, 3] * dx + pair_data[k, 4] * dy)
                        pair_grads[k, 2] += dpower * (-0.5 * dx * dx)
                        pair_grads[k, 3] += dpower * (-dx * dy)
                        pair_grads[k, 4] += dpower * (-0.5 * dy * dy)
                    t *= one_minus

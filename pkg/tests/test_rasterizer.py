"""Tile rasterizer: blending semantics, oracle equivalence, ordering,
improper poses, and the analytic backward pass."""
import numpy as np
import pytest

from mirror_splat.errors import RenderError
from mirror_splat.geometry import PoseTransform, mirror_camera
from mirror_splat.rasterizer import (
    oracle_render,
    render,
    render_backward,
    sort_and_bin,
)
from mirror_splat.scene import GaussianScene, evaluate_sh, logit

from helpers import (
    default_camera,
    dense_reference_render,
    identity_pose,
    mirrored_scene,
    random_plane,
    random_pose,
    random_scene,
)


def _point_scene(entries, sh_degree=0):
    """Scene from (position, opacity, color, mirror) tuples; colors are DC
    coefficients chosen so evaluate_sh returns exactly `color`."""
    y00 = 0.28209479177387814
    n = len(entries)
    k = (sh_degree + 1) ** 2
    sh = np.zeros((n, k, 3))
    for i, (_, _, color, _) in enumerate(entries):
        sh[i, 0] = (np.asarray(color, dtype=np.float64) - 0.5) / y00
    return GaussianScene(
        positions=np.array([e[0] for e in entries], dtype=np.float64),
        rotations=np.tile([1.0, 0, 0, 0], (n, 1)),
        log_scales=np.full((n, 3), -2.0),
        opacity_logits=np.array([logit(e[1]) if 0 < e[1] < 1 else
                                 (500.0 if e[1] >= 1 else -500.0)
                                 for e in entries]),
        sh_coeffs=sh,
        mirror_logits=np.array([logit(e[3]) if 0 < e[3] < 1 else
                                (500.0 if e[3] >= 1 else -500.0)
                                for e in entries]),
        sh_degree=sh_degree,
    )


def _mean_for_pixel(camera, px, py, z):
    """World point (identity pose) that projects exactly onto pixel (px, py)."""
    return np.array([(px - camera.cx) * z / camera.fx,
                     (py - camera.cy) * z / camera.fy, z])


class TestBlendExamples:
    def test_single_gaussian_alpha_weighted_color(self):
        cam = default_camera()
        pos = _mean_for_pixel(cam, 20, 20, 2.0)
        color = np.array([0.9, 0.55, 0.3])
        scene = _point_scene([(pos, 0.8, color, 0.0)])
        out = render(scene, cam, identity_pose())
        np.testing.assert_allclose(out.color[20, 20], 0.8 * color, atol=1e-9)
        assert abs(out.alpha[20, 20] - 0.8) < 1e-9
        assert abs(out.depth[20, 20] - 2.0) < 1e-9
        assert out.mask[20, 20] < 1e-12

    def test_two_coincident_gaussians(self):
        cam = default_camera()
        pos = _mean_for_pixel(cam, 33, 29, 2.0)
        c1 = np.array([1.0, 0.2, 0.1])
        c2 = np.array([0.1, 0.3, 1.0])
        scene = _point_scene([(pos, 0.5, c1, 0.0), (pos, 0.5, c2, 0.0)])
        out = render(scene, cam, identity_pose())
        np.testing.assert_allclose(out.color[29, 33], 0.5 * c1 + 0.25 * c2,
                                   atol=1e-9)
        assert abs(out.alpha[29, 33] - 0.75) < 1e-9

    def test_opaque_mirror_gaussian_saturates_mask(self):
        # sigma is clipped at 0.999, so a fully opaque m=1 Gaussian reports
        # mask 0.999 at its center: the documented saturation limit.
        cam = default_camera()
        pos = _mean_for_pixel(cam, 16, 40, 1.5)
        scene = _point_scene([(pos, 1.0, (0.5, 0.5, 0.5), 1.0)])
        out = render(scene, cam, identity_pose())
        assert abs(out.mask[40, 16] - 0.999) < 1e-9
        assert abs(out.alpha[40, 16] - 0.999) < 1e-9

    def test_empty_scene_raises(self):
        cam = default_camera()
        empty = GaussianScene(np.zeros((0, 3)), np.zeros((0, 4)),
                              np.zeros((0, 3)), np.zeros(0),
                              np.zeros((0, 1, 3)), np.zeros(0), 0)
        with pytest.raises(RenderError):
            render(empty, cam, identity_pose())
        with pytest.raises(RenderError):
            oracle_render(empty, cam, identity_pose())

    def test_zero_quaternion_raises(self):
        cam = default_camera()
        scene = _point_scene([((0.0, 0.0, 2.0), 0.5, (0.5, 0.5, 0.5), 0.0)])
        scene.rotations[0] = 0.0
        with pytest.raises(RenderError):
            render(scene, cam, identity_pose())

    def test_all_culled_view_gives_background(self):
        cam = default_camera()
        scene = _point_scene([((0.0, 0.0, -3.0), 0.9, (1, 1, 1), 0.5)])
        out = render(scene, cam, identity_pose())
        assert not out.color.any() and not out.mask.any()
        assert not out.depth.any() and not out.alpha.any()


class TestOrdering:
    def test_depth_sort_example(self):
        cam = default_camera()
        entries = [(_mean_for_pixel(cam, 32, 32, z), 0.5, (0.5, 0.5, 0.5), 0.0)
                   for z in (3.0, 1.0, 2.0)]
        # Spread x slightly so the three Gaussians are distinct points.
        scene = _point_scene(entries)
        bins = sort_and_bin(scene, cam, identity_pose())
        np.testing.assert_array_equal(bins.order, [1, 2, 0])

    def test_equal_depth_keeps_storage_order(self):
        cam = default_camera()
        pos = _mean_for_pixel(cam, 32, 32, 2.0)
        scene = _point_scene([(pos, 0.5, (1, 0, 0), 0.0),
                              (pos, 0.5, (0, 1, 0), 0.0)])
        bins = sort_and_bin(scene, cam, identity_pose())
        np.testing.assert_array_equal(bins.order, [0, 1])

    def test_culled_primitive_absent(self):
        cam = default_camera()
        scene = _point_scene([(_mean_for_pixel(cam, 10, 10, 2.0), 0.5, (1, 1, 1), 0.0),
                              ((0.0, 0.0, -1.0), 0.5, (1, 1, 1), 0.0)])
        bins = sort_and_bin(scene, cam, identity_pose())
        assert 1 not in bins.order
        assert 1 not in bins.pair_gauss

    def test_storage_order_invariance(self):
        rng = np.random.default_rng(21)
        scene = random_scene(rng, 120, sh_degree=2)
        cam = default_camera()
        pose = random_pose(rng)
        base = render(scene, cam, pose)
        perm = rng.permutation(120)
        shuffled = scene.select(perm)
        out = render(shuffled, cam, pose)
        np.testing.assert_array_equal(out.color, base.color)
        np.testing.assert_array_equal(out.mask, base.mask)
        np.testing.assert_array_equal(out.depth, base.depth)
        np.testing.assert_array_equal(out.alpha, base.alpha)


class TestOracleEquivalence:
    @pytest.mark.parametrize("n,seed", [(1, 0), (7, 1), (60, 2), (240, 3)])
    def test_tile_matches_oracle_f32(self, n, seed):
        rng = np.random.default_rng([22, seed])
        scene = random_scene(rng, n, sh_degree=min(seed, 2))
        cam = default_camera()
        pose = random_pose(rng)
        if seed % 2:
            pose = mirror_camera(random_plane(rng), pose)
        tile = render(scene, cam, pose)
        oracle = oracle_render(scene, cam, pose)
        for field in ("color", "mask", "depth", "alpha"):
            diff = np.abs(getattr(tile, field).astype(np.float64)
                          - getattr(oracle, field))
            assert diff.max() < 1e-5, f"{field} deviates by {diff.max():g}"

    def test_tile_matches_oracle_f64(self):
        rng = np.random.default_rng(23)
        scene = random_scene(rng, 150, sh_degree=2, dtype=np.float64)
        cam = default_camera()
        pose = random_pose(rng)
        tile = render(scene, cam, pose)
        oracle = oracle_render(scene, cam, pose)
        for field in ("color", "mask", "depth", "alpha"):
            diff = np.abs(getattr(tile, field) - getattr(oracle, field))
            assert diff.max() < 1e-10, f"{field} deviates by {diff.max():g}"

    def test_opacity_scale_paths_agree(self):
        rng = np.random.default_rng(24)
        scene = random_scene(rng, 80, dtype=np.float64)
        cam = default_camera()
        pose = random_pose(rng)
        scale = rng.uniform(0.0, 1.0, 80)
        tile = render(scene, cam, pose, opacity_scale=scale)
        oracle = oracle_render(scene, cam, pose, opacity_scale=scale)
        assert np.abs(tile.color - oracle.color).max() < 1e-10

    def test_deterministic_rerender(self):
        rng = np.random.default_rng(25)
        scene = random_scene(rng, 90, sh_degree=1)
        cam = default_camera()
        pose = random_pose(rng)
        a = render(scene, cam, pose)
        b = render(scene, cam, pose)
        np.testing.assert_array_equal(a.color, b.color)
        c = oracle_render(scene, cam, pose)
        d = oracle_render(scene, cam, pose)
        np.testing.assert_array_equal(c.color, d.color)


class TestDenseReference:
    """Independent per-pixel renderer written from scratch in the tests."""

    def test_tile_matches_dense_reference(self):
        rng = np.random.default_rng(26)
        cam = default_camera(width=32, height=24)
        scene = random_scene(rng, 25, sh_degree=2, dtype=np.float64)
        pose = random_pose(rng)
        color, mask, depth, alpha = dense_reference_render(scene, cam, pose)
        tile = render(scene, cam, pose)
        # The only modeled difference is radius-box truncation of far tails,
        # bounded by exp(-0.5 * 6.2^2) per weight.
        assert np.abs(tile.color - color).max() < 2e-6
        assert np.abs(tile.mask - mask).max() < 2e-6
        assert np.abs(tile.alpha - alpha).max() < 2e-6
        assert np.abs(tile.depth - depth).max() < 2e-5

    def test_oracle_matches_dense_reference_with_scale(self):
        rng = np.random.default_rng(27)
        cam = default_camera(width=24, height=24)
        scene = random_scene(rng, 18, sh_degree=0, dtype=np.float64)
        pose = random_pose(rng)
        scale = rng.uniform(0.0, 1.0, 18)
        color, mask, depth, alpha = dense_reference_render(
            scene, cam, pose, opacity_scale=scale)
        oracle = oracle_render(scene, cam, pose, opacity_scale=scale)
        assert np.abs(oracle.color - color).max() < 2e-6
        assert np.abs(oracle.alpha - alpha).max() < 2e-6


class TestImproperPose:
    def test_mirrored_scene_equals_mirrored_camera(self):
        rng = np.random.default_rng(28)
        cam = default_camera()
        for trial in range(3):
            scene = random_scene(rng, 40, sh_degree=0, dtype=np.float64)
            plane = random_plane(rng)
            pose = random_pose(rng)
            via_scene = render(mirrored_scene(scene, plane), cam, pose)
            via_camera = render(scene, cam, mirror_camera(plane, pose))
            assert np.abs(via_scene.color - via_camera.color).max() < 1e-4
            assert np.abs(via_scene.mask - via_camera.mask).max() < 1e-4
            assert np.abs(via_scene.depth - via_camera.depth).max() < 1e-3
            assert np.abs(via_scene.alpha - via_camera.alpha).max() < 1e-4


class TestConservation:
    def test_output_ranges(self):
        rng = np.random.default_rng(29)
        for _ in range(5):
            scene = random_scene(rng, 120, sh_degree=2)
            cam = default_camera()
            out = render(scene, cam, random_pose(rng))
            assert out.alpha.min() >= 0.0 and out.alpha.max() <= 1.0
            assert out.mask.min() >= 0.0 and out.mask.max() <= 1.0
            assert out.color.min() >= 0.0
            covered = out.alpha > 0
            assert np.all(out.depth[covered] >= 0.0)
            assert np.all(out.depth[~covered] == 0.0)


def _loss_and_grads(scene64, cam, pose, weights, opacity_scale=None):
    out = render(scene64, cam, pose, opacity_scale=opacity_scale)
    wc, wm, wd = weights
    loss = float(np.sum(out.color * wc) + np.sum(out.mask * wm)
                 + np.sum(out.depth * wd))
    grads = render_backward(scene64, cam, pose, wc, wm, wd,
                            opacity_scale=opacity_scale)
    return loss, grads


def _fd_param(scene64, cam, pose, weights, field, index, step,
              opacity_scale=None):
    wc, wm, wd = weights

    def value(delta):
        probe = scene64.copy()
        arr = getattr(probe, field)
        arr[index] = arr[index] + delta
        out = render(probe, cam, pose, opacity_scale=opacity_scale)
        return float(np.sum(out.color * wc) + np.sum(out.mask * wm)
                     + np.sum(out.depth * wd))

    return (value(step) - value(-step)) / (2.0 * step)


@pytest.fixture(scope="module")
def gradcheck_setup():
    rng = np.random.default_rng(30)
    # Opacities capped near 0.3 keep every pixel's transmittance above the
    # 1e-4 termination cutoff (0.7^20 ~ 8e-4), so no parameter sits on a
    # clip boundary.
    scene = random_scene(rng, 20, sh_degree=2, dtype=np.float64,
                         opacity_range=(-3.0, logit(0.3)))
    cam = default_camera(width=32, height=32)
    pose = random_pose(rng)
    weights = (rng.uniform(-1, 1, (32, 32, 3)), rng.uniform(-1, 1, (32, 32)),
               rng.uniform(-0.2, 0.2, (32, 32)))
    return scene, cam, pose, weights


class TestBackward:
    def test_zero_gradients_in_zero_gradients_out(self, gradcheck_setup):
        scene, cam, pose, _ = gradcheck_setup
        z3 = np.zeros((32, 32, 3))
        z1 = np.zeros((32, 32))
        grads = render_backward(scene, cam, pose, z3, z1, z1)
        for name, arr in grads.as_dict().items():
            assert not arr.any(), name

    def test_shape_mismatch_raises(self, gradcheck_setup):
        scene, cam, pose, _ = gradcheck_setup
        with pytest.raises(RenderError):
            render_backward(scene, cam, pose, np.zeros((8, 8, 3)),
                            np.zeros((32, 32)), np.zeros((32, 32)))

    def test_nonfinite_gradients_raise(self, gradcheck_setup):
        scene, cam, pose, _ = gradcheck_setup
        gc = np.zeros((32, 32, 3))
        gc[0, 0, 0] = np.nan
        with pytest.raises(RenderError):
            render_backward(scene, cam, pose, gc, np.zeros((32, 32)),
                            np.zeros((32, 32)))

    def test_single_gaussian_opacity_gradient(self):
        cam = default_camera()
        pos = _mean_for_pixel(cam, 20, 20, 2.0)
        scene = _point_scene([(pos, 0.6, (0.8, 0.4, 0.2), 0.3)])
        wc = np.zeros((64, 64, 3))
        wc[20, 20] = (1.0, 1.0, 1.0)
        zeros = np.zeros((64, 64))
        weights = (wc, zeros, zeros)
        _, grads = _loss_and_grads(scene, cam, identity_pose(), weights)
        fd = _fd_param(scene, cam, identity_pose(), weights,
                       "opacity_logits", 0, 1e-5)
        analytic = float(grads.opacity_logits[0])
        assert abs(analytic - fd) / max(abs(fd), 1e-8) < 1e-3

    def test_mirror_gradient_flows_only_through_mask(self, gradcheck_setup):
        scene, cam, pose, weights = gradcheck_setup
        wc, wm, wd = weights
        zeros = np.zeros((32, 32))
        no_mask = render_backward(scene, cam, pose, wc, zeros, wd)
        assert not no_mask.mirror_logits.any()
        with_mask = render_backward(scene, cam, pose, np.zeros((32, 32, 3)),
                                    wm, zeros)
        assert with_mask.mirror_logits.any()

    @pytest.mark.parametrize("field,indices,step", [
        ("positions", [(0, 0), (3, 1), (7, 2), (12, 0), (19, 2)], 1e-6),
        ("rotations", [(1, 0), (4, 2), (9, 3), (15, 1)], 1e-6),
        ("log_scales", [(2, 0), (5, 1), (11, 2), (18, 0)], 1e-6),
        ("opacity_logits", [(0,), (6,), (13,), (19,)], 1e-5),
        ("sh_coeffs", [(0, 0, 0), (3, 0, 1), (8, 2, 2), (14, 5, 0)], 1e-5),
        ("mirror_logits", [(1,), (7,), (16,)], 1e-5),
    ])
    def test_gradcheck_parameter_classes(self, gradcheck_setup, field,
                                         indices, step):
        scene, cam, pose, weights = gradcheck_setup
        _, grads = _loss_and_grads(scene, cam, pose, weights)
        analytic_all = grads.as_dict()[field]
        for index in indices:
            fd = _fd_param(scene, cam, pose, weights, field, index, step)
            analytic = float(analytic_all[index])
            assert abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6) < 1e-3, (
                f"{field}{index}: analytic {analytic:g} vs fd {fd:g}")

    def test_opacity_scale_gradient(self, gradcheck_setup):
        scene, cam, pose, weights = gradcheck_setup
        rng = np.random.default_rng(31)
        scale = rng.uniform(0.2, 0.9, len(scene))
        _, grads = _loss_and_grads(scene, cam, pose, weights,
                                   opacity_scale=scale)
        assert grads.opacity_scales is not None
        wc, wm, wd = weights
        for i in (0, 5, 11):
            step = 1e-6

            def value(delta, i=i):
                s2 = scale.copy()
                s2[i] += delta
                out = render(scene, cam, pose, opacity_scale=s2)
                return float(np.sum(out.color * wc) + np.sum(out.mask * wm)
                             + np.sum(out.depth * wd))

            fd = (value(step) - value(-step)) / (2 * step)
            analytic = float(grads.opacity_scales[i])
            assert abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6) < 1e-3

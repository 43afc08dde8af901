"""Plane algebra, mirrored cameras, and Gaussian projection."""
import numpy as np
import pytest

from mirror_splat.errors import InvalidPlaneError
from mirror_splat.geometry import (
    CameraModel,
    PlaneParam,
    PoseTransform,
    look_at_pose,
    mirror_camera,
    mirror_transform,
    normalize_plane,
    perspective_jacobian,
    plane_from_json,
    plane_point_residual,
    plane_to_json,
    project_gaussian,
    project_gaussians,
    reflect_point,
)

from helpers import random_plane, random_pose


class TestNormalizePlane:
    def test_scales_normal_and_offset(self):
        out = normalize_plane(PlaneParam((0.0, 0.0, 2.0), -2.0))
        np.testing.assert_allclose(out.normal, [0.0, 0.0, 1.0])
        assert out.offset == -1.0

    def test_identity_on_unit_normal(self):
        out = normalize_plane(PlaneParam((0.0, 0.0, 1.0), -1.0))
        np.testing.assert_array_equal(out.normal, [0.0, 0.0, 1.0])
        assert out.offset == -1.0

    def test_degenerate_normal_raises(self):
        with pytest.raises(InvalidPlaneError):
            normalize_plane(PlaneParam((0.0, 0.0, 0.0), 1.0))

    def test_point_set_unchanged(self):
        rng = np.random.default_rng(3)
        raw = PlaneParam(rng.standard_normal(3) * 5.0, 1.7)
        unit = normalize_plane(raw)
        # A point on the raw plane is on the normalized plane.
        n = np.asarray(raw.normal)
        p = -raw.offset * n / (n @ n)
        assert abs(plane_point_residual(unit, p)) < 1e-12


class TestPlanePointResidual:
    def test_point_on_plane(self):
        assert plane_point_residual(PlaneParam((0, 0, 1), -1.0), (5, 3, 1)) == 0.0

    def test_axis_aligned_offset(self):
        assert plane_point_residual(PlaneParam((0, 0, 1), -1.0), (0, 0, 3)) == 2.0

    def test_signed_side(self):
        assert plane_point_residual(PlaneParam((1, 0, 0), 0.0), (-4, 9, 9)) == -4.0


class TestReflectPoint:
    def test_z_mirror(self):
        np.testing.assert_allclose(
            reflect_point(PlaneParam((0, 0, 1), 0.0), (1, 2, 3)), [1, 2, -3])

    def test_offset_plane(self):
        np.testing.assert_allclose(
            reflect_point(PlaneParam((0, 0, 1), -1.0), (0, 0, 0)), [0, 0, 2])

    def test_midpoint_on_plane_and_direction(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            plane = random_plane(rng)
            p = rng.uniform(-3, 3, 3)
            q = reflect_point(plane, p)
            mid = 0.5 * (p + q)
            assert abs(plane_point_residual(plane, mid)) < 1e-12
            d = q - p
            if np.linalg.norm(d) > 1e-9:
                assert abs(abs(d @ plane.normal) - np.linalg.norm(d)) < 1e-10

    def test_matches_matrix_path(self):
        rng = np.random.default_rng(12)
        worst = 0.0
        for _ in range(1000):
            plane = random_plane(rng)
            p = rng.uniform(-4, 4, 3)
            t = mirror_transform(plane)
            via_matrix = (t @ np.append(p, 1.0))[:3]
            worst = max(worst, float(np.max(np.abs(via_matrix - reflect_point(plane, p)))))
        assert worst < 1e-12


class TestMirrorTransform:
    def test_z_mirror_matrix(self):
        np.testing.assert_allclose(
            mirror_transform(PlaneParam((0, 0, 1), 0.0)), np.diag([1.0, 1.0, -1.0, 1.0]))

    def test_x_mirror_matrix(self):
        np.testing.assert_allclose(
            mirror_transform(PlaneParam((1, 0, 0), 0.0)), np.diag([-1.0, 1.0, 1.0, 1.0]))

    def test_offset_plane_moves_origin(self):
        t = mirror_transform(PlaneParam((0, 0, 1), -1.0))
        np.testing.assert_allclose(t @ [0, 0, 0, 1], [0, 0, 2, 1])

    def test_non_normalized_raises(self):
        with pytest.raises(InvalidPlaneError):
            mirror_transform(PlaneParam((0, 0, 2), -2.0))

    def test_algebraic_properties(self):
        rng = np.random.default_rng(13)
        for _ in range(200):
            plane = random_plane(rng)
            t = mirror_transform(plane)
            assert np.max(np.abs(t @ t - np.eye(4))) < 1e-12
            assert abs(np.linalg.det(t[:3, :3]) + 1.0) < 1e-12
            assert np.array_equal(t[3], [0.0, 0.0, 0.0, 1.0])
            # Fixed points: sample on the plane.
            u = rng.standard_normal(3)
            u -= (u @ plane.normal) * plane.normal
            p = -plane.offset * plane.normal + u
            assert np.linalg.norm((t @ np.append(p, 1.0))[:3] - p) < 1e-10
            # Isometry.
            a = rng.uniform(-3, 3, 3)
            b = rng.uniform(-3, 3, 3)
            ta = (t @ np.append(a, 1.0))[:3]
            tb = (t @ np.append(b, 1.0))[:3]
            assert abs(np.linalg.norm(ta - tb) - np.linalg.norm(a - b)) < 1e-10


class TestMirrorCamera:
    def test_center_reflects(self):
        pose = PoseTransform(np.eye(4))
        plane = PlaneParam((0, 0, 1), -1.0)
        virt = mirror_camera(plane, pose)
        np.testing.assert_allclose(virt.camera_center, [0, 0, 2], atol=1e-12)

    def test_involution(self):
        rng = np.random.default_rng(14)
        for _ in range(25):
            plane = random_plane(rng)
            pose = random_pose(rng)
            back = mirror_camera(plane, mirror_camera(plane, pose))
            assert np.max(np.abs(back.matrix - pose.matrix)) < 1e-10

    def test_handedness_flip(self):
        rng = np.random.default_rng(15)
        pose = random_pose(rng)
        assert abs(pose.det_rotation - 1.0) < 1e-9
        virt = mirror_camera(random_plane(rng), pose)
        assert abs(virt.det_rotation + 1.0) < 1e-9

    def test_center_matches_reflect_point(self):
        rng = np.random.default_rng(16)
        for _ in range(25):
            plane = random_plane(rng)
            pose = random_pose(rng)
            virt = mirror_camera(plane, pose)
            np.testing.assert_allclose(
                virt.camera_center, reflect_point(plane, pose.camera_center),
                atol=1e-10)


class TestPoseTransform:
    def test_camera_center_and_inverse(self):
        rng = np.random.default_rng(17)
        pose = random_pose(rng)
        c = pose.camera_center
        cam = pose.matrix @ np.append(c, 1.0)
        np.testing.assert_allclose(cam[:3], 0.0, atol=1e-12)
        np.testing.assert_allclose(pose.camera_to_world() @ pose.matrix,
                                   np.eye(4), atol=1e-12)

    def test_bad_bottom_row_rejected(self):
        m = np.eye(4)
        m[3, 0] = 0.5
        with pytest.raises(ValueError):
            PoseTransform(m)

    def test_non_orthogonal_rotation_rejected(self):
        m = np.eye(4)
        m[0, 0] = 2.0
        with pytest.raises(ValueError):
            PoseTransform(m)

    def test_look_at(self):
        eye = np.array([1.0, -2.0, 0.5])
        target = np.array([0.0, 0.0, 3.0])
        pose = look_at_pose(eye, target)
        np.testing.assert_allclose(pose.camera_center, eye, atol=1e-12)
        fwd = (target - eye) / np.linalg.norm(target - eye)
        np.testing.assert_allclose(pose.rotation @ fwd, [0, 0, 1], atol=1e-12)
        assert abs(pose.det_rotation - 1.0) < 1e-12


class TestProjection:
    def test_unit_example(self):
        cam = CameraModel(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=100, height=100)
        out = project_gaussian(cam, PoseTransform(np.eye(4)), (0, 0, 1),
                               1e-4 * np.eye(3))
        assert out is not None
        np.testing.assert_allclose(out.mean2d, [50.0, 50.0], atol=1e-12)
        np.testing.assert_allclose(out.cov2d, np.eye(2), atol=1e-12)
        assert out.view_depth == 1.0

    def test_behind_near_plane_culls(self):
        cam = CameraModel(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=100,
                          height=100, znear=0.01)
        assert project_gaussian(cam, PoseTransform(np.eye(4)), (0, 0, 0.001),
                                np.eye(3)) is None

    def test_batch_matches_single(self):
        rng = np.random.default_rng(18)
        cam = CameraModel(fx=80.0, fy=95.0, cx=31.0, cy=34.0, width=64, height=64)
        pose = random_pose(rng, target=(0, 0, 0), radius=3.0)
        means = rng.uniform(-1, 1, (20, 3))
        a = rng.standard_normal((20, 3, 3)) * 0.05
        covs = a @ a.transpose(0, 2, 1) + 1e-6 * np.eye(3)
        mean2d, cov2d, depth, valid = project_gaussians(cam, pose, means, covs)
        for i in range(20):
            single = project_gaussian(cam, pose, means[i], covs[i])
            if single is None:
                assert not valid[i]
                continue
            assert valid[i]
            np.testing.assert_allclose(mean2d[i], single.mean2d, atol=1e-12)
            np.testing.assert_allclose(cov2d[i], single.cov2d, atol=1e-12)
            assert abs(depth[i] - single.view_depth) < 1e-12

    def test_jacobian_matches_finite_difference(self):
        cam = CameraModel(fx=120.0, fy=85.0, cx=30.0, cy=40.0, width=64, height=64)
        rng = np.random.default_rng(19)

        def pinhole(p):
            return np.array([cam.fx * p[0] / p[2] + cam.cx,
                             cam.fy * p[1] / p[2] + cam.cy])

        step = 1e-6
        for _ in range(30):
            p = rng.uniform([-1, -1, 0.5], [1, 1, 4.0])
            j = perspective_jacobian(cam, p)
            for axis in range(3):
                e = np.zeros(3)
                e[axis] = step
                fd = (pinhole(p + e) - pinhole(p - e)) / (2 * step)
                denom = np.maximum(np.abs(fd), 1e-3)
                assert np.max(np.abs(j[:, axis] - fd) / denom) < 1e-6

    def test_improper_pose_projects_mirrored_scene(self):
        rng = np.random.default_rng(20)
        cam = CameraModel(fx=70.0, fy=70.0, cx=32.0, cy=32.0, width=64, height=64)
        plane = random_plane(rng)
        pose = random_pose(rng, target=(0, 0, 0), radius=3.0)
        house = np.eye(3) - 2.0 * np.outer(plane.normal, plane.normal)
        for _ in range(10):
            mean = rng.uniform(-1, 1, 3)
            a = rng.standard_normal((3, 3)) * 0.05
            cov = a @ a.T + 1e-6 * np.eye(3)
            mirrored_mean = reflect_point(plane, mean)
            mirrored_cov = house @ cov @ house.T
            via_scene = project_gaussian(cam, pose, mirrored_mean, mirrored_cov)
            via_camera = project_gaussian(cam, mirror_camera(plane, pose), mean, cov)
            if via_scene is None or via_camera is None:
                assert via_scene is None and via_camera is None
                continue
            np.testing.assert_allclose(via_scene.mean2d, via_camera.mean2d, atol=1e-9)
            np.testing.assert_allclose(via_scene.cov2d, via_camera.cov2d, atol=1e-9)
            assert abs(via_scene.view_depth - via_camera.view_depth) < 1e-9


class TestPlaneJson:
    def test_round_trip(self):
        plane = PlaneParam((0.6, 0.0, 0.8), -1.25)
        back = plane_from_json(plane_to_json(plane))
        np.testing.assert_array_equal(back.normal, plane.normal)
        assert back.offset == plane.offset

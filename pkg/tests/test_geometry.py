import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clipart3d.errors import NonPositiveDepth, PointBehindCamera, RayParallelToPlane
from clipart3d.geometry import (
    CameraModel,
    Pixel,
    RigidPose,
    apply,
    backproject_ray,
    compose,
    geodesic_rotation_error,
    ground_depth,
    ground_point,
    invert,
    normalize_plane,
    project,
)

from conftest import random_rotation


def simple_camera(fx=1000.0, fy=1000.0, cx=320.0, cy=240.0):
    K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    n, d = normalize_plane([0.0, 1.0, 0.0], -1.5)
    return CameraModel(K, n, d, 640, 480)


class TestProject:
    def test_optical_axis_maps_to_principal_point(self):
        cam = simple_camera()
        p = project(cam, [0.0, 0.0, 5.0])
        assert p.u == pytest.approx(320.0) and p.v == pytest.approx(240.0)

    def test_linear_pinhole(self):
        cam = simple_camera()
        p = project(cam, [1.0, 0.0, 1000.0])
        assert p.u == pytest.approx(321.0) and p.v == pytest.approx(240.0)

    def test_behind_camera_raises(self):
        with pytest.raises(NonPositiveDepth):
            project(simple_camera(), [0.0, 0.0, -1.0])


class TestBackproject:
    def test_principal_point_is_optical_axis(self):
        cam = simple_camera()
        ray = backproject_ray(cam, Pixel(320.0, 240.0))
        np.testing.assert_allclose(ray, [0.0, 0.0, 1.0], atol=1e-12)

    def test_offset_by_focal(self):
        cam = simple_camera()
        ray = backproject_ray(cam, Pixel(1000.0 + 320.0, 240.0))
        np.testing.assert_allclose(ray, np.array([1.0, 0.0, 1.0]) / np.sqrt(2), atol=1e-12)

    def test_round_trip_1000_random_pixels(self):
        cam = simple_camera()
        rng = np.random.default_rng(0)
        for _ in range(1000):
            px = Pixel(rng.uniform(0, 640), rng.uniform(0, 480))
            ray = backproject_ray(cam, px)
            for lam in (0.1, 1.0, 100.0):
                back = project(cam, lam * ray)
                assert abs(back.u - px.u) < 1e-6 and abs(back.v - px.v) < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(u=st.floats(0, 639), v=st.floats(0, 479), lam=st.sampled_from([0.1, 1.0, 100.0]))
    def test_round_trip_property(self, u, v, lam):
        cam = simple_camera()
        back = project(cam, lam * backproject_ray(cam, Pixel(u, v)))
        assert abs(back.u - u) < 1e-6 and abs(back.v - v) < 1e-6


class TestGroundDepth:
    def test_analytic_intersection(self):
        # ray (0, 0.5, 1) against n=(0,1,0), d=-1.5 meets the ground at z=3
        cam = simple_camera()
        px = Pixel(320.0, 240.0 + 0.5 * 1000.0)
        assert ground_depth(cam, px) == pytest.approx(3.0, abs=1e-12)

    def test_parallel_ray_raises(self):
        cam = simple_camera()
        with pytest.raises(RayParallelToPlane):
            ground_depth(cam, Pixel(100.0, 240.0))  # v = cy gives a level ray

    def test_above_horizon_raises(self):
        cam = simple_camera()
        with pytest.raises(PointBehindCamera):
            ground_depth(cam, Pixel(320.0, 100.0))

    def test_forward_render_oracle(self):
        # project a random on-plane point, then recover its depth from the pixel
        rng = np.random.default_rng(1)
        for _ in range(200):
            n = rng.normal(size=3)
            n /= np.linalg.norm(n)
            d = -abs(rng.uniform(1.0, 10.0))
            if n[1] < 0:
                n = -n
            cam = CameraModel(simple_camera().K, *normalize_plane(n, d), 640, 480)
            # random point on the plane in front of the camera
            base = -cam.plane_offset * cam.plane_normal
            t1 = np.cross(cam.plane_normal, [0.0, 0.0, 1.0])
            if np.linalg.norm(t1) < 1e-6:
                t1 = np.cross(cam.plane_normal, [1.0, 0.0, 0.0])
            t1 /= np.linalg.norm(t1)
            t2 = np.cross(cam.plane_normal, t1)
            X = base + rng.uniform(-5, 5) * t1 + rng.uniform(-5, 5) * t2
            if X[2] < 0.5:
                continue
            px = project(cam, X)
            z = ground_depth(cam, px)
            assert abs(z - X[2]) / X[2] < 1e-9

    def test_result_lies_on_plane(self):
        cam = simple_camera()
        rng = np.random.default_rng(2)
        for _ in range(100):
            px = Pixel(rng.uniform(0, 640), rng.uniform(320, 480))
            X = ground_point(cam, px)
            assert abs(cam.plane_normal @ X + cam.plane_offset) < 1e-9


class TestRigidPose:
    def test_compose_with_identity(self):
        rng = np.random.default_rng(3)
        p = RigidPose.from_matrix(random_rotation(rng), rng.normal(size=3))
        q = compose(RigidPose.identity(), p)
        np.testing.assert_allclose(q.rotation, p.rotation, atol=1e-12)
        np.testing.assert_allclose(q.translation, p.translation, atol=1e-12)

    def test_group_inverse(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            p = RigidPose.from_matrix(random_rotation(rng), rng.normal(size=3))
            X = rng.normal(size=3)
            np.testing.assert_allclose(apply(invert(p), apply(p, X)), X, atol=1e-9)

    def test_chain_matches_matrix_product(self):
        rng = np.random.default_rng(5)
        poses = [RigidPose.from_matrix(random_rotation(rng), rng.normal(size=3))
                 for _ in range(10)]
        chained = poses[0]
        M = np.eye(4)
        T0 = np.eye(4)
        T0[:3, :3] = poses[0].rotation
        T0[:3, 3] = poses[0].translation
        M = T0
        for p in poses[1:]:
            chained = compose(chained, p)
            T = np.eye(4)
            T[:3, :3] = p.rotation
            T[:3, 3] = p.translation
            M = M @ T
        X = rng.normal(size=3)
        np.testing.assert_allclose(apply(chained, X), (M @ np.append(X, 1.0))[:3], atol=1e-9)

    def test_renormalization_over_long_chains(self):
        rng = np.random.default_rng(6)
        step = RigidPose.from_matrix(random_rotation(rng), rng.normal(size=3))
        acc = RigidPose.identity()
        for _ in range(10_000):
            acc = compose(acc, step)
        R = acc.rotation
        assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-6

    def test_geodesic_error_symmetry(self):
        rng = np.random.default_rng(7)
        Ra, Rb = random_rotation(rng), random_rotation(rng)
        assert geodesic_rotation_error(Ra, Rb) == pytest.approx(
            geodesic_rotation_error(Rb, Ra), abs=1e-12
        )


class TestCameraModelValidation:
    def test_plane_sign_canonicalized(self):
        n, d = normalize_plane([0.0, 2.0, 0.0], 3.0)
        assert d < 0 and np.linalg.norm(n) == pytest.approx(1.0)

    def test_rejects_nonunit_normal(self):
        K = simple_camera().K
        with pytest.raises(ValueError):
            CameraModel(K, np.array([0.0, 2.0, 0.0]), -1.5, 640, 480)

    def test_rejects_bad_K(self):
        K = np.eye(3)
        K[2, 0] = 0.1
        with pytest.raises(ValueError):
            CameraModel(K, np.array([0.0, 1.0, 0.0]), -1.5, 640, 480)

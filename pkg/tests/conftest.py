import numpy as np
import pytest

from clipart3d.compositor import make_reconstructed_person, make_reconstructed_vehicle
from clipart3d.geometry import CameraModel, normalize_plane, quat_to_matrix
from clipart3d.shape_model import toy_vehicle_basis
from clipart3d.synth import SynthSpec, _upright_pose, sample_camera
from clipart3d.tracks import Keypoints2D, ObjectTrack, TrackFrame


@pytest.fixture(scope="session")
def toy_basis():
    return toy_vehicle_basis()


@pytest.fixture
def default_camera():
    K = np.array([[1000.0, 0.0, 640.0], [0.0, 1000.0, 360.0], [0.0, 0.0, 1.0]])
    n, d = normalize_plane([0.0, 1.0, 0.0], -5.0)
    return CameraModel(K, n, d, 1280, 720)


def random_rotation(rng):
    q = rng.normal(size=4)
    return quat_to_matrix(q / np.linalg.norm(q))


def project_points(camera, points):
    uvw = np.asarray(points, dtype=float) @ camera.K.T
    return uvw[:, :2] / uvw[:, 2:3]


def synthetic_track(seed, basis, n_frames=5, noise_sigma=0.0, shape_sigma=0.0):
    """Forward-projection oracle: a moving upright car with exact 2D keypoints.

    Returns (camera, track, true_poses, true_alpha). Ground-truth alpha is
    zero unless shape_sigma is set (the fit objective's shape prior is
    centered on the mean shape).
    """
    rng = np.random.default_rng(seed)
    spec = SynthSpec()
    camera = sample_camera(rng, spec)
    alpha = rng.normal(size=basis.n_components) * basis.coefficient_scales * shape_sigma
    from clipart3d.shape_model import ShapeCoefficients, instantiate

    X = instantiate(basis, ShapeCoefficients(alpha))
    for _ in range(1000):
        u = rng.uniform(0.25 * camera.image_width, 0.75 * camera.image_width)
        v = rng.uniform(0.4 * camera.image_height, 0.95 * camera.image_height)
        from clipart3d.geometry import Pixel, ground_point
        from clipart3d.errors import PointBehindCamera, RayParallelToPlane

        try:
            position = ground_point(camera, Pixel(u, v))
        except (PointBehindCamera, RayParallelToPlane):
            continue
        if not 4.0 <= position[2] <= 55.0:
            continue
        yaw = rng.uniform(0, 2 * np.pi)
        pose0 = _upright_pose(camera, position, yaw)
        speed = rng.uniform(0.4, 1.2)
        forward = pose0.rotation[:, 2]
        poses, frames = [], []
        ok = True
        for f in range(n_frames):
            from clipart3d.geometry import RigidPose

            pose = RigidPose(pose0.quaternion, position + f * speed * forward)
            Y = X @ pose.rotation.T + pose.translation
            if np.any(Y[:, 2] < 2.0):
                ok = False
                break
            uv = project_points(camera, Y)
            if noise_sigma > 0:
                uv = uv + rng.normal(0, noise_sigma, uv.shape)
            poses.append(pose)
            frames.append(TrackFrame(f, (0.0, 0.0, 1.0, 1.0), None,
                                     Keypoints2D.all_visible(uv)))
        if ok:
            return camera, ObjectTrack(0, "car", frames), poses, alpha
    raise RuntimeError(f"could not build a synthetic track for seed {seed}")


def pool_from_scene(scene, basis):
    """Reconstructed-object pool built from a synthetic frame's exact ground truth."""
    frame = scene.frames[0]
    pool = []
    for g in frame.gt:
        if g.amodal_bbox is None:
            continue
        x0, y0, x1, y1 = (int(v) for v in g.amodal_bbox)
        crop = frame.image[y0:y1, x0:x1].copy()
        mask = g.amodal_mask[y0:y1, x0:x1]
        if not mask.any():
            continue
        if g.object_class == "car":
            pool.append(
                make_reconstructed_vehicle(scene.camera, basis, g.pose, g.coeffs, crop,
                                           mask, (x0, y0), g.keypoints, g.track_id)
            )
        else:
            pool.append(
                make_reconstructed_person(scene.camera, g.pose, crop, mask, (x0, y0),
                                          g.keypoints, track_id=g.track_id)
            )
    return pool

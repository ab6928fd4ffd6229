"""Camera model, rigid transforms, projection, and ray/ground-plane intersection.

Conventions used throughout the package:

- Camera frame is the usual computer-vision frame: x right, y down,
  z forward (positive depth into the scene). Units are meters.
- The ground plane is given in the camera frame as [n, d] with unit normal
  n and offset d such that ground points X satisfy n.X + d = 0. The sign is
  canonical: the camera center (origin) satisfies n.0 + d < 0, i.e. n points
  away from the half-space containing the camera.
- Pixels are continuous (u, v) with u along image columns and v along rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveDepth, PointBehindCamera, RayParallelToPlane

_EPS_DEPTH = 1e-9
_EPS_PARALLEL = 1e-12


@dataclass(frozen=True)
class Pixel:
    u: float
    v: float

    def __post_init__(self):
        if not (np.isfinite(self.u) and np.isfinite(self.v)):
            raise ValueError(f"pixel coordinates must be finite, got ({self.u}, {self.v})")

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v], dtype=float)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus the metric ground plane, all in the camera frame.

    K is 3x3 upper triangular with K[2,2] = 1. (plane_normal, plane_offset)
    define the ground as n.X + d = 0 with the canonical sign described in the
    module docstring. Use :func:`normalize_plane` (or the calibration loader)
    to bring an arbitrary (n, d) into canonical form.
    """

    K: np.ndarray
    plane_normal: np.ndarray
    plane_offset: float
    image_width: int
    image_height: int
    K_inv: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        n = np.asarray(self.plane_normal, dtype=float)
        if K.shape != (3, 3):
            raise ValueError(f"K must be 3x3, got {K.shape}")
        if not np.all(np.isfinite(K)):
            raise ValueError("K contains non-finite entries")
        if abs(K[2, 2] - 1.0) > 1e-12 or np.any(np.abs(K[[1, 2, 2], [0, 0, 1]]) > 1e-12):
            raise ValueError("K must be upper triangular with K[2,2] = 1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal entries must be positive")
        if n.shape != (3,) or abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane_normal must be a unit 3-vector")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "plane_normal", n)
        object.__setattr__(self, "K_inv", np.linalg.inv(K))


def normalize_plane(n, d) -> tuple[np.ndarray, float]:
    """Scale (n, d) to unit normal and flip sign so the camera center gets n.0 + d < 0."""
    n = np.asarray(n, dtype=float)
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        raise ValueError("plane normal must be nonzero")
    n = n / norm
    d = float(d) / norm
    if d > 0:
        n, d = -n, -d
    return n, d


def project(camera: CameraModel, point) -> Pixel:
    """Perspective projection of a camera-frame 3D point to a pixel.

    Raises NonPositiveDepth if the point is not strictly in front of the camera.
    """
    p = np.asarray(point, dtype=float)
    if p[2] <= _EPS_DEPTH:
        raise NonPositiveDepth(f"point depth {p[2]} is not positive")
    h = camera.K @ p
    return Pixel(h[0] / h[2], h[1] / h[2])


def project_many(camera: CameraModel, points: np.ndarray) -> np.ndarray:
    """Vectorized projection of an (N, 3) array; depth checks are the caller's job."""
    p = np.asarray(points, dtype=float)
    h = p @ camera.K.T
    return h[:, :2] / h[:, 2:3]


def backproject_ray(camera: CameraModel, pixel: Pixel) -> np.ndarray:
    """Unit direction of the viewing ray through a pixel, camera frame."""
    v = camera.K_inv @ np.array([pixel.u, pixel.v, 1.0])
    return v / np.linalg.norm(v)


def ground_depth(camera: CameraModel, pixel: Pixel) -> float:
    """Depth z_b at which the pixel's viewing ray meets the ground plane.

    The returned z_b is the z component of the intersection, so the 3D point
    is z_b * K^-1 (u, v, 1). Raises RayParallelToPlane when the ray never
    meets the plane and PointBehindCamera when the intersection has z_b <= 0.
    """
    ray = camera.K_inv @ np.array([pixel.u, pixel.v, 1.0])
    denom = float(camera.plane_normal @ ray)
    if abs(denom) < _EPS_PARALLEL:
        raise RayParallelToPlane(f"ray through ({pixel.u}, {pixel.v}) is parallel to the ground plane")
    z_b = -camera.plane_offset / denom
    if z_b <= 0:
        raise PointBehindCamera(f"ground intersection for ({pixel.u}, {pixel.v}) has depth {z_b}")
    return z_b


def ground_point(camera: CameraModel, pixel: Pixel) -> np.ndarray:
    """3D camera-frame point where the pixel ray meets the ground plane."""
    ray = camera.K_inv @ np.array([pixel.u, pixel.v, 1.0])
    return ground_depth(camera, pixel) * ray


def _quat_normalize(q: np.ndarray) -> np.ndarray:
    q = q / np.linalg.norm(q)
    # canonical hemisphere keeps serialization and comparisons stable
    if q[0] < 0:
        q = -q
    return q


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; assumes R is (close to) a proper rotation."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return _quat_normalize(q)


def axis_angle_to_quat(w: np.ndarray) -> np.ndarray:
    """Quaternion of the rotation vector w (angle = |w|, axis = w/|w|)."""
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        # first-order expansion is exact to double precision here
        q = np.array([1.0, 0.5 * w[0], 0.5 * w[1], 0.5 * w[2]])
    else:
        axis = w / theta
        half = 0.5 * theta
        q = np.concatenate([[np.cos(half)], np.sin(half) * axis])
    return _quat_normalize(q)


def _quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


@dataclass(frozen=True)
class RigidPose:
    """SE(3) pose stored as a unit quaternion (w, x, y, z) plus translation.

    Quaternion storage avoids orthonormality drift over long composition
    chains; the rotation matrix is built on demand. The quaternion is
    renormalized after every composition.
    """

    quaternion: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if q.shape != (4,):
            raise ValueError(f"quaternion must have 4 components, got {q.shape}")
        if t.shape != (3,):
            raise ValueError(f"translation must have 3 components, got {t.shape}")
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValueError("quaternion is not unit length")
        object.__setattr__(self, "quaternion", _quat_normalize(q))
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_matrix(R, t) -> "RigidPose":
        R = np.asarray(R, dtype=float)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6 or np.linalg.det(R) < 0:
            raise ValueError("R is not a proper rotation")
        return RigidPose(matrix_to_quat(R), np.asarray(t, dtype=float))

    @staticmethod
    def from_axis_angle(w, t) -> "RigidPose":
        return RigidPose(axis_angle_to_quat(np.asarray(w, dtype=float)), np.asarray(t, dtype=float))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quaternion)


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """Pose product: apply(compose(a, b), X) == apply(a, apply(b, X))."""
    q = _quat_normalize(_quat_mul(a.quaternion, b.quaternion))
    t = a.rotation @ b.translation + a.translation
    return RigidPose(q, t)


def invert(a: RigidPose) -> RigidPose:
    q = a.quaternion * np.array([1.0, -1.0, -1.0, -1.0])
    R_inv = quat_to_matrix(q)
    return RigidPose(_quat_normalize(q), -(R_inv @ a.translation))


def apply(a: RigidPose, X) -> np.ndarray:
    return a.rotation @ np.asarray(X, dtype=float) + a.translation


def apply_many(a: RigidPose, X: np.ndarray) -> np.ndarray:
    """Transform an (N, 3) array of points."""
    return np.asarray(X, dtype=float) @ a.rotation.T + a.translation


def geodesic_rotation_error(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Angle of the relative rotation between two rotation matrices, radians."""
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))

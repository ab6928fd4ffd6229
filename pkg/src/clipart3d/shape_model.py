"""PCA keypoint shape model for vehicles.

A basis holds a mean N x 3 keypoint layout plus K principal components; a
shape instance is mean + sum_k alpha_k * component_k. The object frame is
right handed with y up, the wheel-contact plane at y = 0, and the x/z
centroid of the mean shape at the origin (loaders canonicalize).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, ParseError

# wheel keypoints double as the ground-contact points
VEHICLE_KEYPOINT_NAMES = [
    "wheel_front_left",
    "wheel_front_right",
    "wheel_back_left",
    "wheel_back_right",
    "light_front_left",
    "light_front_right",
    "light_back_left",
    "light_back_right",
    "roof_front_left",
    "roof_front_right",
    "roof_back_left",
    "roof_back_right",
]

CLAMP_SIGMAS = 3.0


@dataclass(frozen=True)
class ShapeCoefficients:
    alpha: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        if a.ndim != 1 or not np.all(np.isfinite(a)):
            raise ValueError("alpha must be a finite 1-d vector")
        object.__setattr__(self, "alpha", a)

    @staticmethod
    def zeros(k: int) -> "ShapeCoefficients":
        return ShapeCoefficients(np.zeros(k))


@dataclass(frozen=True)
class ShapeBasis:
    """Mean shape Q_bar (N x 3) plus K components (K x N x 3), meters."""

    mean_shape: np.ndarray
    components: np.ndarray
    keypoint_names: tuple
    coefficient_scales: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean_shape, dtype=float)
        comps = np.asarray(self.components, dtype=float)
        scales = np.asarray(self.coefficient_scales, dtype=float)
        if mean.ndim != 2 or mean.shape[1] != 3:
            raise ValueError(f"mean_shape must be N x 3, got {mean.shape}")
        n = mean.shape[0]
        if n < 4:
            raise ValueError(f"need at least 4 keypoints, got {n}")
        if comps.size == 0:
            comps = comps.reshape(0, n, 3)
        if comps.shape[1:] != (n, 3):
            raise ValueError(f"components must be K x {n} x 3, got {comps.shape}")
        if len(self.keypoint_names) != n:
            raise ValueError("keypoint_names length must match mean_shape")
        if scales.shape != (comps.shape[0],) or np.any(scales <= 0):
            raise ValueError("coefficient_scales must be positive, one per component")
        norms = np.linalg.norm(comps.reshape(comps.shape[0], -1), axis=1)
        if np.any(norms <= 0):
            raise ValueError("every component must have positive Frobenius norm")
        horiz = mean[:, [0, 2]].mean(axis=0)
        if np.max(np.abs(horiz)) > 1e-6:
            raise ValueError("mean shape x/z centroid must be at the origin (canonicalize first)")
        object.__setattr__(self, "mean_shape", mean)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "keypoint_names", tuple(self.keypoint_names))
        object.__setattr__(self, "coefficient_scales", scales)

    @property
    def n_keypoints(self) -> int:
        return self.mean_shape.shape[0]

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def contact_indices(self) -> np.ndarray:
        """Indices of the ground-contact (wheel) keypoints, by name prefix."""
        idx = [i for i, name in enumerate(self.keypoint_names) if name.startswith("wheel")]
        return np.array(idx, dtype=int)


def canonicalize(mean_shape, components, keypoint_names) -> tuple[np.ndarray, np.ndarray]:
    """Shift the mean so the x/z centroid is at the origin and the
    wheel-contact plane (or lowest point, if no wheel keypoints) is y = 0."""
    mean = np.array(mean_shape, dtype=float)
    comps = np.asarray(components, dtype=float)
    shift = np.zeros(3)
    shift[[0, 2]] = mean[:, [0, 2]].mean(axis=0)
    wheel = [i for i, name in enumerate(keypoint_names) if name.startswith("wheel")]
    shift[1] = mean[wheel, 1].mean() if wheel else mean[:, 1].min()
    return mean - shift, comps


def instantiate(basis: ShapeBasis, coeffs: ShapeCoefficients) -> np.ndarray:
    """Keypoint positions mean + sum_k alpha_k * component_k, as N x 3."""
    alpha = coeffs.alpha
    if alpha.shape[0] != basis.n_components:
        raise DimensionMismatch(
            f"expected {basis.n_components} coefficients, got {alpha.shape[0]}"
        )
    if alpha.shape[0] == 0:
        return basis.mean_shape.copy()
    return basis.mean_shape + np.tensordot(alpha, basis.components, axes=1)


def fit_coefficients(basis: ShapeBasis, target) -> ShapeCoefficients:
    """Least-squares coefficients for a target N x 3 layout, clamped to +-3 sigma."""
    target = np.asarray(target, dtype=float)
    if target.shape != basis.mean_shape.shape:
        raise DimensionMismatch(
            f"target shape {target.shape} does not match basis {basis.mean_shape.shape}"
        )
    k = basis.n_components
    if k == 0:
        return ShapeCoefficients(np.zeros(0))
    A = basis.components.reshape(k, -1).T
    b = (target - basis.mean_shape).ravel()
    alpha, *_ = np.linalg.lstsq(A, b, rcond=None)
    limit = CLAMP_SIGMAS * basis.coefficient_scales
    return ShapeCoefficients(np.clip(alpha, -limit, limit))


def save_basis(basis: ShapeBasis, path) -> None:
    doc = {
        "n_keypoints": basis.n_keypoints,
        "names": list(basis.keypoint_names),
        "mean": basis.mean_shape.tolist(),
        "components": basis.components.tolist(),
        "scales": basis.coefficient_scales.tolist(),
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def load_basis(path) -> ShapeBasis:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    for key in ("n_keypoints", "names", "mean", "components", "scales"):
        if key not in doc:
            raise ParseError(f"{path}: missing field '{key}'")
    try:
        n = int(doc["n_keypoints"])
        names = [str(s) for s in doc["names"]]
        mean = np.array(doc["mean"], dtype=float)
        comps = np.array(doc["components"], dtype=float)
        scales = np.array(doc["scales"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{path}: malformed numeric field: {exc}") from exc
    if n < 4:
        raise ParseError(f"{path}: n_keypoints = {n}, need at least 4")
    if mean.shape != (n, 3):
        raise ParseError(f"{path}: 'mean' has shape {mean.shape}, expected ({n}, 3)")
    if comps.size == 0:
        comps = comps.reshape(0, n, 3)
    if comps.ndim != 3 or comps.shape[1:] != (n, 3):
        raise ParseError(f"{path}: 'components' must be K x {n} x 3, got {comps.shape}")
    if len(names) != n:
        raise ParseError(f"{path}: {len(names)} names for {n} keypoints")
    if scales.ndim != 1 or scales.shape[0] != comps.shape[0]:
        raise ParseError(f"{path}: 'scales' must have one entry per component")
    if np.any(~np.isfinite(mean)) or np.any(~np.isfinite(comps)) or np.any(~np.isfinite(scales)):
        raise ParseError(f"{path}: non-finite values in basis")
    if np.any(scales <= 0):
        raise ParseError(f"{path}: 'scales' entries must be positive")
    mean, comps = canonicalize(mean, comps, names)
    try:
        return ShapeBasis(mean, comps, tuple(names), scales)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def _box_car_keypoints(length, width, body_h, roof_h, roof_front, roof_back) -> np.ndarray:
    """Keypoints of a box-like car, wheel contacts at y = 0, forward = +z."""
    hl = length / 2.0
    pts = np.array(
        [
            [-0.45 * width, 0.0, 0.64 * hl],   # wheel_front_left
            [+0.45 * width, 0.0, 0.64 * hl],   # wheel_front_right
            [-0.45 * width, 0.0, -0.64 * hl],  # wheel_back_left
            [+0.45 * width, 0.0, -0.64 * hl],  # wheel_back_right
            [-0.42 * width, 0.42 * body_h, hl],    # light_front_left
            [+0.42 * width, 0.42 * body_h, hl],    # light_front_right
            [-0.42 * width, 0.48 * body_h, -hl],   # light_back_left
            [+0.42 * width, 0.48 * body_h, -hl],   # light_back_right
            [-0.38 * width, roof_h, roof_front],   # roof_front_left
            [+0.38 * width, roof_h, roof_front],   # roof_front_right
            [-0.38 * width, roof_h, roof_back],    # roof_back_left
            [+0.38 * width, roof_h, roof_back],    # roof_back_right
        ]
    )
    return pts


# (length, width, body height, roof height, roof front z, roof back z)
_TOY_VARIANTS = [
    (4.50, 1.80, 1.05, 1.42, 0.55, -1.35),  # sedan
    (3.90, 1.68, 1.02, 1.48, 0.70, -1.45),  # compact hatch
    (4.70, 1.92, 1.20, 1.72, 0.80, -1.60),  # suv
    (4.65, 1.82, 1.08, 1.50, 0.60, -1.90),  # wagon
    (5.20, 1.95, 1.25, 1.78, 1.60, 0.10),   # pickup cab
]


def toy_vehicle_basis(n_components: int = 2) -> ShapeBasis:
    """Small deterministic vehicle basis: PCA over five box-car variants.

    Stands in for a CAD-derived basis so the pipeline is runnable and
    testable without external model data.
    """
    shapes = []
    for params in _TOY_VARIANTS:
        pts = _box_car_keypoints(*params)
        pts[:, [0, 2]] -= pts[:, [0, 2]].mean(axis=0)
        shapes.append(pts)
    data = np.stack([s.ravel() for s in shapes])
    mean = data.mean(axis=0)
    centered = data - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    k = min(n_components, np.sum(svals > 1e-9))
    comps = vt[:k].reshape(k, -1, 3)
    scales = svals[:k] / np.sqrt(len(shapes) - 1)
    mean_pts, comps = canonicalize(mean.reshape(-1, 3), comps, VEHICLE_KEYPOINT_NAMES)
    return ShapeBasis(mean_pts, comps, tuple(VEHICLE_KEYPOINT_NAMES), scales)

"""Depth-ordered clip-art composition.

Reconstructed objects keep their original image positions; a scene is built
by pasting their cutouts over the background from the farthest to the
closest. Non-intersection is decided on ground-plane footprints (oriented
rectangles, separating-axis test). Depth comes from rasterizing the convex
hull of each object's 3D points with perspective-correct interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import (
    CropOutOfBounds,
    EmptyAmodal,
    EmptyPool,
    ModalNotSubset,
    NonPositiveDepth,
    OverlappingFootprints,
)
from .geometry import CameraModel, RigidPose, apply_many
from .shape_model import ShapeBasis, ShapeCoefficients, instantiate
from .tracks import Keypoints2D, Visibility

SELF_OCCLUSION_MARGIN_M = 0.05
FOOTPRINT_INFLATE_M = 0.1

# stand-in 3D extent for persons without a recovered skeleton (w, h, d meters)
PERSON_PROXY_SIZE = (0.5, 1.7, 0.3)


@dataclass(frozen=True)
class SceneConfig:
    n_objects_min: int = 1
    n_objects_max: int = 6
    seed: int = 0
    min_depth: float = 2.0
    max_depth: float = 80.0
    feather_px: float = 0.0
    allow_person: bool = True
    allow_car: bool = True

    def __post_init__(self):
        if self.n_objects_min < 1 or self.n_objects_max < self.n_objects_min:
            raise ValueError("n_objects range must be nonempty and positive")
        if self.min_depth <= 0 or self.max_depth <= self.min_depth:
            raise ValueError("depth range must be nonempty and positive")
        if self.feather_px < 0:
            raise ValueError("feather_px must be nonnegative")


@dataclass(frozen=True)
class OrientedRect:
    """Rectangle in ground-plane coordinates: center, two unit axes, half extents."""

    center: np.ndarray
    axes: np.ndarray          # (2, 2), rows are unit direction vectors
    half_extents: np.ndarray  # (2,)

    def corners(self) -> np.ndarray:
        signs = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
        return self.center + (signs * self.half_extents) @ self.axes

    @property
    def area(self) -> float:
        return float(4.0 * self.half_extents[0] * self.half_extents[1])


def plane_basis(camera: CameraModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic origin and orthonormal in-plane axes for the ground plane."""
    n = camera.plane_normal
    origin = -camera.plane_offset * n
    seed = np.array([0.0, 0.0, 1.0])
    e1 = seed - (seed @ n) * n
    if np.linalg.norm(e1) < 1e-6:
        seed = np.array([1.0, 0.0, 0.0])
        e1 = seed - (seed @ n) * n
    e1 = e1 / np.linalg.norm(e1)
    return origin, e1, np.cross(n, e1)


def to_plane_coords(camera: CameraModel, points: np.ndarray) -> np.ndarray:
    """Project camera-frame points onto the plane and express them in plane coords."""
    origin, e1, e2 = plane_basis(camera)
    p = np.atleast_2d(points)
    n = camera.plane_normal
    dropped = p - np.outer(p @ n + camera.plane_offset, n)
    rel = dropped - origin
    return np.column_stack([rel @ e1, rel @ e2])


def from_plane_coords(camera: CameraModel, coords: np.ndarray) -> np.ndarray:
    origin, e1, e2 = plane_basis(camera)
    c = np.atleast_2d(coords)
    return origin + np.outer(c[:, 0], e1) + np.outer(c[:, 1], e2)


def _cross2(a, b) -> float:
    return a[0] * b[1] - a[1] * b[0]


def _convex_hull_2d(pts: np.ndarray) -> np.ndarray:
    """Monotone-chain hull, counterclockwise, no repeated endpoint."""
    pts = np.unique(np.round(pts, 12), axis=0)
    if len(pts) == 1:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def half(points):
        out = []
        for p in points:
            while len(out) >= 2 and _cross2(out[-1] - out[-2], p - out[-2]) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def min_area_rect(pts2d: np.ndarray) -> OrientedRect:
    """Smallest-area oriented bounding rectangle of a 2D point set."""
    hull = _convex_hull_2d(np.asarray(pts2d, dtype=float))
    if len(hull) == 1:
        return OrientedRect(hull[0], np.eye(2), np.zeros(2))
    best = None
    edges = hull - np.roll(hull, 1, axis=0)
    if len(hull) == 2:
        edges = [hull[1] - hull[0]]
    for e in edges:
        norm = np.linalg.norm(e)
        if norm < 1e-12:
            continue
        u = e / norm
        v = np.array([-u[1], u[0]])
        pu, pv = hull @ u, hull @ v
        area = (pu.max() - pu.min()) * (pv.max() - pv.min())
        if best is None or area < best[0]:
            center = 0.5 * (pu.max() + pu.min()) * u + 0.5 * (pv.max() + pv.min()) * v
            half = 0.5 * np.array([pu.max() - pu.min(), pv.max() - pv.min()])
            best = (area, OrientedRect(center, np.vstack([u, v]), half))
    return best[1]


def rects_intersect(a: OrientedRect, b: OrientedRect) -> bool:
    """Separating-axis test; rectangles that merely touch count as disjoint."""
    ca, cb = a.corners(), b.corners()
    for axis in np.vstack([a.axes, b.axes]):
        pa, pb = ca @ axis, cb @ axis
        if pa.max() <= pb.min() + 1e-12 or pb.max() <= pa.min() + 1e-12:
            return False
    return True


@dataclass(frozen=True)
class ReconstructedObject:
    """Unoccluded object cutout plus its metric reconstruction.

    The cutout (source_crop, source_mask) lives at crop_origin = (x0, y0) in
    the source image; modal equals amodal because the object was mined
    unoccluded. Vehicles carry coeffs, persons may carry an object-frame
    skeleton; otherwise a box proxy stands in for depth rendering.
    """

    object_class: str
    pose: RigidPose
    coeffs: ShapeCoefficients | None
    source_crop: np.ndarray
    source_mask: np.ndarray
    crop_origin: tuple
    keypoints2d_source: Keypoints2D | None
    footprint: OrientedRect
    skeleton3d: np.ndarray | None = None
    track_id: int = -1
    score: float = 1.0

    def __post_init__(self):
        if self.source_mask.sum() == 0:
            raise ValueError("source_mask is empty")
        if self.footprint.area <= 0:
            raise ValueError("footprint area must be positive")


def _person_proxy_corners(skeleton3d, height=None):
    w, h, d = PERSON_PROXY_SIZE
    if height is not None:
        h = height
    xs, ys, zs = w / 2.0, h, d / 2.0
    box = np.array(
        [
            [-xs, 0, -zs], [xs, 0, -zs], [xs, 0, zs], [-xs, 0, zs],
            [-xs, ys, -zs], [xs, ys, -zs], [xs, ys, zs], [-xs, ys, zs],
        ]
    )
    return box if skeleton3d is None else np.vstack([skeleton3d, box])


def object_points(obj: ReconstructedObject, basis: ShapeBasis | None) -> np.ndarray:
    """Camera-frame 3D points whose convex hull stands in for the object."""
    if obj.object_class == "car":
        pts = instantiate(basis, obj.coeffs)
    else:
        pts = _person_proxy_corners(obj.skeleton3d)
    return apply_many(obj.pose, pts)


def footprint_of_points(camera: CameraModel, pts3d: np.ndarray,
                        inflate: float = FOOTPRINT_INFLATE_M) -> OrientedRect:
    rect = min_area_rect(to_plane_coords(camera, pts3d))
    return OrientedRect(rect.center, rect.axes, rect.half_extents + inflate)


def footprint_depth(camera: CameraModel, rect: OrientedRect) -> float:
    """Camera-frame depth (z) of the footprint center lifted onto the plane."""
    return float(from_plane_coords(camera, rect.center[None])[0][2])


def make_reconstructed_vehicle(camera, basis, pose, coeffs, source_crop, source_mask,
                               crop_origin, keypoints2d, track_id=-1, score=1.0,
                               contact_tolerance=1e-3) -> ReconstructedObject:
    """Build a vehicle cutout record, checking the wheel contacts sit on the plane."""
    X = apply_many(pose, instantiate(basis, coeffs))
    resid = X[basis.contact_indices()] @ camera.plane_normal + camera.plane_offset
    if np.max(np.abs(resid)) > contact_tolerance:
        raise ValueError(f"contact points off the ground plane by {np.max(np.abs(resid)):.2e} m")
    fp = footprint_of_points(camera, X)
    return ReconstructedObject("car", pose, coeffs, source_crop, source_mask,
                               crop_origin, keypoints2d, fp, None, track_id, score)


def make_reconstructed_person(camera, pose, source_crop, source_mask, crop_origin,
                              keypoints2d=None, skeleton3d=None, track_id=-1,
                              score=1.0) -> ReconstructedObject:
    pts = apply_many(pose, _person_proxy_corners(skeleton3d))
    fp = footprint_of_points(camera, pts)
    return ReconstructedObject("person", pose, None, source_crop, source_mask,
                               crop_origin, keypoints2d, fp, skeleton3d, track_id, score)


@dataclass
class DepthPatch:
    """Per-object depth raster over a bounding region; +inf marks no coverage."""

    x0: int
    y0: int
    depth: np.ndarray

    def value_at(self, x: int, y: int) -> float:
        yy, xx = y - self.y0, x - self.x0
        if 0 <= yy < self.depth.shape[0] and 0 <= xx < self.depth.shape[1]:
            return float(self.depth[yy, xx])
        return np.inf

    def covered_mean(self) -> float:
        vals = self.depth[np.isfinite(self.depth)]
        return float(vals.mean()) if vals.size else np.inf


def _rasterize_triangles(depth, x0, y0, verts_uv, verts_z, simplices):
    h, w = depth.shape
    for tri in simplices:
        uv = verts_uv[tri]
        z = verts_z[tri]
        lo_x = max(int(np.ceil(uv[:, 0].min() - 1e-9)), x0)
        hi_x = min(int(np.floor(uv[:, 0].max() + 1e-9)), x0 + w - 1)
        lo_y = max(int(np.ceil(uv[:, 1].min() - 1e-9)), y0)
        hi_y = min(int(np.floor(uv[:, 1].max() + 1e-9)), y0 + h - 1)
        if lo_x > hi_x or lo_y > hi_y:
            continue
        denom = _cross2(uv[1] - uv[0], uv[2] - uv[0])
        if abs(denom) < 1e-12:
            continue
        gx, gy = np.meshgrid(np.arange(lo_x, hi_x + 1), np.arange(lo_y, hi_y + 1))
        px = gx.astype(float)
        py = gy.astype(float)
        w0 = ((uv[1, 0] - px) * (uv[2, 1] - py) - (uv[2, 0] - px) * (uv[1, 1] - py)) / denom
        w1 = ((uv[2, 0] - px) * (uv[0, 1] - py) - (uv[0, 0] - px) * (uv[2, 1] - py)) / denom
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
        if not inside.any():
            continue
        # 1/z interpolates linearly in screen space (perspective correct)
        inv_z = w0 * (1.0 / z[0]) + w1 * (1.0 / z[1]) + w2 * (1.0 / z[2])
        zval = np.where(inv_z > 0, 1.0 / np.maximum(inv_z, 1e-300), np.inf)
        sub = depth[lo_y - y0 : hi_y - y0 + 1, lo_x - x0 : hi_x - x0 + 1]
        np.minimum(sub, np.where(inside, zval, np.inf), out=sub)


def rasterize_hull(camera: CameraModel, pts3d: np.ndarray, region) -> np.ndarray:
    """Depth raster of the convex hull of pts3d over region = (x0, y0, w, h).

    Returns an (h, w) float array with +inf where the hull does not cover the
    pixel. Degenerate (coplanar or tiny) point sets fall back to a constant
    billboard at the centroid depth over the projected hull polygon.
    """
    pts3d = np.asarray(pts3d, dtype=float)
    if np.any(pts3d[:, 2] <= 1e-9):
        raise NonPositiveDepth("hull points must lie in front of the camera")
    x0, y0, w, h = region
    depth = np.full((h, w), np.inf)
    uvw = pts3d @ camera.K.T
    uv = uvw[:, :2] / uvw[:, 2:3]
    try:
        hull = ConvexHull(pts3d)
        _rasterize_triangles(depth, x0, y0, uv, pts3d[:, 2], hull.simplices)
        return depth
    except QhullError:
        pass
    # billboard fallback: constant depth over the 2D hull of the projections
    z0 = float(pts3d[:, 2].mean())
    poly = _convex_hull_2d(uv)
    if len(poly) < 3:
        return depth
    fan = [(0, i, i + 1) for i in range(1, len(poly) - 1)]
    _rasterize_triangles(depth, x0, y0, poly, np.full(len(poly), z0), np.array(fan))
    return depth


def _amodal_bounds(obj: ReconstructedObject):
    x0, y0 = obj.crop_origin
    mh, mw = obj.source_mask.shape
    return int(x0), int(y0), mw, mh


def rasterize_hull_depth(camera: CameraModel, obj: ReconstructedObject,
                         basis: ShapeBasis) -> DepthPatch:
    """Hull depth raster restricted to the object's amodal mask region."""
    x0, y0, w, h = _amodal_bounds(obj)
    pts = object_points(obj, basis)
    depth = rasterize_hull(camera, pts, (x0, y0, w, h))
    covered = np.isfinite(depth)
    if not covered[obj.source_mask].any():
        # hull projected away from the mask (degenerate data): billboard it
        depth = np.where(obj.source_mask, float(pts[:, 2].mean()), np.inf)
    else:
        depth = np.where(obj.source_mask, depth, np.inf)
    return DepthPatch(x0, y0, depth)


def occlusion_fraction(modal: np.ndarray, amodal: np.ndarray) -> float:
    """1 - |modal| / |amodal| from pixel counts."""
    modal = np.asarray(modal, dtype=bool)
    amodal = np.asarray(amodal, dtype=bool)
    n_amodal = int(amodal.sum())
    if n_amodal == 0:
        raise EmptyAmodal("amodal mask has no pixels")
    if np.any(modal & ~amodal):
        raise ModalNotSubset("modal mask has pixels outside the amodal mask")
    return 1.0 - int(modal.sum()) / n_amodal


def sample_nonintersecting(pool, config: SceneConfig, rng=None):
    """Seeded random subset of the pool with pairwise disjoint footprints.

    Objects keep their original poses; the subset size lands in the
    configured range when the greedy pass can achieve it, otherwise the pass
    returns every object it could fit.
    """
    if not pool:
        raise EmptyPool("no reconstructed objects to sample from")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    allowed = []
    for obj in pool:
        if obj.object_class == "car" and not config.allow_car:
            continue
        if obj.object_class == "person" and not config.allow_person:
            continue
        allowed.append(obj)
    target = int(rng.integers(config.n_objects_min, config.n_objects_max + 1))
    order = rng.permutation(len(allowed))
    chosen = []
    for idx in order:
        if len(chosen) >= target:
            break
        cand = allowed[idx]
        if all(not rects_intersect(cand.footprint, c.footprint) for c in chosen):
            chosen.append(cand)
    return chosen


@dataclass
class ObjectAnnotation:
    object_class: str
    track_id: int
    amodal_mask: np.ndarray
    modal_mask: np.ndarray
    amodal_bbox: tuple
    modal_bbox: tuple | None
    keypoints: Keypoints2D | None
    pose: RigidPose
    coeffs: ShapeCoefficients | None
    occlusion_fraction: float
    mean_depth: float
    score: float = 1.0


@dataclass
class ClipArtRecord:
    composite_image: np.ndarray
    objects: list
    depth_map: np.ndarray
    rng_seed: int


def _mask_bbox(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def _feather_paste(canvas, crop, mask, x0, y0, feather_px):
    from scipy import ndimage

    region = canvas[y0 : y0 + mask.shape[0], x0 : x0 + mask.shape[1]]
    if feather_px <= 0:
        region[mask] = crop[mask]
        return
    dist = ndimage.distance_transform_edt(mask)
    alpha = np.clip(dist / feather_px, 0.0, 1.0)[..., None]
    blended = alpha * crop.astype(float) + (1.0 - alpha) * region.astype(float)
    region[mask] = np.round(blended[mask]).astype(canvas.dtype)


def composite(background: np.ndarray, objects, camera: CameraModel,
              basis: ShapeBasis, config: SceneConfig) -> ClipArtRecord:
    """Painter's-algorithm composition of non-intersecting cutouts.

    Objects are painted from the farthest footprint-center depth to the
    closest (ties by input order). Per object the record carries the amodal
    mask (the cutout at its position), the modal mask (amodal minus anything
    painted later), recomputed keypoint visibility, and the occlusion
    fraction; the scene depth map holds the rasterized hull depth of the
    owning object and +inf elsewhere.
    """
    H, W = background.shape[:2]
    for i, a in enumerate(objects):
        for b in objects[i + 1 :]:
            if rects_intersect(a.footprint, b.footprint):
                raise OverlappingFootprints(
                    f"objects {a.track_id} and {b.track_id} overlap on the ground plane"
                )
    for obj in objects:
        x0, y0, w, h = _amodal_bounds(obj)
        if x0 < 0 or y0 < 0 or x0 + w > W or y0 + h > H:
            raise CropOutOfBounds(f"crop at ({x0}, {y0}) size ({w}, {h}) exceeds {W}x{H}")

    order = sorted(range(len(objects)),
                   key=lambda i: (-footprint_depth(camera, objects[i].footprint), i))
    canvas = background.copy()
    owner = np.full((H, W), -1, dtype=int)
    depth_map = np.full((H, W), np.inf)
    patches = {}
    for i in order:
        obj = objects[i]
        x0, y0, w, h = _amodal_bounds(obj)
        _feather_paste(canvas, obj.source_crop, obj.source_mask, x0, y0, config.feather_px)
        sub_owner = owner[y0 : y0 + h, x0 : x0 + w]
        sub_owner[obj.source_mask] = i
        patch = rasterize_hull_depth(camera, obj, basis)
        patches[i] = patch
        sub_depth = depth_map[y0 : y0 + h, x0 : x0 + w]
        sub_depth[obj.source_mask] = np.inf
        filled = np.isfinite(patch.depth)
        sub_depth[filled] = patch.depth[filled]

    annotations = []
    for i, obj in enumerate(objects):
        x0, y0, w, h = _amodal_bounds(obj)
        amodal = np.zeros((H, W), dtype=bool)
        amodal[y0 : y0 + h, x0 : x0 + w] = obj.source_mask
        modal = owner == i
        frac = occlusion_fraction(modal, amodal)
        kp = obj.keypoints2d_source
        new_kp = None
        if kp is not None:
            new_kp = _recode_visibility(camera, basis, obj, kp, owner, patches[i], i, H, W)
        annotations.append(
            ObjectAnnotation(
                object_class=obj.object_class,
                track_id=obj.track_id,
                amodal_mask=amodal,
                modal_mask=modal,
                amodal_bbox=_mask_bbox(amodal),
                modal_bbox=_mask_bbox(modal),
                keypoints=new_kp,
                pose=obj.pose,
                coeffs=obj.coeffs,
                occlusion_fraction=frac,
                mean_depth=patches[i].covered_mean(),
                score=obj.score,
            )
        )
    return ClipArtRecord(canvas, annotations, depth_map, config.seed)


def _recode_visibility(camera, basis, obj, kp, owner, patch, index, H, W):
    """Reassign keypoint occlusion codes after composition."""
    if obj.object_class == "car":
        kp3d = apply_many(obj.pose, instantiate(basis, obj.coeffs))
    elif obj.skeleton3d is not None:
        kp3d = apply_many(obj.pose, obj.skeleton3d)
    else:
        kp3d = None
    codes = np.array(kp.visibility)
    for k in range(len(kp)):
        if codes[k] == Visibility.MISSING:
            continue
        x = int(round(kp.points[k, 0]))
        y = int(round(kp.points[k, 1]))
        x = min(max(x, 0), W - 1)
        y = min(max(y, 0), H - 1)
        own = owner[y, x]
        if own != index and own != -1:
            codes[k] = Visibility.OCCLUDED_BY_OTHERS
            continue
        kp_depth = kp3d[k, 2] if kp3d is not None and k < len(kp3d) else None
        surf = patch.value_at(x, y)
        if kp_depth is not None and np.isfinite(surf) and surf < kp_depth - SELF_OCCLUSION_MARGIN_M:
            codes[k] = Visibility.SELF_OCCLUDED
        else:
            codes[k] = Visibility.VISIBLE
    return Keypoints2D(kp.points, codes, kp.confidence)


def zbuffer_modal_masks(camera: CameraModel, objects, basis: ShapeBasis,
                        image_shape) -> list[np.ndarray]:
    """Modal masks from a full per-pixel depth comparison (painter's-order oracle).

    Each pixel inside any amodal mask belongs to the covering object with the
    smallest rasterized depth (footprint-center depth where the hull raster
    leaves a mask pixel uncovered).
    """
    H, W = image_shape
    best_depth = np.full((H, W), np.inf)
    owner = np.full((H, W), -1, dtype=int)
    for i, obj in enumerate(objects):
        x0, y0, w, h = _amodal_bounds(obj)
        patch = rasterize_hull_depth(camera, obj, basis)
        fallback = footprint_depth(camera, obj.footprint)
        d = np.where(np.isfinite(patch.depth), patch.depth, fallback)
        d = np.where(obj.source_mask, d, np.inf)
        full = np.full((H, W), np.inf)
        full[y0 : y0 + h, x0 : x0 + w] = d
        better = full < best_depth
        best_depth[better] = full[better]
        owner[better] = i
    return [owner == i for i in range(len(objects))]

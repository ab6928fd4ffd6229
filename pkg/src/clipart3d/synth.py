"""Seeded synthetic scenes with exact ground truth for every pipeline stage.

Scenes use a pitched-down camera above a flat ground plane. Vehicles come
from the toy shape basis, persons from the box proxy; masks and depths are
rendered by z-buffering the same hull rasterizer the compositor uses, so
every ground-truth quantity is exact by construction. Appearance is flat
shading: geometric verification does not need realism.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field, replace

import numpy as np

from .compositor import (
    FOOTPRINT_INFLATE_M,
    SELF_OCCLUSION_MARGIN_M,
    OrientedRect,
    footprint_of_points,
    plane_basis,
    rasterize_hull,
    rects_intersect,
)
from .errors import InfeasiblePlacement, PointBehindCamera, RayParallelToPlane
from .geometry import CameraModel, Pixel, RigidPose, apply_many, ground_point, normalize_plane
from .shape_model import ShapeBasis, ShapeCoefficients, instantiate
from .tracks import Detection, Keypoints2D, Visibility

PERSON_SKELETON = np.array(
    [
        [0.0, 0.95, 0.0],   # pelvis (root)
        [0.0, 1.45, 0.0],   # neck
        [0.0, 1.70, 0.0],   # head top
        [-0.20, 1.45, 0.0],  # left shoulder
        [0.20, 1.45, 0.0],   # right shoulder
        [0.0, 0.0, 0.0],    # feet center
    ]
)


@dataclass(frozen=True)
class NoiseSpec:
    keypoint_sigma: float = 0.0
    dropout: float = 0.0
    mask_jitter_px: int = 0

    def __post_init__(self):
        if self.keypoint_sigma < 0 or not 0.0 <= self.dropout <= 1.0 or self.mask_jitter_px < 0:
            raise ValueError("invalid noise spec")


@dataclass(frozen=True)
class SynthSpec:
    image_width: int = 640
    image_height: int = 360
    n_objects_min: int = 1
    n_objects_max: int = 4
    n_frames: int = 1
    person_probability: float = 0.0
    depth_min: float = 5.0
    depth_max: float = 60.0
    camera_height_min: float = 3.0
    camera_height_max: float = 10.0
    pitch_min_deg: float = 10.0
    pitch_max_deg: float = 45.0
    hfov_min_deg: float = 45.0
    hfov_max_deg: float = 70.0
    shape_sigma: float = 0.0
    speed_min: float = 0.4
    speed_max: float = 1.5
    require_unoccluded: bool = False
    max_attempts: int = 1000
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.n_objects_min < 1 or self.n_objects_max < self.n_objects_min:
            raise ValueError("n_objects range must be nonempty")
        if self.depth_min <= 0 or self.depth_max <= self.depth_min:
            raise ValueError("depth range must be nonempty and positive")
        if self.n_frames < 1:
            raise ValueError("need at least one frame")


@dataclass
class GroundTruthObject:
    track_id: int
    object_class: str
    coeffs: ShapeCoefficients | None
    poses: list                      # one RigidPose per frame
    skeleton3d: np.ndarray | None
    color: tuple


@dataclass
class GtRecord:
    """Exact per-frame annotation of one object."""

    track_id: int
    object_class: str
    amodal_mask: np.ndarray
    modal_mask: np.ndarray
    amodal_bbox: tuple | None
    modal_bbox: tuple | None
    keypoints: Keypoints2D | None
    pose: RigidPose
    coeffs: ShapeCoefficients | None
    occlusion_fraction: float
    mean_depth: float


@dataclass
class SyntheticFrame:
    frame_id: int
    image: np.ndarray
    gt: list
    detections: list


@dataclass
class SyntheticScene:
    seed: int
    spec: SynthSpec
    camera: CameraModel
    objects: list
    frames: list


def mask_bbox(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def sample_camera(rng, spec: SynthSpec) -> CameraModel:
    W, H = spec.image_width, spec.image_height
    hfov = np.deg2rad(rng.uniform(spec.hfov_min_deg, spec.hfov_max_deg))
    fx = W / (2.0 * np.tan(hfov / 2.0))
    K = np.array(
        [
            [fx, 0.0, W / 2.0 + rng.uniform(-4, 4)],
            [0.0, fx, H / 2.0 + rng.uniform(-4, 4)],
            [0.0, 0.0, 1.0],
        ]
    )
    height = rng.uniform(spec.camera_height_min, spec.camera_height_max)
    pitch = np.deg2rad(rng.uniform(spec.pitch_min_deg, spec.pitch_max_deg))
    # ground plane of a camera pitched down over flat ground, camera frame
    n, d = normalize_plane(np.array([0.0, -np.cos(pitch), -np.sin(pitch)]), height)
    return CameraModel(K, n, d, W, H)


def _object_frame_points(object_class, coeffs, skeleton3d, basis):
    if object_class == "car":
        return instantiate(basis, coeffs)
    from .compositor import _person_proxy_corners

    return _person_proxy_corners(skeleton3d)


def _upright_pose(camera, position, yaw) -> RigidPose:
    _, e1, e2 = plane_basis(camera)
    up = -camera.plane_normal
    forward = np.cos(yaw) * e1 + np.sin(yaw) * e2
    R = np.column_stack([np.cross(up, forward), up, forward])
    return RigidPose.from_matrix(R, position)


def _hull_region(camera, pts):
    uvw = pts @ camera.K.T
    uv = uvw[:, :2] / uvw[:, 2:3]
    x0 = max(int(np.floor(uv[:, 0].min())) - 1, 0)
    y0 = max(int(np.floor(uv[:, 1].min())) - 1, 0)
    x1 = min(int(np.ceil(uv[:, 0].max())) + 2, camera.image_width)
    y1 = min(int(np.ceil(uv[:, 1].max())) + 2, camera.image_height)
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


def _color_for(track_id: int) -> tuple:
    hue = (track_id * 0.6180339887498949) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 0.95)
    return (int(r * 255), int(g * 255), int(b * 255))


def _background(W, H) -> np.ndarray:
    rows = np.linspace(60, 140, H, dtype=np.float64)[:, None]
    cols = np.linspace(0, 25, W, dtype=np.float64)[None, :]
    gray = np.clip(rows + cols, 0, 255).astype(np.uint8)
    return np.stack([gray, gray, gray], axis=-1)


def generate_scene(seed: int, spec: SynthSpec, camera: CameraModel | None = None,
                   frame_id_offset: int = 0, track_id_offset: int = 0) -> SyntheticScene:
    """Deterministic scene for a seed: placed objects, rendered frames,
    exact annotations, and noise-free detections."""
    rng = np.random.default_rng(seed)
    if camera is None:
        camera = sample_camera(rng, spec)
    basis = _shared_toy_basis()
    W, H = camera.image_width, camera.image_height

    n_target = int(rng.integers(spec.n_objects_min, spec.n_objects_max + 1))
    objects: list[GroundTruthObject] = []
    taken_footprints: list[list[OrientedRect]] = [[] for _ in range(spec.n_frames)]
    taken_boxes: list[list[tuple]] = [[] for _ in range(spec.n_frames)]

    attempts = 0
    while len(objects) < n_target:
        attempts += 1
        if attempts > spec.max_attempts:
            if len(objects) >= spec.n_objects_min:
                break
            raise InfeasiblePlacement(
                f"placed {len(objects)}/{n_target} objects in {spec.max_attempts} attempts"
            )
        is_person = rng.uniform() < spec.person_probability
        u = rng.uniform(0.12 * W, 0.88 * W)
        v = rng.uniform(0.30 * H, 0.92 * H)
        yaw = rng.uniform(0.0, 2.0 * np.pi)
        speed = rng.uniform(spec.speed_min, spec.speed_max)
        if is_person:
            coeffs, skeleton = None, PERSON_SKELETON
        else:
            alpha = rng.normal(size=basis.n_components) * basis.coefficient_scales * spec.shape_sigma
            limit = 3.0 * basis.coefficient_scales
            coeffs, skeleton = ShapeCoefficients(np.clip(alpha, -limit, limit)), None
        try:
            position = ground_point(camera, Pixel(u, v))
        except (RayParallelToPlane, PointBehindCamera):
            continue
        if not (spec.depth_min <= position[2] <= spec.depth_max):
            continue

        pose0 = _upright_pose(camera, position, yaw)
        forward = pose0.rotation[:, 2]
        obj_pts = _object_frame_points("person" if is_person else "car", coeffs, skeleton, basis)
        ok = True
        poses, fprints, boxes = [], [], []
        for f in range(spec.n_frames):
            pos_f = position + f * speed * forward
            pose_f = RigidPose(pose0.quaternion, pos_f)
            pts = apply_many(pose_f, obj_pts)
            if np.any(pts[:, 2] < 1.0):
                ok = False
                break
            region = _hull_region(camera, pts)
            if region is None:
                ok = False
                break
            uvw = pts @ camera.K.T
            uv2 = uvw[:, :2] / uvw[:, 2:3]
            bbox = (uv2[:, 0].min(), uv2[:, 1].min(), uv2[:, 0].max(), uv2[:, 1].max())
            if spec.require_unoccluded:
                m = 5.0
                if bbox[0] < m or bbox[1] < m or bbox[2] > W - m or bbox[3] > H - m:
                    ok = False
                    break
                gap = 4.0
                for other in taken_boxes[f]:
                    if not (bbox[2] + gap < other[0] or other[2] + gap < bbox[0]
                            or bbox[3] + gap < other[1] or other[3] + gap < bbox[1]):
                        ok = False
                        break
                if not ok:
                    break
            fp = footprint_of_points(camera, pts, FOOTPRINT_INFLATE_M)
            if any(rects_intersect(fp, other) for other in taken_footprints[f]):
                ok = False
                break
            poses.append(pose_f)
            fprints.append(fp)
            boxes.append(bbox)
        if not ok:
            continue
        tid = track_id_offset + len(objects)
        objects.append(
            GroundTruthObject(tid, "person" if is_person else "car", coeffs, poses,
                              skeleton, _color_for(tid))
        )
        for f in range(spec.n_frames):
            taken_footprints[f].append(fprints[f])
            taken_boxes[f].append(boxes[f])

    frames = [
        _render_frame(camera, basis, objects, f, frame_id_offset + f)
        for f in range(spec.n_frames)
    ]
    return SyntheticScene(seed, spec, camera, objects, frames)


_TOY_BASIS_CACHE = None


def _shared_toy_basis() -> ShapeBasis:
    global _TOY_BASIS_CACHE
    if _TOY_BASIS_CACHE is None:
        from .shape_model import toy_vehicle_basis

        _TOY_BASIS_CACHE = toy_vehicle_basis()
    return _TOY_BASIS_CACHE


def _render_frame(camera, basis, objects, f, frame_id) -> SyntheticFrame:
    W, H = camera.image_width, camera.image_height
    best = np.full((H, W), np.inf)
    owner = np.full((H, W), -1, dtype=int)
    patches = []
    amodals = []
    kp3d_all = []
    for i, obj in enumerate(objects):
        pts_obj = _object_frame_points(obj.object_class, obj.coeffs, obj.skeleton3d, basis)
        pts = apply_many(obj.poses[f], pts_obj)
        region = _hull_region(camera, pts)
        full = np.full((H, W), np.inf)
        if region is not None:
            x0, y0, w, h = region
            full[y0 : y0 + h, x0 : x0 + w] = rasterize_hull(camera, pts, region)
        patches.append(full)
        amodals.append(np.isfinite(full))
        if obj.object_class == "car":
            kp3d_all.append(apply_many(obj.poses[f], instantiate(basis, obj.coeffs)))
        else:
            kp3d_all.append(None)
        better = full < best
        best[better] = full[better]
        owner[better] = i

    image = _background(W, H)
    gts, detections = [], []
    for i, obj in enumerate(objects):
        amodal = amodals[i]
        modal = owner == i
        image[modal] = obj.color
        n_amodal = int(amodal.sum())
        frac = 1.0 - int(modal.sum()) / n_amodal if n_amodal else 1.0
        keypoints = None
        if kp3d_all[i] is not None:
            keypoints = _true_keypoints(camera, kp3d_all[i], patches[i], owner, i)
        covered = patches[i][np.isfinite(patches[i])]
        mean_depth = float(covered.mean()) if covered.size else np.inf
        gts.append(
            GtRecord(obj.track_id, obj.object_class, amodal, modal, mask_bbox(amodal),
                     mask_bbox(modal), keypoints, obj.poses[f], obj.coeffs, frac, mean_depth)
        )
        if modal.any():
            detections.append(
                Detection(frame_id, mask_bbox(modal), modal, obj.object_class, 1.0, keypoints)
            )
    return SyntheticFrame(frame_id, image, gts, detections)


def _true_keypoints(camera, kp3d, own_depth, owner, index) -> Keypoints2D:
    H, W = owner.shape
    uvw = kp3d @ camera.K.T
    uv = uvw[:, :2] / uvw[:, 2:3]
    codes = np.full(len(kp3d), Visibility.VISIBLE, dtype=int)
    for k, (u, v) in enumerate(uv):
        x = min(max(int(round(u)), 0), W - 1)
        y = min(max(int(round(v)), 0), H - 1)
        if owner[y, x] not in (index, -1):
            codes[k] = Visibility.OCCLUDED_BY_OTHERS
        elif np.isfinite(own_depth[y, x]) and own_depth[y, x] < kp3d[k, 2] - SELF_OCCLUSION_MARGIN_M:
            codes[k] = Visibility.SELF_OCCLUDED
    return Keypoints2D(uv, codes, np.ones(len(kp3d)))


def corrupt(scene: SyntheticScene, noise: NoiseSpec, seed: int):
    """Detection stream with seeded keypoint noise, dropout, and mask jitter.

    With a zero spec the output equals the scene's noise-free detections.
    Ground truth stays untouched on the scene object.
    """
    rng = np.random.default_rng(seed)
    stream = []
    for frame in scene.frames:
        dets = []
        for det in frame.detections:
            kp = det.keypoints
            mask = det.modal_mask
            bbox = det.bbox
            if kp is not None and (noise.keypoint_sigma > 0 or noise.dropout > 0):
                pts = kp.points.copy()
                codes = kp.visibility.copy()
                if noise.keypoint_sigma > 0:
                    pts = pts + rng.normal(0.0, noise.keypoint_sigma, size=pts.shape)
                if noise.dropout > 0:
                    drop = rng.uniform(size=len(kp)) < noise.dropout
                    codes[drop] = Visibility.MISSING
                kp = Keypoints2D(pts, codes, kp.confidence)
            if mask is not None and noise.mask_jitter_px > 0:
                from scipy import ndimage

                grow = bool(rng.integers(0, 2))
                it = int(noise.mask_jitter_px)
                mask = (ndimage.binary_dilation(mask, iterations=it) if grow
                        else ndimage.binary_erosion(mask, iterations=it))
                if not mask.any():
                    mask = det.modal_mask
                bb = mask_bbox(mask)
                bbox = bb if bb is not None else bbox
            dets.append(Detection(det.frame_id, bbox, mask, det.object_class, det.score, kp))
        stream.append((frame.frame_id, dets))
    return stream


@dataclass
class Corpus:
    """Scenes sharing one camera, frame ids spaced so tracks never bridge scenes."""

    seed: int
    spec: SynthSpec
    camera: CameraModel
    scenes: list


def generate_corpus(seed: int, spec: SynthSpec, n_scenes: int) -> Corpus:
    rng = np.random.default_rng(seed)
    camera = sample_camera(rng, spec)
    scenes = []
    stride = spec.n_frames + 100
    for s in range(n_scenes):
        scenes.append(
            generate_scene(seed + 1 + s, spec, camera=camera,
                           frame_id_offset=s * stride, track_id_offset=s * 1000)
        )
    return Corpus(seed, spec, camera, scenes)

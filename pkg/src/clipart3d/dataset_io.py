"""File formats: RLE masks, calibration, detection streams, annotation
documents, COCO export, and lossless image IO.

All structured documents are JSON. Floats rely on Python's shortest
round-trip representation, so write-read-write is byte-identical. Masks are
run-length encoded column-major, counts starting with the background run,
which matches the dominant mask-interchange convention.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import (
    CountOverflow,
    ParseError,
    SizeMismatch,
    ValidationError,
    VersionMismatch,
)
from .geometry import CameraModel, RigidPose, normalize_plane
from .shape_model import ShapeCoefficients
from .tracks import Detection, Keypoints2D, Visibility

ANNOTATION_FORMAT = "clipart3d/annotations"
CALIBRATION_FORMAT = "clipart3d/calibration"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# RLE masks

@dataclass(frozen=True)
class RleMask:
    """Column-major run lengths, first count is background (may be zero)."""

    size: tuple   # (h, w)
    counts: tuple

    def __post_init__(self):
        h, w = self.size
        if h < 0 or w < 0:
            raise SizeMismatch(f"negative mask size {self.size}")
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts):
            raise CountOverflow("negative run length")
        if sum(counts) != h * w:
            raise CountOverflow(f"counts sum {sum(counts)} != {h}*{w}")
        object.__setattr__(self, "size", (int(h), int(w)))
        object.__setattr__(self, "counts", counts)


def rle_encode(bitmap) -> RleMask:
    """Canonical encoding: no zero-length interior runs."""
    m = np.asarray(bitmap, dtype=bool)
    if m.ndim != 2:
        raise SizeMismatch(f"bitmap must be 2-d, got shape {m.shape}")
    h, w = m.shape
    flat = m.ravel(order="F")
    if flat.size == 0:
        return RleMask((h, w), (0,))
    changes = np.flatnonzero(np.diff(flat.view(np.int8))) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return RleMask((h, w), tuple(counts))


def rle_decode(rle: RleMask) -> np.ndarray:
    h, w = rle.size
    counts = np.asarray(rle.counts, dtype=np.int64)
    values = np.arange(len(counts)) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape((w, h)).T.copy()


def rle_to_json(rle: RleMask) -> dict:
    return {"size": [rle.size[0], rle.size[1]], "counts": list(rle.counts)}


def rle_from_json(doc, where="mask") -> RleMask:
    if not isinstance(doc, dict) or "size" not in doc or "counts" not in doc:
        raise ParseError(f"{where}: RLE needs 'size' and 'counts'")
    size = doc["size"]
    counts = doc["counts"]
    if not isinstance(size, list) or len(size) != 2:
        raise ParseError(f"{where}: RLE size must be [h, w]")
    if not isinstance(counts, list):
        raise ParseError(f"{where}: RLE counts must be a list")
    entries = list(size) + counts
    if not all(isinstance(c, int) and not isinstance(c, bool) for c in entries):
        raise ParseError(f"{where}: RLE size and counts must be integers")
    try:
        return RleMask((size[0], size[1]), tuple(counts))
    except (SizeMismatch, CountOverflow) as exc:
        raise ValidationError(f"{where}: {exc}") from exc


# ---------------------------------------------------------------------------
# JSON plumbing

def _dump_json(doc, path) -> None:
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True, allow_nan=False)
        f.write("\n")


def _load_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc


def _require(doc, key, path, kind=None):
    if not isinstance(doc, dict) or key not in doc:
        raise ParseError(f"{path}: missing field '{key}'")
    val = doc[key]
    if kind is not None and not isinstance(val, kind):
        raise ParseError(f"{path}: field '{key}' has wrong type {type(val).__name__}")
    return val


def _check_format(doc, path, expected):
    fmt = _require(doc, "format", path, str)
    if fmt != expected:
        raise VersionMismatch(f"{path}: format '{fmt}', expected '{expected}'")
    version = _require(doc, "version", path, int)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {FORMAT_VERSION}")


def _floats(seq, n, path, name):
    if not isinstance(seq, list) or len(seq) != n:
        raise ParseError(f"{path}: '{name}' must be a list of {n} numbers")
    try:
        vals = [float(v) for v in seq]
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{path}: '{name}' holds a non-number: {exc}") from exc
    if not all(np.isfinite(vals)):
        raise ValidationError(f"{path}: '{name}' holds a non-finite value")
    return vals


# ---------------------------------------------------------------------------
# Calibration

def write_calibration(camera: CameraModel, path) -> None:
    doc = {
        "format": CALIBRATION_FORMAT,
        "version": FORMAT_VERSION,
        "K": [float(v) for v in camera.K.ravel()],
        "plane": [float(v) for v in camera.plane_normal] + [float(camera.plane_offset)],
        "width": camera.image_width,
        "height": camera.image_height,
    }
    _dump_json(doc, path)


def load_calibration(path) -> CameraModel:
    doc = _load_json(path)
    _check_format(doc, path, CALIBRATION_FORMAT)
    K = np.array(_floats(_require(doc, "K", path), 9, path, "K")).reshape(3, 3)
    plane = _floats(_require(doc, "plane", path), 4, path, "plane")
    width = _require(doc, "width", path, int)
    height = _require(doc, "height", path, int)
    if abs(K[0, 1]) > 1e-12:
        raise ValidationError(f"{path}: nonzero skew K[0][1] = {K[0, 1]} not supported")
    try:
        n, d = normalize_plane(plane[:3], plane[3])
        return CameraModel(K, n, d, width, height)
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def camera_to_json(camera: CameraModel) -> dict:
    return {
        "K": [float(v) for v in camera.K.ravel()],
        "plane": [float(v) for v in camera.plane_normal] + [float(camera.plane_offset)],
        "width": camera.image_width,
        "height": camera.image_height,
    }


def camera_from_json(doc, path="<camera>") -> CameraModel:
    K = np.array(_floats(_require(doc, "K", path), 9, path, "K")).reshape(3, 3)
    plane = _floats(_require(doc, "plane", path), 4, path, "plane")
    width = _require(doc, "width", path, int)
    height = _require(doc, "height", path, int)
    try:
        n, d = normalize_plane(plane[:3], plane[3])
        return CameraModel(K, n, d, width, height)
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Detection streams (JSON lines, one record per detection)

def write_detections(stream, path) -> None:
    """stream: iterable of (frame_id, [Detection, ...])."""
    with open(path, "w") as f:
        for frame_id, dets in stream:
            for det in dets:
                rec = {
                    "frame_id": int(frame_id),
                    "class": det.object_class,
                    "score": float(det.score),
                    "bbox": [float(v) for v in det.bbox],
                    "mask": None if det.modal_mask is None
                    else rle_to_json(rle_encode(det.modal_mask)),
                    "keypoints": _keypoints_to_json(det.keypoints),
                }
                f.write(json.dumps(rec, sort_keys=True, allow_nan=False))
                f.write("\n")


def read_detections(path):
    """Returns the stream grouped by frame: [(frame_id, [Detection, ...]), ...]."""
    frames: dict[int, list] = {}
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    for ln, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        where = f"{path}:{ln}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{where}: invalid JSON: {exc}") from exc
        frame_id = _require(rec, "frame_id", where, int)
        cls = _require(rec, "class", where, str)
        score = _require(rec, "score", where, (int, float))
        bbox = _floats(_require(rec, "bbox", where), 4, where, "bbox")
        mask = None
        if rec.get("mask") is not None:
            mask = rle_decode(rle_from_json(rec["mask"], where))
        kp = _keypoints_from_json(rec.get("keypoints"), where)
        try:
            det = Detection(frame_id, tuple(bbox), mask, cls, float(score), kp)
        except ValueError as exc:
            raise ValidationError(f"{where}: {exc}") from exc
        frames.setdefault(frame_id, []).append(det)
    return sorted(frames.items())


def _keypoints_to_json(kp: Keypoints2D | None):
    if kp is None:
        return None
    return {
        "points": [[float(u), float(v), int(c)] for (u, v), c in zip(kp.points, kp.visibility)],
        "confidence": [float(c) for c in kp.confidence],
    }


def _keypoints_from_json(doc, where) -> Keypoints2D | None:
    if doc is None:
        return None
    pts = _require(doc, "points", where, list)
    conf = _require(doc, "confidence", where, list)
    if len(conf) != len(pts):
        raise ParseError(f"{where}: keypoint confidence length mismatch")
    try:
        arr = np.array([[float(p[0]), float(p[1])] for p in pts])
        codes = np.array([int(p[2]) for p in pts])
        return Keypoints2D(arr, codes, np.array([float(c) for c in conf]))
    except (TypeError, ValueError, IndexError) as exc:
        raise ParseError(f"{where}: malformed keypoints: {exc}") from exc


# ---------------------------------------------------------------------------
# Mined tracks

TRACKS_FORMAT = "clipart3d/tracks"


def write_tracks(tracks, unoccluded_flags, path) -> None:
    """tracks: list of ObjectTrack; unoccluded_flags keyed by (frame_id, bbox)."""
    doc = {
        "format": TRACKS_FORMAT,
        "version": FORMAT_VERSION,
        "tracks": [
            {
                "track_id": tr.track_id,
                "class": tr.object_class,
                "frames": [
                    {
                        "frame_id": f.frame_id,
                        "bbox": [float(v) for v in f.bbox],
                        "mask": None if f.modal_mask is None
                        else rle_to_json(rle_encode(f.modal_mask)),
                        "keypoints": _keypoints_to_json(f.keypoints),
                        "unoccluded": bool(unoccluded_flags.get((f.frame_id, f.bbox), False)),
                    }
                    for f in tr.frames
                ],
            }
            for tr in tracks
        ],
    }
    _dump_json(doc, path)


def read_tracks(path):
    """Returns (tracks, flags) with flags keyed by (frame_id, bbox)."""
    from .tracks import ObjectTrack, TrackFrame

    doc = _load_json(path)
    _check_format(doc, path, TRACKS_FORMAT)
    tracks, flags = [], {}
    for i, tr in enumerate(_require(doc, "tracks", path, list)):
        where = f"{path}.tracks[{i}]"
        track_id = _require(tr, "track_id", where, int)
        cls = _require(tr, "class", where, str)
        frames = []
        for j, fr in enumerate(_require(tr, "frames", where, list)):
            fwhere = f"{where}.frames[{j}]"
            frame_id = _require(fr, "frame_id", fwhere, int)
            bbox = tuple(_floats(_require(fr, "bbox", fwhere), 4, fwhere, "bbox"))
            mask = None
            if fr.get("mask") is not None:
                mask = rle_decode(rle_from_json(fr["mask"], fwhere))
            kp = _keypoints_from_json(fr.get("keypoints"), fwhere)
            frames.append(TrackFrame(frame_id, bbox, mask, kp))
            flags[(frame_id, bbox)] = bool(fr.get("unoccluded", False))
        try:
            tracks.append(ObjectTrack(track_id, cls, frames))
        except ValueError as exc:
            raise ValidationError(f"{where}: {exc}") from exc
    return tracks, flags


# ---------------------------------------------------------------------------
# Annotation documents

@dataclass(frozen=True)
class ObjectRecord:
    object_class: str
    track_id: int
    score: float
    amodal_bbox: tuple | None
    modal_bbox: tuple | None
    amodal_mask: RleMask
    modal_mask: RleMask
    keypoints: np.ndarray | None      # (N, 3): u, v, visibility code
    pose: RigidPose | None
    shape_coefficients: np.ndarray | None
    occlusion_fraction: float
    mean_depth: float | None


@dataclass(frozen=True)
class ImageAnnotations:
    image_id: str
    width: int
    height: int
    objects: tuple
    file_name: str | None = None


@dataclass(frozen=True)
class AnnotationFile:
    camera: dict
    images: tuple
    rng_seed: int = 0
    version: int = FORMAT_VERSION


def _bbox_json(bbox):
    return None if bbox is None else [float(v) for v in bbox]


def _object_to_json(obj: ObjectRecord) -> dict:
    return {
        "class": obj.object_class,
        "track_id": int(obj.track_id),
        "score": float(obj.score),
        "amodal_bbox": _bbox_json(obj.amodal_bbox),
        "modal_bbox": _bbox_json(obj.modal_bbox),
        "amodal_mask": rle_to_json(obj.amodal_mask),
        "modal_mask": rle_to_json(obj.modal_mask),
        "keypoints": None if obj.keypoints is None
        else [[float(u), float(v), int(c)] for u, v, c in obj.keypoints],
        "pose": None if obj.pose is None else {
            "quaternion_wxyz": [float(v) for v in obj.pose.quaternion],
            "translation": [float(v) for v in obj.pose.translation],
        },
        "shape_coefficients": None if obj.shape_coefficients is None
        else [float(v) for v in obj.shape_coefficients],
        "occlusion_fraction": float(obj.occlusion_fraction),
        "mean_depth": None if obj.mean_depth is None or not np.isfinite(obj.mean_depth)
        else float(obj.mean_depth),
    }


def write_annotations(ann: AnnotationFile, path) -> None:
    doc = {
        "format": ANNOTATION_FORMAT,
        "version": FORMAT_VERSION,
        "camera": ann.camera,
        "rng_seed": int(ann.rng_seed),
        "images": [
            {
                "image_id": img.image_id,
                "file_name": img.file_name,
                "width": int(img.width),
                "height": int(img.height),
                "objects": [_object_to_json(o) for o in img.objects],
            }
            for img in ann.images
        ],
    }
    _dump_json(doc, path)


def _object_from_json(doc, where, width, height) -> ObjectRecord:
    cls = _require(doc, "class", where, str)
    track_id = _require(doc, "track_id", where, int)
    score = float(_require(doc, "score", where, (int, float)))
    amodal_bbox = doc.get("amodal_bbox")
    modal_bbox = doc.get("modal_bbox")
    if amodal_bbox is not None:
        amodal_bbox = tuple(_floats(amodal_bbox, 4, where, "amodal_bbox"))
    if modal_bbox is not None:
        modal_bbox = tuple(_floats(modal_bbox, 4, where, "modal_bbox"))
    amodal = rle_from_json(_require(doc, "amodal_mask", where), f"{where}.amodal_mask")
    modal = rle_from_json(_require(doc, "modal_mask", where), f"{where}.modal_mask")
    for name, rle in (("amodal_mask", amodal), ("modal_mask", modal)):
        if rle.size != (height, width):
            raise ValidationError(
                f"{where}.{name}: decodes to {rle.size}, image is ({height}, {width})"
            )
    kp = doc.get("keypoints")
    if kp is not None:
        if not isinstance(kp, list):
            raise ParseError(f"{where}: keypoints must be a list")
        try:
            kp = np.array([[float(u), float(v), int(c)] for u, v, c in kp])
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{where}: malformed keypoints: {exc}") from exc
        if kp.size and not set(np.unique(kp[:, 2]).astype(int)) <= {0, 1, 2, 3}:
            raise ValidationError(f"{where}: keypoint codes must be in 0..3")
    pose_doc = doc.get("pose")
    pose = None
    if pose_doc is not None:
        q = _floats(_require(pose_doc, "quaternion_wxyz", where), 4, where, "quaternion_wxyz")
        t = _floats(_require(pose_doc, "translation", where), 3, where, "translation")
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValidationError(f"{where}: quaternion norm {np.linalg.norm(q):.8f} != 1")
        pose = RigidPose(np.array(q), np.array(t))
    coeffs = doc.get("shape_coefficients")
    if coeffs is not None:
        if not isinstance(coeffs, list):
            raise ParseError(f"{where}: shape_coefficients must be a list")
        coeffs = np.array(_floats(coeffs, len(coeffs), where, "shape_coefficients"))
    frac = _require(doc, "occlusion_fraction", where, (int, float))
    if not 0.0 <= frac <= 1.0:
        raise ValidationError(f"{where}: occlusion_fraction {frac} outside [0, 1]")
    n_amodal = sum(amodal.counts[1::2])
    n_modal = sum(modal.counts[1::2])
    if n_amodal == 0:
        raise ValidationError(f"{where}: amodal mask is empty")
    if abs((1.0 - n_modal / n_amodal) - frac) > 1e-9:
        raise ValidationError(
            f"{where}: occlusion_fraction {frac} disagrees with masks "
            f"({1.0 - n_modal / n_amodal})"
        )
    mean_depth = doc.get("mean_depth")
    if mean_depth is not None:
        if not isinstance(mean_depth, (int, float)) or isinstance(mean_depth, bool):
            raise ParseError(f"{where}: mean_depth must be a number")
        mean_depth = float(mean_depth)
    return ObjectRecord(cls, track_id, score, amodal_bbox, modal_bbox, amodal, modal,
                        kp, pose, coeffs, float(frac), mean_depth)


def _annotation_from_doc(doc, path) -> AnnotationFile:
    _check_format(doc, path, ANNOTATION_FORMAT)
    camera = _require(doc, "camera", path, dict)
    camera_from_json(camera, f"{path}.camera")  # validates
    rng_seed = _require(doc, "rng_seed", path, int)
    images = []
    for i, img in enumerate(_require(doc, "images", path, list)):
        where = f"{path}.images[{i}]"
        image_id = _require(img, "image_id", where)
        width = _require(img, "width", where, int)
        height = _require(img, "height", where, int)
        if width <= 0 or height <= 0:
            raise ValidationError(f"{where}: non-positive image size")
        objects = []
        for j, o in enumerate(_require(img, "objects", where, list)):
            objects.append(_object_from_json(o, f"{where}.objects[{j}]", width, height))
        images.append(
            ImageAnnotations(str(image_id), width, height, tuple(objects),
                             img.get("file_name"))
        )
    return AnnotationFile(camera, tuple(images), rng_seed)


def load_annotations(path) -> AnnotationFile:
    """Load one annotation document, or a directory of them via index.json."""
    if os.path.isdir(path):
        index_path = os.path.join(path, "index.json")
        index = _load_json(index_path)
        entries = _require(index, "scenes", index_path, list)
        merged_images: list = []
        camera = None
        seed = 0
        for rel in entries:
            sub = load_annotations(os.path.join(path, rel))
            if camera is None:
                camera, seed = sub.camera, sub.rng_seed
            merged_images.extend(sub.images)
        if camera is None:
            raise ParseError(f"{index_path}: empty scene index")
        return AnnotationFile(camera, tuple(merged_images), seed)
    return _annotation_from_doc(_load_json(path), str(path))


def write_annotation_dir(files, out_dir) -> None:
    """files: list of (relative_name, AnnotationFile). Writes the index too."""
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for name, ann in files:
        write_annotations(ann, os.path.join(out_dir, name))
        names.append(name)
    _dump_json({"scenes": names}, os.path.join(out_dir, "index.json"))


# ---------------------------------------------------------------------------
# COCO export

_COCO_CATEGORIES = ({"id": 1, "name": "car"}, {"id": 2, "name": "person"})
_COCO_VIS = {
    int(Visibility.MISSING): 0,
    int(Visibility.OCCLUDED_BY_OTHERS): 1,
    int(Visibility.SELF_OCCLUDED): 1,
    int(Visibility.VISIBLE): 2,
}


def export_coco(ann: AnnotationFile, mode: str = "amodal") -> dict:
    """COCO-style document; mode picks amodal or modal boxes and masks."""
    if mode not in ("amodal", "modal"):
        raise ValueError(f"unknown mode {mode!r}")
    images, annotations = [], []
    ann_id = 1
    for img_idx, img in enumerate(ann.images, start=1):
        images.append(
            {
                "id": img_idx,
                "file_name": img.file_name or f"{img.image_id}.png",
                "width": img.width,
                "height": img.height,
            }
        )
        for obj in img.objects:
            rle = obj.amodal_mask if mode == "amodal" else obj.modal_mask
            bbox = obj.amodal_bbox if mode == "amodal" else obj.modal_bbox
            if bbox is None:
                bbox = (0.0, 0.0, 0.0, 0.0)
            x0, y0, x1, y1 = bbox
            entry = {
                "id": ann_id,
                "image_id": img_idx,
                "category_id": 1 if obj.object_class == "car" else 2,
                "bbox": [x0, y0, x1 - x0, y1 - y0],
                "area": int(sum(rle.counts[1::2])),
                "segmentation": rle_to_json(rle),
                "iscrowd": 0,
                "score": obj.score,
            }
            if obj.keypoints is not None:
                flat = []
                n_labeled = 0
                for u, v, c in obj.keypoints:
                    vis = _COCO_VIS[int(c)]
                    if vis > 0:
                        n_labeled += 1
                    flat.extend([float(u), float(v), vis])
                entry["keypoints"] = flat
                entry["num_keypoints"] = n_labeled
            annotations.append(entry)
            ann_id += 1
    return {
        "images": images,
        "annotations": annotations,
        "categories": [dict(c) for c in _COCO_CATEGORIES],
    }


# ---------------------------------------------------------------------------
# Images

def save_png(image: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(image)).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.array(im.convert("RGB"))
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc

"""Shared detection, keypoint, and track types used by mining, fitting, and IO."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class Visibility(IntEnum):
    """Per-keypoint occlusion code. Integer values are the file-format codes."""

    OCCLUDED_BY_OTHERS = 0
    SELF_OCCLUDED = 1
    VISIBLE = 2
    MISSING = 3


@dataclass(frozen=True)
class Keypoints2D:
    """N keypoints: pixel positions, occlusion codes, and confidences in [0, 1]."""

    points: np.ndarray
    visibility: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        vis = np.asarray(self.visibility, dtype=int)
        conf = np.asarray(self.confidence, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"points must be N x 2, got {pts.shape}")
        n = pts.shape[0]
        if vis.shape != (n,) or conf.shape != (n,):
            raise ValueError("visibility and confidence must have one entry per keypoint")
        if not np.all(np.isfinite(conf)):
            raise ValueError("confidence must be finite")
        if not all(v in (0, 1, 2, 3) for v in vis):
            raise ValueError("visibility codes must be in {0, 1, 2, 3}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "visibility", vis)
        object.__setattr__(self, "confidence", conf)

    def __len__(self):
        return self.points.shape[0]

    @staticmethod
    def all_visible(points) -> "Keypoints2D":
        pts = np.asarray(points, dtype=float)
        n = pts.shape[0]
        return Keypoints2D(pts, np.full(n, Visibility.VISIBLE, dtype=int), np.ones(n))


@dataclass(frozen=True)
class Detection:
    """One instance-segmentation detection in one frame.

    bbox is (x0, y0, x1, y1) in pixels. modal_mask is a full-image boolean
    bitmap unless mask_is_cropped is set, in which case it covers the integer
    bbox region only.
    """

    frame_id: int
    bbox: tuple
    modal_mask: np.ndarray | None
    object_class: str
    score: float
    keypoints: Keypoints2D | None = None
    mask_is_cropped: bool = False

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x0 <= x1 and y0 <= y1):
            raise ValueError(f"degenerate bbox {self.bbox}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        object.__setattr__(self, "bbox", (float(x0), float(y0), float(x1), float(y1)))


@dataclass(frozen=True)
class TrackFrame:
    frame_id: int
    bbox: tuple
    modal_mask: np.ndarray | None
    keypoints: Keypoints2D | None
    image_crop: np.ndarray | None = None


@dataclass
class ObjectTrack:
    """Detections of one physical object across frames, strictly increasing frame ids."""

    track_id: int
    object_class: str
    frames: list = field(default_factory=list)

    def __post_init__(self):
        ids = [f.frame_id for f in self.frames]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("frame_ids must be strictly increasing")

    def __len__(self):
        return len(self.frames)


def bbox_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0

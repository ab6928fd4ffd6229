"""Mining unoccluded objects from detection streams.

An object counts as unoccluded when the bottom strip of its bounding box
barely overlaps every other detection and the box does not touch the image
border. A greedy IoU tracker groups detections into tracks; a pluggable
scoring interface lets a learned occlusion classifier replace the heuristic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import LengthMismatch
from .tracks import Detection, ObjectTrack, TrackFrame, bbox_iou

BOTTOM_STRIP_FRACTION = 0.25
BORDER_MARGIN_PX = 2.0


@dataclass(frozen=True)
class OcclusionLabel:
    status: str  # "unoccluded" | "occluded"
    source: str  # "heuristic" | "classifier" | "groundtruth"

    def __post_init__(self):
        if self.status not in ("unoccluded", "occluded"):
            raise ValueError(f"bad status {self.status!r}")
        if self.source not in ("heuristic", "classifier", "groundtruth"):
            raise ValueError(f"bad source {self.source!r}")

    @property
    def unoccluded(self) -> bool:
        return self.status == "unoccluded"


def _bottom_strip(bbox):
    x0, y0, x1, y1 = bbox
    return (x0, y1 - BOTTOM_STRIP_FRACTION * (y1 - y0), x1, y1)


def _strip_overlap(strip, other, mode):
    if mode == "iou":
        return bbox_iou(strip, other)
    # intersection area normalized by the strip's own area
    sx0, sy0, sx1, sy1 = strip
    iw = min(sx1, other[2]) - max(sx0, other[0])
    ih = min(sy1, other[3]) - max(sy0, other[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    strip_area = (sx1 - sx0) * (sy1 - sy0)
    return iw * ih / strip_area if strip_area > 0 else 0.0


def is_truncated(bbox, image_bounds, margin: float = BORDER_MARGIN_PX) -> bool:
    width, height = image_bounds
    x0, y0, x1, y1 = bbox
    return x0 < margin or y0 < margin or x1 > width - margin or y1 > height - margin


def heuristic_unoccluded(
    detections, image_bounds, delta: float, strip_mode: str = "strip_area"
) -> list[OcclusionLabel]:
    """Label each detection in one frame as unoccluded or occluded.

    delta is the overlap threshold in [0, 1]. The default strip_mode
    normalizes the bottom strip's intersection with other boxes by the strip
    area (identical boxes score 1); "iou" uses IoU of the strip against
    other full boxes instead.
    """
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta {delta} outside [0, 1]")
    if strip_mode not in ("iou", "strip_area"):
        raise ValueError(f"unknown strip_mode {strip_mode!r}")
    labels = []
    for i, det in enumerate(detections):
        if is_truncated(det.bbox, image_bounds):
            labels.append(OcclusionLabel("occluded", "heuristic"))
            continue
        strip = _bottom_strip(det.bbox)
        clear = all(
            _strip_overlap(strip, other.bbox, strip_mode) < delta
            for j, other in enumerate(detections)
            if j != i
        )
        labels.append(OcclusionLabel("unoccluded" if clear else "occluded", "heuristic"))
    return labels


class OcclusionScorer:
    """Scoring interface: higher score means more likely unoccluded.

    Scores are thresholded at 0.5. The default heuristic scorer and the
    ground-truth oracle both implement this, so a learned classifier can be
    dropped in without touching the pipeline.
    """

    threshold = 0.5

    def score_frame(self, detections, image_bounds) -> np.ndarray:
        raise NotImplementedError

    def label_frame(self, detections, image_bounds, source) -> list[OcclusionLabel]:
        scores = self.score_frame(detections, image_bounds)
        return [
            OcclusionLabel("unoccluded" if s > self.threshold else "occluded", source)
            for s in scores
        ]


class HeuristicScorer(OcclusionScorer):
    def __init__(self, delta: float, strip_mode: str = "strip_area"):
        self.delta = delta
        self.strip_mode = strip_mode

    def score_frame(self, detections, image_bounds):
        labels = heuristic_unoccluded(detections, image_bounds, self.delta, self.strip_mode)
        return np.array([1.0 if lb.unoccluded else 0.0 for lb in labels])


class GroundTruthScorer(OcclusionScorer):
    """Oracle backed by known occlusion fractions (synthetic corpora only)."""

    def __init__(self, occlusion_fraction_by_key, max_fraction: float = 0.0):
        self.by_key = occlusion_fraction_by_key
        self.max_fraction = max_fraction

    def score_frame(self, detections, image_bounds):
        out = np.zeros(len(detections))
        for i, det in enumerate(detections):
            frac = self.by_key[(det.frame_id, i)]
            unocc = frac <= self.max_fraction and not is_truncated(det.bbox, image_bounds)
            out[i] = 1.0 if unocc else 0.0
        return out


@dataclass
class _LiveTrack:
    track_id: int
    object_class: str
    last_bbox: tuple
    age: int = 0
    frames: list = field(default_factory=list)


def track(frames, iou_gate: float = 0.3, max_age: int = 3) -> list[ObjectTrack]:
    """Greedy IoU association over a temporally ordered detection stream.

    Pairs above iou_gate are matched in descending IoU order, ties broken by
    lower track id then detection order; unmatched tracks persist max_age
    frames before closing; every unmatched detection starts a new track.
    Only same-class pairs associate.
    """
    live: list[_LiveTrack] = []
    done: list[ObjectTrack] = []
    next_id = 0

    def close(t: _LiveTrack):
        done.append(ObjectTrack(t.track_id, t.object_class, t.frames))

    for frame_id, dets in frames:
        candidates = []
        for ti, t in enumerate(live):
            for di, det in enumerate(dets):
                if det.object_class != t.object_class:
                    continue
                iou = bbox_iou(t.last_bbox, det.bbox)
                if iou > iou_gate:
                    candidates.append((-iou, t.track_id, di, ti))
        candidates.sort()
        used_tracks, used_dets = set(), set()
        assignment = {}
        for _, _, di, ti in candidates:
            if ti in used_tracks or di in used_dets:
                continue
            used_tracks.add(ti)
            used_dets.add(di)
            assignment[di] = ti

        for di, det in enumerate(dets):
            entry = TrackFrame(frame_id, det.bbox, det.modal_mask, det.keypoints)
            if di in assignment:
                t = live[assignment[di]]
                t.frames.append(entry)
                t.last_bbox = det.bbox
                t.age = 0
            else:
                t = _LiveTrack(next_id, det.object_class, det.bbox, 0, [entry])
                next_id += 1
                live.append(t)

        survivors = []
        for t in live:
            if t.frames[-1].frame_id != frame_id:
                t.age += 1
            if t.age > max_age:
                close(t)
            else:
                survivors.append(t)
        live = survivors

    for t in live:
        close(t)
    done.sort(key=lambda tr: tr.track_id)
    return done


@dataclass(frozen=True)
class ClassifierScore:
    recall: float
    precision: float
    recall_defined: bool
    precision_defined: bool


def evaluate_classifier(labels, truth) -> ClassifierScore:
    """Recall/precision for the unoccluded class against ground-truth labels.

    Undefined ratios (no true positives possible, or no predicted positives)
    are reported as 0 with the corresponding defined-flag cleared.
    """
    if len(labels) != len(truth):
        raise LengthMismatch(f"{len(labels)} labels vs {len(truth)} ground-truth entries")
    tp = sum(1 for lb, gt in zip(labels, truth) if lb.unoccluded and gt.unoccluded)
    fp = sum(1 for lb, gt in zip(labels, truth) if lb.unoccluded and not gt.unoccluded)
    fn = sum(1 for lb, gt in zip(labels, truth) if not lb.unoccluded and gt.unoccluded)
    rec_def = (tp + fn) > 0
    prec_def = (tp + fp) > 0
    return ClassifierScore(
        recall=tp / (tp + fn) if rec_def else 0.0,
        precision=tp / (tp + fp) if prec_def else 0.0,
        recall_defined=rec_def,
        precision_defined=prec_def,
    )

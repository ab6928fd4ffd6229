"""Evaluation metrics: detection AP, keypoint PCK, MPJPE, pose errors, ADD,
and occlusion-binned breakdowns.

AP follows the 101-point interpolated protocol (greedy score-descending
matching, one match per ground-truth object). Rotation accuracy uses the
geodesic angle; translation error is Euclidean. MPJPE aligns clouds at the
root joint only (no Procrustes).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmptyGroundTruth, NoAnnotatedKeypoints
from .geometry import RigidPose, geodesic_rotation_error
from .tracks import bbox_iou

COCO_SWEEP = tuple(np.round(np.arange(0.5, 0.96, 0.05), 2))


@dataclass(frozen=True)
class EvalObject:
    """One prediction or ground-truth object, matched across sets by image_id."""

    image_id: object
    object_class: str
    bbox: tuple
    mask: np.ndarray | None = None
    score: float = 1.0
    occlusion_fraction: float = 0.0
    keypoints: np.ndarray | None = None       # (N, 2) pixels
    keypoint_labeled: np.ndarray | None = None
    pose: RigidPose | None = None
    keypoints3d: np.ndarray | None = None     # (J, 3) meters


@dataclass(frozen=True)
class EvalPair:
    predictions: tuple
    ground_truth: tuple

    @staticmethod
    def of(predictions, ground_truth) -> "EvalPair":
        return EvalPair(tuple(predictions), tuple(ground_truth))


def _mask_iou(a, b) -> float:
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    return inter / union if union else 0.0


def _pair_iou(pred: EvalObject, gt: EvalObject, mode: str) -> float:
    if mode == "mask":
        return _mask_iou(pred.mask, gt.mask)
    return bbox_iou(pred.bbox, gt.bbox)


def match_greedy(predictions, ground_truth, iou_threshold: float, mode: str = "box"):
    """Score-descending greedy matching, one match per ground-truth object.

    Returns (matches, order) where matches[i] is the ground-truth index for
    the i-th prediction in score order (or None) and order is that score
    ordering of prediction indices. Only same-class, same-image pairs match.
    """
    order = sorted(range(len(predictions)), key=lambda i: (-predictions[i].score, i))
    taken = set()
    matches = []
    for pi in order:
        pred = predictions[pi]
        best, best_iou = None, 0.0
        for gi, gt in enumerate(ground_truth):
            if gi in taken or gt.image_id != pred.image_id or gt.object_class != pred.object_class:
                continue
            iou = _pair_iou(pred, gt, mode)
            if iou < iou_threshold:
                continue
            if best is None or iou > best_iou:
                best, best_iou = gi, iou
        if best is not None:
            taken.add(best)
        matches.append(best)
    return matches, order


def _ap_single_class(predictions, ground_truth, iou_threshold, mode) -> float:
    n_gt = len(ground_truth)
    if n_gt == 0:
        return float("nan")
    if not predictions:
        return 0.0
    matches, _ = match_greedy(predictions, ground_truth, iou_threshold, mode)
    tp = np.cumsum([m is not None for m in matches]).astype(float)
    fp = np.cumsum([m is None for m in matches]).astype(float)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    # 101-point interpolation: max precision at recall >= r
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101.0


def average_precision(pairs: EvalPair, iou_threshold=0.5, mode: str = "box") -> float:
    """AP over the pair set; iou_threshold may be a float or "coco" for the
    0.50:0.05:0.95 sweep. Per-class APs are averaged over the classes that
    appear in the ground truth."""
    if mode not in ("box", "mask"):
        raise ValueError(f"unknown mode {mode!r}")
    if not pairs.ground_truth:
        raise EmptyGroundTruth("no ground-truth objects")
    thresholds = COCO_SWEEP if iou_threshold == "coco" else (float(iou_threshold),)
    classes = sorted({g.object_class for g in pairs.ground_truth})
    vals = []
    for thr in thresholds:
        per_class = []
        for cls in classes:
            preds = [p for p in pairs.predictions if p.object_class == cls]
            gts = [g for g in pairs.ground_truth if g.object_class == cls]
            per_class.append(_ap_single_class(preds, gts, thr, mode))
        vals.append(float(np.mean(per_class)))
    return float(np.mean(vals))


def pck(pred_kp, gt_kp, gt_bbox, alpha: float, labeled=None) -> float:
    """Fraction of annotated keypoints within alpha * max(bbox side) of truth."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    pred_kp = np.asarray(pred_kp, dtype=float)
    gt_kp = np.asarray(gt_kp, dtype=float)
    if pred_kp.shape != gt_kp.shape:
        raise DimensionMismatch(f"{pred_kp.shape} vs {gt_kp.shape}")
    if labeled is None:
        labeled = np.ones(len(gt_kp), dtype=bool)
    labeled = np.asarray(labeled, dtype=bool)
    if not labeled.any():
        raise NoAnnotatedKeypoints("no annotated keypoints to score")
    x0, y0, x1, y1 = gt_bbox
    radius = alpha * max(x1 - x0, y1 - y0)
    dist = np.linalg.norm(pred_kp - gt_kp, axis=1)
    return float(np.mean(dist[labeled] <= radius))


def mpjpe(pred3d, gt3d, root_index: int = 0) -> float:
    """Mean per-joint position error after root-joint alignment, meters."""
    pred3d = np.asarray(pred3d, dtype=float)
    gt3d = np.asarray(gt3d, dtype=float)
    if pred3d.shape != gt3d.shape or pred3d.ndim != 2 or pred3d.shape[1] != 3:
        raise DimensionMismatch(f"{pred3d.shape} vs {gt3d.shape}")
    if not 0 <= root_index < len(pred3d):
        raise DimensionMismatch(f"root index {root_index} out of range")
    p = pred3d - pred3d[root_index]
    g = gt3d - gt3d[root_index]
    return float(np.mean(np.linalg.norm(p - g, axis=1)))


@dataclass(frozen=True)
class PoseErrors:
    geodesic_rot_error: float  # radians
    translation_error: float   # meters


def pose_accuracy(pred: RigidPose, gt: RigidPose) -> PoseErrors:
    return PoseErrors(
        geodesic_rotation_error(gt.rotation, pred.rotation),
        float(np.linalg.norm(pred.translation - gt.translation)),
    )


def accuracy_at(errors, threshold: float) -> float:
    """Fraction of error samples strictly below the threshold."""
    errors = np.asarray(list(errors), dtype=float)
    if errors.size == 0:
        return 0.0
    return float(np.mean(errors < threshold))


def median_error(errors) -> float:
    errors = np.asarray(list(errors), dtype=float)
    return float(np.median(errors)) if errors.size else float("nan")


def add_metric(pred: RigidPose, gt: RigidPose, model_points) -> float:
    """Mean distance between model points under the two poses, meters."""
    X = np.atleast_2d(np.asarray(model_points, dtype=float))
    a = X @ pred.rotation.T + pred.translation
    b = X @ gt.rotation.T + gt.translation
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


@dataclass(frozen=True)
class OcclusionBins:
    edges: tuple = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)

    def __post_init__(self):
        e = tuple(float(x) for x in self.edges)
        if len(e) < 2 or any(b <= a for a, b in zip(e, e[1:])):
            raise ValueError("bin edges must be strictly increasing")
        if abs(e[0]) > 1e-12 or abs(e[-1] - 1.0) > 1e-12:
            raise ValueError("bin edges must cover [0, 1]")
        object.__setattr__(self, "edges", e)

    def index_of(self, fraction: float) -> int:
        for i in range(len(self.edges) - 1):
            if self.edges[i] <= fraction < self.edges[i + 1]:
                return i
        return len(self.edges) - 2  # fraction == 1.0 lands in the last bin


@dataclass(frozen=True)
class BinnedRow:
    bin_low: float
    bin_high: float
    value: float | None  # None for empty bins
    n: int


def detection_recall(gt_objects, matched_preds) -> float:
    return float(np.mean([m is not None for m in matched_preds]))


def rotation_accuracy_selector(threshold: float):
    def selector(gt_objects, matched_preds):
        oks = []
        for gt, pred in zip(gt_objects, matched_preds):
            if pred is None or pred.pose is None or gt.pose is None:
                oks.append(False)
            else:
                oks.append(pose_accuracy(pred.pose, gt.pose).geodesic_rot_error < threshold)
        return float(np.mean(oks))

    return selector


def mean_mpjpe_selector(root_index: int = 0):
    def selector(gt_objects, matched_preds):
        vals = [
            mpjpe(pred.keypoints3d, gt.keypoints3d, root_index)
            for gt, pred in zip(gt_objects, matched_preds)
            if pred is not None and pred.keypoints3d is not None and gt.keypoints3d is not None
        ]
        return float(np.mean(vals)) if vals else float("nan")

    return selector


def binned_curves(pairs: EvalPair, bins: OcclusionBins, metric,
                  iou_threshold: float = 0.5, mode: str = "box") -> list[BinnedRow]:
    """Metric per occlusion bin of the ground truth; matching happens once,
    before binning. metric is selector(gt_objects, matched_predictions)."""
    matches, order = match_greedy(pairs.predictions, pairs.ground_truth, iou_threshold, mode)
    matched_pred_for_gt = {}
    for rank, pi in enumerate(order):
        gi = matches[rank]
        if gi is not None:
            matched_pred_for_gt[gi] = pairs.predictions[pi]
    rows = []
    for b in range(len(bins.edges) - 1):
        gt_in_bin, preds_in_bin = [], []
        for gi, gt in enumerate(pairs.ground_truth):
            if bins.index_of(gt.occlusion_fraction) == b:
                gt_in_bin.append(gt)
                preds_in_bin.append(matched_pred_for_gt.get(gi))
        if not gt_in_bin:
            rows.append(BinnedRow(bins.edges[b], bins.edges[b + 1], None, 0))
        else:
            rows.append(
                BinnedRow(bins.edges[b], bins.edges[b + 1],
                          float(metric(gt_in_bin, preds_in_bin)), len(gt_in_bin))
            )
    return rows

"""Batch pipeline stages: synth, mine, fit, composite, export, eval.

Each stage is a pure function of (inputs, config, seed) to files under the
output directory, returning a machine-readable summary dict. Stages raise
StageError around the failing module error.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import dataset_io as dio
from .compositor import (
    SceneConfig,
    composite,
    make_reconstructed_person,
    make_reconstructed_vehicle,
    sample_nonintersecting,
)
from .config import PipelineConfig
from .errors import ClipArtError, InputMissing, StageError
from .geometry import apply_many
from .metrics import (
    EvalObject,
    EvalPair,
    OcclusionBins,
    accuracy_at,
    add_metric,
    average_precision,
    binned_curves,
    detection_recall,
    match_greedy,
    median_error,
    mpjpe,
    pck,
    pose_accuracy,
    rotation_accuracy_selector,
)
from .mining import heuristic_unoccluded, track
from .pose_fit import FitResult, fit_track, place_on_ground
from .shape_model import ShapeCoefficients, instantiate, load_basis, save_basis, toy_vehicle_basis
from .synth import NoiseSpec, corrupt, generate_corpus, mask_bbox
from .tracks import Keypoints2D, ObjectTrack, Visibility

log = logging.getLogger("clipart3d")


def _require_input(path, what):
    if path is None:
        raise InputMissing(f"config field for {what} is not set")
    if not os.path.exists(path):
        raise InputMissing(f"{what} not found: {path}")
    return path


def _stage(name):
    def deco(fn):
        def wrapper(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except ClipArtError as exc:
                raise StageError(name, exc) from exc

        wrapper.__name__ = fn.__name__
        return wrapper

    return deco


def _map_parallel(fn, items, threads):
    if threads == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    workers = threads if threads > 0 else (os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# synth

def _gt_to_object_record(gt) -> dio.ObjectRecord:
    kp = None
    if gt.keypoints is not None:
        kp = np.column_stack([gt.keypoints.points, gt.keypoints.visibility])
    return dio.ObjectRecord(
        object_class=gt.object_class,
        track_id=gt.track_id,
        score=1.0,
        amodal_bbox=gt.amodal_bbox,
        modal_bbox=gt.modal_bbox,
        amodal_mask=dio.rle_encode(gt.amodal_mask),
        modal_mask=dio.rle_encode(gt.modal_mask),
        keypoints=kp,
        pose=gt.pose,
        shape_coefficients=None if gt.coeffs is None else gt.coeffs.alpha,
        occlusion_fraction=gt.occlusion_fraction,
        mean_depth=gt.mean_depth,
    )


@_stage("synth")
def run_synth(cfg: PipelineConfig, out_dir) -> dict:
    """Emit a synthetic corpus consumable by every other subcommand."""
    os.makedirs(out_dir, exist_ok=True)
    corpus = generate_corpus(cfg.seed, cfg.synth, cfg.n_scenes)
    camera = corpus.camera
    dio.write_calibration(camera, os.path.join(out_dir, "calibration.json"))
    basis = toy_vehicle_basis()
    save_basis(basis, os.path.join(out_dir, "basis.json"))
    from .synth import _background

    dio.save_png(_background(camera.image_width, camera.image_height),
                 os.path.join(out_dir, "background.png"))

    frames_dir = os.path.join(out_dir, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    stream = []
    gt_files = []
    n_objects = 0
    for scene in corpus.scenes:
        noisy = corrupt(scene, cfg.synth.noise, seed=scene.seed + 977)
        stream.extend(noisy)
        for frame in scene.frames:
            name = f"frame_{frame.frame_id:06d}"
            dio.save_png(frame.image, os.path.join(frames_dir, name + ".png"))
            records = tuple(_gt_to_object_record(g) for g in frame.gt if g.amodal_mask.any())
            n_objects += len(records)
            img = dio.ImageAnnotations(name, camera.image_width, camera.image_height,
                                       records, file_name=f"frames/{name}.png")
            gt_files.append(
                (name + ".json",
                 dio.AnnotationFile(dio.camera_to_json(camera), (img,), scene.seed))
            )
    dio.write_detections(stream, os.path.join(out_dir, "detections.jsonl"))
    dio.write_annotation_dir(gt_files, os.path.join(out_dir, "groundtruth"))
    return {
        "scenes": len(corpus.scenes),
        "frames": sum(len(s.frames) for s in corpus.scenes),
        "objects": n_objects,
        "output": str(out_dir),
    }


# ---------------------------------------------------------------------------
# mine

@_stage("mine")
def run_mine(cfg: PipelineConfig, out_dir) -> dict:
    """Label unoccluded detections and group them into tracks."""
    camera = dio.load_calibration(_require_input(cfg.calibration, "calibration"))
    stream = dio.read_detections(_require_input(cfg.detections, "detections"))
    bounds = (camera.image_width, camera.image_height)
    flags = {}
    n_unoccluded = 0
    for frame_id, dets in stream:
        labels = heuristic_unoccluded(dets, bounds, cfg.mining.delta, cfg.mining.strip_mode)
        for det, lb in zip(dets, labels):
            flags[(frame_id, det.bbox)] = lb.unoccluded
            n_unoccluded += int(lb.unoccluded)
    tracks = track(stream, cfg.mining.iou_gate, cfg.mining.max_age)
    os.makedirs(out_dir, exist_ok=True)
    dio.write_tracks(tracks, flags, os.path.join(out_dir, "tracks.json"))
    return {
        "frames": len(stream),
        "detections": sum(len(d) for _, d in stream),
        "unoccluded": n_unoccluded,
        "tracks": len(tracks),
        "output": str(out_dir),
    }


# ---------------------------------------------------------------------------
# fit

def _project_keypoints(camera, basis, result: FitResult, codes, confidence) -> Keypoints2D:
    X = apply_many(result.pose, instantiate(basis, result.coeffs))
    uvw = X @ camera.K.T
    uv = uvw[:, :2] / uvw[:, 2:3]
    return Keypoints2D(uv, codes, confidence)


def _fit_record(camera, basis, frame, result: FitResult, object_class, track_id,
                coeffs) -> dio.ObjectRecord:
    mask = frame.modal_mask
    rle = dio.rle_encode(mask)
    bbox = mask_bbox(mask) or frame.bbox
    kp = None
    if object_class == "car":
        proj = _project_keypoints(camera, basis, result, frame.keypoints.visibility,
                                  frame.keypoints.confidence)
        kp = np.column_stack([proj.points, proj.visibility])
    return dio.ObjectRecord(
        object_class=object_class,
        track_id=track_id,
        score=1.0,
        amodal_bbox=bbox,
        modal_bbox=bbox,
        amodal_mask=rle,
        modal_mask=rle,
        keypoints=kp,
        pose=result.pose,
        shape_coefficients=None if coeffs is None else coeffs.alpha,
        occlusion_fraction=0.0,
        mean_depth=float(result.pose.translation[2]),
    )


@_stage("fit")
def run_fit(cfg: PipelineConfig, tracks_path, out_dir) -> dict:
    """Reconstruct unoccluded tracks: vehicles by track optimization,
    persons by ground-plane placement."""
    camera = dio.load_calibration(_require_input(cfg.calibration, "calibration"))
    basis = load_basis(_require_input(cfg.shape_basis, "shape basis"))
    frames_dir = _require_input(cfg.frames_dir, "frames directory")
    tracks, flags = dio.read_tracks(_require_input(tracks_path, "tracks"))

    per_image: dict[int, list] = {}
    pool_entries = []
    n_fitted = n_skipped = 0

    def fit_one(tr: ObjectTrack):
        frames = [f for f in tr.frames if flags.get((f.frame_id, f.bbox), False)]
        if not frames:
            return None
        if tr.object_class == "car":
            if any(f.keypoints is None for f in frames):
                return None
            sub = ObjectTrack(tr.track_id, tr.object_class, frames)
            try:
                results, coeffs = fit_track(camera, basis, sub, cfg.fit)
            except ClipArtError as exc:
                log.warning("track %d: %s", tr.track_id, exc)
                return None
            return (tr, frames, results, coeffs)
        results = []
        for f in frames:
            try:
                pose = place_on_ground(camera, f.bbox)
            except ClipArtError as exc:
                log.warning("track %d frame %d: %s", tr.track_id, f.frame_id, exc)
                return None
            results.append(FitResult(pose, ShapeCoefficients(np.zeros(0)), 0.0, 0, True))
        return (tr, frames, results, None)

    fitted = _map_parallel(fit_one, tracks, cfg.threads)
    for item in fitted:
        if item is None:
            n_skipped += 1
            continue
        tr, frames, results, coeffs = item
        n_fitted += 1
        for frame, result in zip(frames, results):
            rec = _fit_record(camera, basis, frame, result, tr.object_class,
                              tr.track_id, coeffs)
            per_image.setdefault(frame.frame_id, []).append(rec)
            bb = mask_bbox(frame.modal_mask)
            if bb is None:
                continue
            x0, y0, x1, y1 = (int(v) for v in bb)
            pool_entries.append(
                {
                    "class": tr.object_class,
                    "track_id": tr.track_id,
                    "frame_id": frame.frame_id,
                    "source_image": f"frame_{frame.frame_id:06d}.png",
                    "crop_origin": [x0, y0],
                    "mask": dio.rle_to_json(dio.rle_encode(frame.modal_mask[y0:y1, x0:x1])),
                    "keypoints": None if frame.keypoints is None else {
                        "points": [[float(u), float(v), int(c)] for (u, v), c in
                                   zip(frame.keypoints.points, frame.keypoints.visibility)],
                        "confidence": [float(c) for c in frame.keypoints.confidence],
                    },
                    "pose": {
                        "quaternion_wxyz": [float(v) for v in result.pose.quaternion],
                        "translation": [float(v) for v in result.pose.translation],
                    },
                    "shape_coefficients": None if coeffs is None
                    else [float(v) for v in coeffs.alpha],
                    "score": 1.0,
                }
            )

    os.makedirs(out_dir, exist_ok=True)
    files = []
    for frame_id in sorted(per_image):
        name = f"frame_{frame_id:06d}"
        img = dio.ImageAnnotations(name, camera.image_width, camera.image_height,
                                   tuple(per_image[frame_id]),
                                   file_name=f"frames/{name}.png")
        files.append((name + ".json",
                      dio.AnnotationFile(dio.camera_to_json(camera), (img,), cfg.seed)))
    dio.write_annotation_dir(files, os.path.join(out_dir, "reconstructions"))
    pool_doc = {
        "format": "clipart3d/pool",
        "version": 1,
        "frames_dir": os.path.relpath(frames_dir, out_dir),
        "objects": pool_entries,
    }
    with open(os.path.join(out_dir, "pool.json"), "w") as f:
        json.dump(pool_doc, f, indent=1, sort_keys=True)
        f.write("\n")
    return {
        "tracks_fitted": n_fitted,
        "tracks_skipped": n_skipped,
        "pool_objects": len(pool_entries),
        "output": str(out_dir),
    }


# ---------------------------------------------------------------------------
# composite

def _load_pool(pool_path, camera, basis):
    doc = dio._load_json(pool_path)
    if doc.get("format") != "clipart3d/pool":
        raise dio.ParseError(f"{pool_path}: not a pool document")
    frames_dir = os.path.normpath(os.path.join(os.path.dirname(pool_path), doc["frames_dir"]))
    objs = []
    image_cache = {}
    for i, entry in enumerate(doc["objects"]):
        where = f"{pool_path}.objects[{i}]"
        src = os.path.join(frames_dir, entry["source_image"])
        if src not in image_cache:
            image_cache[src] = dio.load_png(src)
        image = image_cache[src]
        x0, y0 = (int(v) for v in entry["crop_origin"])
        mask = dio.rle_decode(dio.rle_from_json(entry["mask"], where))
        h, w = mask.shape
        crop = image[y0 : y0 + h, x0 : x0 + w].copy()
        pose_doc = entry["pose"]
        pose = dio.RigidPose(np.array(pose_doc["quaternion_wxyz"], dtype=float),
                             np.array(pose_doc["translation"], dtype=float))
        kp = dio._keypoints_from_json(entry.get("keypoints"), where)
        if entry["class"] == "car":
            coeffs = ShapeCoefficients(np.array(entry["shape_coefficients"], dtype=float))
            objs.append(
                make_reconstructed_vehicle(camera, basis, pose, coeffs, crop, mask,
                                           (x0, y0), kp, entry["track_id"],
                                           entry.get("score", 1.0))
            )
        else:
            objs.append(
                make_reconstructed_person(camera, pose, crop, mask, (x0, y0), kp,
                                          track_id=entry["track_id"],
                                          score=entry.get("score", 1.0))
            )
    return objs


def _clipart_to_annotation(record, camera, image_id, file_name) -> dio.AnnotationFile:
    records = []
    for ann in record.objects:
        kp = None
        if ann.keypoints is not None:
            kp = np.column_stack([ann.keypoints.points, ann.keypoints.visibility])
        records.append(
            dio.ObjectRecord(
                object_class=ann.object_class,
                track_id=ann.track_id,
                score=ann.score,
                amodal_bbox=ann.amodal_bbox,
                modal_bbox=ann.modal_bbox,
                amodal_mask=dio.rle_encode(ann.amodal_mask),
                modal_mask=dio.rle_encode(ann.modal_mask),
                keypoints=kp,
                pose=ann.pose,
                shape_coefficients=None if ann.coeffs is None else ann.coeffs.alpha,
                occlusion_fraction=ann.occlusion_fraction,
                mean_depth=ann.mean_depth,
            )
        )
    H, W = record.composite_image.shape[:2]
    img = dio.ImageAnnotations(image_id, W, H, tuple(records), file_name=file_name)
    return dio.AnnotationFile(dio.camera_to_json(camera), (img,), record.rng_seed)


@_stage("composite")
def run_composite(cfg: PipelineConfig, pool_path, out_dir) -> dict:
    """Depth-ordered clip-art scenes from the reconstruction pool."""
    camera = dio.load_calibration(_require_input(cfg.calibration, "calibration"))
    basis = load_basis(_require_input(cfg.shape_basis, "shape basis"))
    background = dio.load_png(_require_input(cfg.background, "background image"))
    if background.shape[:2] != (camera.image_height, camera.image_width):
        raise InputMissing(
            f"background is {background.shape[1]}x{background.shape[0]}, camera expects "
            f"{camera.image_width}x{camera.image_height}"
        )
    pool = _load_pool(_require_input(pool_path, "pool"), camera, basis)
    scenes_dir = os.path.join(out_dir, "scenes")
    os.makedirs(scenes_dir, exist_ok=True)

    def build(s):
        scene_cfg = dataclasses.replace(cfg.scene, seed=cfg.seed + s)
        chosen = sample_nonintersecting(pool, scene_cfg)
        record = composite(background, chosen, camera, basis, scene_cfg)
        name = f"scene_{s:04d}"
        sdir = os.path.join(scenes_dir, name)
        os.makedirs(sdir, exist_ok=True)
        dio.save_png(record.composite_image, os.path.join(sdir, "image.png"))
        depth = record.depth_map.copy()
        np.save(os.path.join(sdir, "depth.npy"), depth)
        ann = _clipart_to_annotation(record, camera, name, f"{name}/image.png")
        dio.write_annotations(ann, os.path.join(sdir, "annotation.json"))
        return name, len(record.objects)

    results = _map_parallel(build, list(range(cfg.n_scenes)), cfg.threads)
    dio._dump_json({"scenes": [f"{name}/annotation.json" for name, _ in results]},
                   os.path.join(scenes_dir, "index.json"))
    return {
        "scenes": len(results),
        "objects": sum(n for _, n in results),
        "output": str(out_dir),
    }


# ---------------------------------------------------------------------------
# export

@_stage("export")
def run_export(annotations_path, out_dir, mode: str = "both") -> dict:
    ann = dio.load_annotations(_require_input(annotations_path, "annotations"))
    os.makedirs(out_dir, exist_ok=True)
    modes = ("amodal", "modal") if mode == "both" else (mode,)
    outputs = {}
    for m in modes:
        doc = dio.export_coco(ann, m)
        path = os.path.join(out_dir, f"coco_{m}.json")
        dio._dump_json(doc, path)
        outputs[m] = path
    return {"images": len(ann.images), "modes": list(modes), "output": str(out_dir)}


# ---------------------------------------------------------------------------
# eval

def _eval_objects(ann: dio.AnnotationFile, basis, is_pred):
    out = []
    for img in ann.images:
        for obj in img.objects:
            kp = kp_labeled = None
            if obj.keypoints is not None and len(obj.keypoints):
                kp = obj.keypoints[:, :2]
                kp_labeled = obj.keypoints[:, 2].astype(int) != int(Visibility.MISSING)
            kp3d = None
            if (obj.object_class == "car" and obj.pose is not None
                    and obj.shape_coefficients is not None and basis is not None):
                X = instantiate(basis, ShapeCoefficients(obj.shape_coefficients))
                kp3d = apply_many(obj.pose, X)
            bbox = obj.amodal_bbox or (0.0, 0.0, 0.0, 0.0)
            out.append(
                EvalObject(
                    image_id=img.image_id,
                    object_class=obj.object_class,
                    bbox=bbox,
                    mask=dio.rle_decode(obj.amodal_mask),
                    score=obj.score if is_pred else 1.0,
                    occlusion_fraction=obj.occlusion_fraction,
                    keypoints=kp,
                    keypoint_labeled=kp_labeled,
                    pose=obj.pose,
                    keypoints3d=kp3d,
                )
            )
    return out


@_stage("eval")
def run_eval(cfg: PipelineConfig, pred_path, gt_path, basis_path=None) -> dict:
    """Metric report for a prediction set against ground truth.

    Pose metrics cover car objects carrying pose and shape on both sides;
    rotation thresholds and medians are in radians (assumption recorded in
    the report header).
    """
    pred_ann = dio.load_annotations(_require_input(pred_path, "predictions"))
    gt_ann = dio.load_annotations(_require_input(gt_path, "ground truth"))
    basis = load_basis(basis_path) if basis_path else None
    preds = _eval_objects(pred_ann, basis, is_pred=True)
    gts = _eval_objects(gt_ann, basis, is_pred=False)
    pairs = EvalPair.of(preds, gts)
    opts = cfg.eval

    report = {
        "header": {
            "n_predictions": len(preds),
            "n_groundtruth": len(gts),
            "rotation_units": "radians (median pose error unit assumed radians)",
        },
        "ap": {
            "box_iou50": average_precision(pairs, 0.5, "box"),
            "box_coco": average_precision(pairs, "coco", "box"),
            "mask_iou50": average_precision(pairs, 0.5, "mask"),
            "mask_coco": average_precision(pairs, "coco", "mask"),
        },
    }

    matches, order = match_greedy(preds, gts, opts.iou_threshold, "box")
    matched = []
    for rank, pi in enumerate(order):
        gi = matches[rank]
        if gi is not None:
            matched.append((preds[pi], gts[gi]))

    rot_errors, trans_errors, adds, mpjpes, pcks = [], [], [], [], []
    for pred, gt in matched:
        if (pred.pose is not None and gt.pose is not None
                and pred.object_class == "car" and gt.object_class == "car"):
            err = pose_accuracy(pred.pose, gt.pose)
            rot_errors.append(err.geodesic_rot_error)
            trans_errors.append(err.translation_error)
            if gt.keypoints3d is not None and pred.keypoints3d is not None:
                mpjpes.append(mpjpe(pred.keypoints3d, gt.keypoints3d, 0))
            if basis is not None:
                adds.append(add_metric(pred.pose, gt.pose, basis.mean_shape))
        if (pred.keypoints is not None and gt.keypoints is not None
                and gt.keypoint_labeled is not None and gt.keypoint_labeled.any()
                and len(pred.keypoints) == len(gt.keypoints)):
            pcks.append(pck(pred.keypoints, gt.keypoints, gt.bbox, opts.pck_alpha,
                            gt.keypoint_labeled))

    report["pose"] = {
        "n": len(rot_errors),
        "acc_pi_over_6": accuracy_at(rot_errors, np.pi / 6),
        "acc_pi_over_18": accuracy_at(rot_errors, np.pi / 18),
        "median_rotation_error": median_error(rot_errors),
        "median_translation_error": median_error(trans_errors),
        "median_add": median_error(adds),
        "mpjpe_mean": float(np.mean(mpjpes)) if mpjpes else None,
    }
    report["keypoints"] = {
        "pck_alpha": opts.pck_alpha,
        "pck_mean": float(np.mean(pcks)) if pcks else None,
        "n": len(pcks),
    }
    bins = OcclusionBins(opts.bin_edges)
    rows = binned_curves(pairs, bins, detection_recall, opts.iou_threshold, "box")
    acc_rows = binned_curves(pairs, bins, rotation_accuracy_selector(np.pi / 6),
                             opts.iou_threshold, "box")
    report["binned"] = {
        "recall": [dataclasses.asdict(r) for r in rows],
        "acc_pi_over_6": [dataclasses.asdict(r) for r in acc_rows],
    }
    return report

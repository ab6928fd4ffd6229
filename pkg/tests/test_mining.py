import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from clipart3d.errors import LengthMismatch
from clipart3d.mining import (
    GroundTruthScorer,
    HeuristicScorer,
    OcclusionLabel,
    evaluate_classifier,
    heuristic_unoccluded,
    track,
)
from clipart3d.tracks import Detection, bbox_iou

BOUNDS = (640, 480)


def det(frame_id, bbox, cls="car"):
    return Detection(frame_id, bbox, None, cls, 1.0)


class TestHeuristic:
    def test_single_detection_unoccluded(self):
        labels = heuristic_unoccluded([det(0, (100, 100, 200, 200))], BOUNDS, 0.01)
        assert labels[0].unoccluded

    def test_identical_boxes_both_occluded(self):
        d = det(0, (100, 100, 200, 200))
        labels = heuristic_unoccluded([d, det(0, d.bbox)], BOUNDS, 0.5)
        assert not labels[0].unoccluded and not labels[1].unoccluded

    def test_box_touching_left_edge_is_truncated(self):
        labels = heuristic_unoccluded([det(0, (0, 100, 80, 200))], BOUNDS, 0.5)
        assert not labels[0].unoccluded

    def test_overlap_above_strip_does_not_occlude(self):
        # occluder overlaps the upper body but stays clear of the bottom strip
        a = det(0, (100, 100, 200, 300))
        b = det(0, (120, 50, 220, 220))
        labels = heuristic_unoccluded([a, b], BOUNDS, 0.05)
        assert labels[0].unoccluded

    def test_monotone_in_delta(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            dets = []
            for _ in range(rng.integers(2, 8)):
                x0 = rng.uniform(10, 500)
                y0 = rng.uniform(10, 350)
                dets.append(det(0, (x0, y0, x0 + rng.uniform(30, 120),
                                    y0 + rng.uniform(30, 120))))
            prev = None
            for delta in (0.01, 0.1, 0.2, 0.5):
                cur = {i for i, lb in
                       enumerate(heuristic_unoccluded(dets, BOUNDS, delta))
                       if lb.unoccluded}
                if prev is not None:
                    assert prev <= cur
                prev = cur

    def test_strip_area_mode_is_stricter_or_equal(self):
        # normalizing by the small strip area inflates the overlap measure
        a = det(0, (100, 100, 200, 300))
        b = det(0, (100, 280, 200, 400))
        iou_lb = heuristic_unoccluded([a, b], BOUNDS, 0.3, "iou")[0]
        area_lb = heuristic_unoccluded([a, b], BOUNDS, 0.3, "strip_area")[0]
        assert iou_lb.unoccluded and not area_lb.unoccluded


class TestTracker:
    def test_single_moving_object_single_track(self):
        frames = []
        for f in range(10):
            x = 100 + 2 * f
            frames.append((f, [det(f, (x, 100, x + 50, 150))]))
        tracks = track(frames, 0.3, 3)
        assert len(tracks) == 1 and len(tracks[0]) == 10

    def test_two_disjoint_objects_two_tracks(self):
        frames = []
        for f in range(8):
            frames.append((f, [det(f, (50, 50, 100, 100)),
                               det(f, (400, 300, 460, 360))]))
        tracks = track(frames, 0.3, 3)
        assert len(tracks) == 2
        assert all(len(t) == 8 for t in tracks)

    def test_gap_longer_than_max_age_splits_track(self):
        frames = [(0, [det(0, (100, 100, 150, 150))])]
        frames += [(f, []) for f in range(1, 6)]
        frames.append((6, [det(6, (100, 100, 150, 150))]))
        tracks = track(frames, 0.3, max_age=3)
        assert len(tracks) == 2

    def test_every_detection_lands_in_exactly_one_track(self):
        rng = np.random.default_rng(1)
        frames = []
        total = 0
        for f in range(12):
            dets = []
            for _ in range(rng.integers(0, 5)):
                x0 = rng.uniform(0, 500)
                y0 = rng.uniform(0, 380)
                dets.append(det(f, (x0, y0, x0 + 60, y0 + 60)))
            total += len(dets)
            frames.append((f, dets))
        tracks = track(frames, 0.3, 3)
        assert sum(len(t) for t in tracks) == total

    def test_determinism(self):
        rng = np.random.default_rng(2)
        frames = []
        for f in range(15):
            dets = []
            for _ in range(rng.integers(1, 5)):
                x0 = rng.uniform(0, 500)
                y0 = rng.uniform(0, 380)
                dets.append(det(f, (x0, y0, x0 + 70, y0 + 70)))
            frames.append((f, dets))
        a = track(frames, 0.3, 3)
        b = track(frames, 0.3, 3)
        assert [(t.track_id, [f.bbox for f in t.frames]) for t in a] == \
               [(t.track_id, [f.bbox for f in t.frames]) for t in b]

    def test_classes_never_associate(self):
        frames = [(0, [det(0, (100, 100, 150, 150), "car")]),
                  (1, [det(1, (102, 100, 152, 150), "person")])]
        tracks = track(frames, 0.1, 3)
        assert len(tracks) == 2

    @staticmethod
    def _crossing_scenario():
        """Two objects crossing paths over 20 frames; identities known."""
        frames = []
        truth = []
        for f in range(20):
            xa = 50 + 20 * f
            xb = 450 - 20 * f
            a = (xa, 200.0, xa + 80, 260.0)
            b = (xb, 205.0, xb + 80, 265.0)
            frames.append((f, [det(f, a), det(f, b)]))
            truth.append({0: a, 1: b})
        return frames, truth

    @staticmethod
    def _count_switches(assignment_per_frame):
        switches = 0
        for prev, cur in zip(assignment_per_frame, assignment_per_frame[1:]):
            for gt_id in prev:
                if gt_id in cur and prev[gt_id] is not None and cur[gt_id] is not None \
                        and prev[gt_id] != cur[gt_id]:
                    switches += 1
        return switches

    def test_crossing_objects_vs_hungarian_oracle(self):
        frames, truth = self._crossing_scenario()
        gate, max_age = 0.1, 3

        def assignments(tracks):
            per_frame = [dict() for _ in frames]
            for t in tracks:
                for fr in t.frames:
                    for gt_id, bbox in truth[fr.frame_id].items():
                        if fr.bbox == bbox:
                            per_frame[fr.frame_id][gt_id] = t.track_id
            return per_frame

        greedy_switches = self._count_switches(assignments(track(frames, gate, max_age)))

        # oracle: per-frame optimal assignment (Hungarian) with the same gate
        oracle_tracks = {}
        next_id = [0]
        live = {}
        per_frame = []
        for f, dets in frames:
            cur = {}
            if live and dets:
                keys = list(live)
                cost = np.zeros((len(keys), len(dets)))
                for i, k in enumerate(keys):
                    for j, d in enumerate(dets):
                        cost[i, j] = -bbox_iou(live[k], d.bbox)
                rows, cols = linear_sum_assignment(cost)
                used = set()
                for i, j in zip(rows, cols):
                    if -cost[i, j] > gate:
                        live[keys[i]] = dets[j].bbox
                        used.add(j)
                        for gt_id, bbox in truth[f].items():
                            if dets[j].bbox == bbox:
                                cur[gt_id] = keys[i]
            else:
                used = set()
            for j, d in enumerate(dets):
                if j not in used:
                    tid = next_id[0]
                    next_id[0] += 1
                    live[tid] = d.bbox
                    for gt_id, bbox in truth[f].items():
                        if d.bbox == bbox:
                            cur[gt_id] = tid
            per_frame.append(cur)
        oracle_switches = self._count_switches(per_frame)
        assert greedy_switches <= oracle_switches + 2
        del oracle_tracks


class TestEvaluateClassifier:
    def test_perfect_agreement(self):
        labels = [OcclusionLabel("unoccluded", "classifier"),
                  OcclusionLabel("occluded", "classifier")]
        truth = [OcclusionLabel("unoccluded", "groundtruth"),
                 OcclusionLabel("occluded", "groundtruth")]
        score = evaluate_classifier(labels, truth)
        assert score.recall == 1.0 and score.precision == 1.0
        assert score.recall_defined and score.precision_defined

    def test_all_predicted_occluded(self):
        labels = [OcclusionLabel("occluded", "classifier")] * 3
        truth = [OcclusionLabel("unoccluded", "groundtruth")] * 3
        score = evaluate_classifier(labels, truth)
        assert score.recall == 0.0 and score.recall_defined
        assert score.precision == 0.0 and not score.precision_defined

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            evaluate_classifier([OcclusionLabel("occluded", "classifier")], [])

    def test_groundtruth_scorer_is_exact_on_synthetic_frames(self, toy_basis):
        from clipart3d.synth import SynthSpec, generate_scene

        spec = SynthSpec(n_objects_min=2, n_objects_max=5, image_width=480,
                         image_height=270)
        agree = 0
        total = 0
        for seed in range(6):
            scene = generate_scene(seed + 40, spec)
            frame = scene.frames[0]
            fractions = {(frame.frame_id, i): g.occlusion_fraction
                         for i, g in enumerate(frame.gt) if g.modal_bbox is not None}
            dets = frame.detections
            by_key = {}
            for i, d in enumerate(dets):
                gt_idx = [j for j, g in enumerate(frame.gt)
                          if g.modal_bbox is not None and tuple(g.modal_bbox) == d.bbox]
                by_key[(d.frame_id, i)] = frame.gt[gt_idx[0]].occlusion_fraction
            scorer = GroundTruthScorer(by_key)
            bounds = (scene.camera.image_width, scene.camera.image_height)
            labels = scorer.label_frame(dets, bounds, "classifier")
            truth = scorer.label_frame(dets, bounds, "groundtruth")
            total += len(labels)
            agree += sum(lb.status == gt.status for lb, gt in zip(labels, truth))
        assert total > 0 and agree == total  # oracle interface reproduces itself

    def test_heuristic_scorer_matches_heuristic(self):
        dets = [det(0, (100, 100, 200, 200)), det(0, (150, 150, 250, 250))]
        scorer = HeuristicScorer(0.1)
        labels = scorer.label_frame(dets, BOUNDS, "heuristic")
        direct = heuristic_unoccluded(dets, BOUNDS, 0.1)
        assert [lb.unoccluded for lb in labels] == [lb.unoccluded for lb in direct]

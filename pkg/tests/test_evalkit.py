"""Detection matching, interpolated AP/AOS, report rendering, and the
inference benchmark.  The AP cases are small enough to enumerate by hand."""

import math

import numpy as np
import pytest

from monobox import net
from monobox.evalkit import (
    DIFFICULTIES,
    FP,
    IGNORED,
    TP,
    BenchResult,
    DifficultyResult,
    EvalReport,
    MatchResult,
    average_orientation_similarity,
    average_precision,
    bench_inference,
    default_iou_threshold,
    evaluate,
    evaluate_files,
    format_report_table,
    iou_2d,
    match_detections,
    parse_report_table,
    recall_grid,
    report_key_values,
)
from monobox.kitti_io import ObjectLabel, serialize_label_file

EASY, MODERATE, HARD = DIFFICULTIES


def label(bbox, alpha=0.0, score=None, class_name="Car", truncation=0.0,
          occlusion=0):
    return ObjectLabel(class_name=class_name, truncation=truncation,
                       occlusion=occlusion, alpha=alpha, bbox=bbox,
                       dims=(1.5, 1.6, 3.9), location=(0.0, 1.65, 20.0),
                       rotation_y=alpha, score=score)


def tall_box(i, height=50.0):
    left = 100.0 * i
    return (left, 0.0, left + height, height)


class TestIoU:
    def test_identical_boxes(self):
        assert iou_2d((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0

    def test_disjoint_boxes(self):
        assert iou_2d((0, 0, 10, 10), (20, 0, 30, 10)) == 0.0
        assert iou_2d((0, 0, 10, 10), (10, 0, 20, 10)) == 0.0  # touching edges

    def test_hand_computed_overlap(self):
        # boxes 2x2, overlap 1x2 = 2, union 8 - 2 = 6
        assert abs(iou_2d((0, 0, 2, 2), (1, 0, 3, 2)) - 1.0 / 3.0) < 1e-12

    def test_symmetry(self):
        rng = np.random.default_rng(91)
        for _ in range(100):
            a = np.sort(rng.uniform(0, 100, size=4)).reshape(2, 2).T.reshape(-1)
            b = np.sort(rng.uniform(0, 100, size=4)).reshape(2, 2).T.reshape(-1)
            boxes = [(a[0], a[2], a[1], a[3]), (b[0], b[2], b[1], b[3])]
            assert iou_2d(boxes[0], boxes[1]) == iou_2d(boxes[1], boxes[0])

    def test_containment(self):
        # inner area 4, outer area 100
        assert abs(iou_2d((0, 0, 10, 10), (4, 4, 6, 6)) - 0.04) < 1e-12


class TestDifficulty:
    def test_thresholds(self):
        tall = label(tall_box(0, 45.0))
        short = label(tall_box(0, 30.0))
        assert EASY.admits(tall)
        assert not EASY.admits(short)
        assert MODERATE.admits(short)
        assert HARD.admits(short)

    def test_occlusion_and_truncation_filters(self):
        occluded = label(tall_box(0), occlusion=1)
        truncated = label(tall_box(0), truncation=0.4)
        assert not EASY.admits(occluded)
        assert MODERATE.admits(occluded)
        assert not MODERATE.admits(truncated)
        assert HARD.admits(truncated)

    def test_valid_counts_grow_with_difficulty(self):
        rng = np.random.default_rng(92)
        labels = []
        for i in range(60):
            h = float(rng.uniform(26, 80))
            left = float(rng.uniform(0, 1000))
            labels.append(label((left, 0.0, left + h, h),
                                truncation=float(rng.uniform(0, 0.5)),
                                occlusion=int(rng.integers(0, 3))))
        counts = [sum(spec.admits(l) for l in labels) for spec in DIFFICULTIES]
        assert counts[0] <= counts[1] <= counts[2]


class TestMatchDetections:
    def test_missing_score_rejected(self):
        gt = [label(tall_box(0))]
        det = [label(tall_box(0), score=None)]
        with pytest.raises(ValueError, match="score"):
            match_detections(gt, det, 0.7, EASY, "Car")

    def test_perfect_detections_all_tp(self):
        gt = [label(tall_box(i), alpha=0.1 * i) for i in range(4)]
        det = [label(tall_box(i), alpha=0.1 * i, score=0.9 - 0.1 * i)
               for i in range(4)]
        m = match_detections(gt, det, 0.7, EASY, "Car")
        assert m.outcomes == (TP, TP, TP, TP)
        assert m.n_valid_gt == 4
        np.testing.assert_allclose(m.similarities, 1.0, atol=1e-12)

    def test_each_gt_matched_at_most_once(self):
        gt = [label(tall_box(0))]
        det = [label(tall_box(0), score=0.9), label(tall_box(0), score=0.8)]
        m = match_detections(gt, det, 0.7, EASY, "Car")
        assert m.outcomes == (TP, FP)

    def test_higher_score_wins_processing_order(self):
        gt = [label(tall_box(0))]
        det = [label(tall_box(0), score=0.2), label(tall_box(0), score=0.9)]
        m = match_detections(gt, det, 0.7, EASY, "Car")
        # detection 1 (score 0.9) goes first and takes the gt
        assert list(m.det_order) == [1, 0]
        assert m.outcomes == (TP, FP)

    def test_equal_scores_keep_original_order(self):
        gt = [label(tall_box(0))]
        det = [label(tall_box(0), score=0.5), label(tall_box(0), score=0.5)]
        m = match_detections(gt, det, 0.7, EASY, "Car")
        assert list(m.det_order) == [0, 1]
        assert m.outcomes == (TP, FP)

    def test_iou_tie_takes_lowest_gt_index(self):
        gt = [label(tall_box(0)), label(tall_box(0))]  # identical boxes
        det = [label(tall_box(0), score=0.9)]
        m = match_detections(gt, det, 0.7, EASY, "Car")
        assert m.outcomes == (TP,)
        assert m.matched_gt[0] == 0

    def test_best_iou_wins(self):
        gt = [label((0, 0, 50, 50)), label((10, 0, 60, 50))]
        det = [label((9, 0, 59, 50), score=0.9)]  # closer to gt1
        m = match_detections(gt, det, 0.5, EASY, "Car")
        assert m.matched_gt[0] == 1

    def test_below_threshold_is_fp(self):
        gt = [label(tall_box(0))]
        det = [label((25, 0, 75, 50), score=0.9)]  # IoU = 1/3
        m = match_detections(gt, det, 0.7, EASY, "Car")
        assert m.outcomes == (FP,)

    def test_invalid_gt_absorbs_detection(self):
        short = tall_box(5, 30.0)  # below easy's 40 px minimum
        gt = [label(tall_box(0)), label(short)]
        det = [label(tall_box(0), score=0.9), label(short, score=0.8)]
        m = match_detections(gt, det, 0.7, EASY, "Car")
        assert m.outcomes == (TP, IGNORED)
        assert m.n_valid_gt == 1

    def test_dont_care_region_absorbs_detection(self):
        dc = ObjectLabel(class_name="DontCare", truncation=-1.0, occlusion=-1,
                         alpha=-10.0, bbox=(500.0, 0.0, 560.0, 60.0),
                         dims=(-1.0, -1.0, -1.0), location=(-1000.0,) * 3,
                         rotation_y=-10.0)
        gt = [label(tall_box(0)), dc]
        det = [label((500.0, 0.0, 560.0, 60.0), score=0.9)]
        m = match_detections(gt, det, 0.7, EASY, "Car")
        assert m.outcomes == (IGNORED,)

    def test_other_class_detections_dropped(self):
        gt = [label(tall_box(0))]
        det = [label(tall_box(0), score=0.9, class_name="Pedestrian")]
        m = match_detections(gt, det, 0.7, EASY, "Car")
        assert m.outcomes == ()
        assert m.n_valid_gt == 1


class TestAveragePrecision:
    def hand_case(self):
        # two valid gt; detections arrive TP, FP, TP by descending score
        gt = [label(tall_box(0), alpha=0.5), label(tall_box(2), alpha=-0.3)]
        det = [label(tall_box(0), alpha=0.5, score=0.9),
               label(tall_box(4), alpha=0.0, score=0.8),
               label(tall_box(2), alpha=-0.3, score=0.7)]
        return match_detections(gt, det, 0.7, EASY, "Car")

    def test_hand_enumerated_40_point(self):
        m = self.hand_case()
        # precision 1.0 holds through recall 0.5 (20 grid points), then 2/3
        want = 100.0 * (20 * 1.0 + 20 * (2.0 / 3.0)) / 40.0
        assert abs(average_precision(m, m.n_valid_gt, 40) - want) < 1e-9

    def test_hand_enumerated_11_point(self):
        m = self.hand_case()
        # grid 0.0..0.5 -> 6 points at precision 1.0, rest at 2/3
        want = 100.0 * (6 * 1.0 + 5 * (2.0 / 3.0)) / 11.0
        assert abs(average_precision(m, m.n_valid_gt, 11) - want) < 1e-9

    def test_perfect_detections_score_100(self):
        gt = [label(tall_box(i), alpha=0.2 * i - 0.5) for i in range(5)]
        det = [label(tall_box(i), alpha=0.2 * i - 0.5, score=1.0 - 0.1 * i)
               for i in range(5)]
        m = match_detections(gt, det, 0.7, EASY, "Car")
        assert abs(average_precision(m, m.n_valid_gt, 40) - 100.0) < 1e-12
        assert abs(average_orientation_similarity(m, m.n_valid_gt, 40) - 100.0) < 1e-12

    def test_empty_detections_score_zero(self):
        gt = [label(tall_box(0))]
        m = match_detections(gt, [], 0.7, EASY, "Car")
        assert average_precision(m, m.n_valid_gt, 40) == 0.0

    def test_no_valid_gt_rejected(self):
        m = match_detections([], [label(tall_box(0), score=0.5)], 0.7, EASY, "Car")
        with pytest.raises(ValueError):
            average_precision(m, m.n_valid_gt, 40)

    def test_score_rank_invariance(self):
        rng = np.random.default_rng(93)
        gt = [label(tall_box(i)) for i in range(6)]
        for _ in range(20):
            scores = rng.uniform(0.1, 1.0, size=8)
            boxes = [tall_box(int(rng.integers(0, 8))) for _ in range(8)]
            det_a = [label(b, score=float(s)) for b, s in zip(boxes, scores)]
            # strictly monotone transform preserves the ranking
            det_b = [label(b, score=float(2.0 * s ** 3 + 1.0))
                     for b, s in zip(boxes, scores)]
            ma = match_detections(gt, det_a, 0.7, EASY, "Car")
            mb = match_detections(gt, det_b, 0.7, EASY, "Car")
            assert ma.outcomes == mb.outcomes
            assert average_precision(ma, ma.n_valid_gt, 40) == \
                average_precision(mb, mb.n_valid_gt, 40)

    def test_ignored_detections_do_not_hurt_precision(self):
        short = tall_box(5, 30.0)
        gt = [label(tall_box(0)), label(short)]
        det = [label(tall_box(0), score=0.9), label(short, score=0.95)]
        m = match_detections(gt, det, 0.7, EASY, "Car")
        assert abs(average_precision(m, m.n_valid_gt, 40) - 100.0) < 1e-12

    def test_unsupported_grid_rejected(self):
        with pytest.raises(ValueError):
            recall_grid(25)

    def test_grid_endpoints(self):
        g40 = recall_grid(40)
        g11 = recall_grid(11)
        assert g40[0] == 1.0 / 40.0 and g40[-1] == 1.0 and len(g40) == 40
        assert g11[0] == 0.0 and g11[-1] == 1.0 and len(g11) == 11


class TestOrientationSimilarity:
    def flipped_case(self, delta):
        gt = [label(tall_box(i), alpha=0.3) for i in range(4)]
        det = [label(tall_box(i), alpha=0.3 + delta, score=0.9 - 0.1 * i)
               for i in range(4)]
        return match_detections(gt, det, 0.7, EASY, "Car")

    def test_pi_flip_zeroes_aos(self):
        m = self.flipped_case(math.pi)
        assert abs(average_precision(m, m.n_valid_gt, 40) - 100.0) < 1e-12
        assert abs(average_orientation_similarity(m, m.n_valid_gt, 40)) < 1e-9

    def test_quarter_flip_halves_aos(self):
        m = self.flipped_case(math.pi / 2)
        ap = average_precision(m, m.n_valid_gt, 40)
        aos = average_orientation_similarity(m, m.n_valid_gt, 40)
        assert abs(aos - ap / 2.0) < 1e-9

    def test_aos_never_exceeds_ap(self):
        rng = np.random.default_rng(94)
        for _ in range(50):
            n_gt = int(rng.integers(1, 6))
            gt = [label(tall_box(i), alpha=float(rng.uniform(-3, 3)))
                  for i in range(n_gt)]
            det = [label(tall_box(int(rng.integers(0, n_gt + 1))),
                         alpha=float(rng.uniform(-3, 3)),
                         score=float(rng.uniform(0, 1)))
                   for _ in range(int(rng.integers(0, 7)))]
            m = match_detections(gt, det, 0.7, EASY, "Car")
            ap = average_precision(m, m.n_valid_gt, 40)
            aos = average_orientation_similarity(m, m.n_valid_gt, 40)
            assert aos <= ap + 1e-9


class TestEvaluate:
    def test_default_thresholds(self):
        assert default_iou_threshold("Car") == 0.7
        assert default_iou_threshold("Pedestrian") == 0.5
        assert default_iou_threshold("Cyclist") == 0.5

    def test_three_difficulties_reported(self):
        gt = [label(tall_box(i)) for i in range(3)]
        det = [label(tall_box(i), score=0.9) for i in range(3)]
        report = evaluate(gt, det, "Car")
        assert [r.spec.name for r in report.results] == ["easy", "moderate", "hard"]
        assert report.iou_threshold == 0.7
        for r in report.results:
            assert abs(r.ap - 100.0) < 1e-12

    def test_evaluate_files(self, tmp_path):
        gt = [label(tall_box(i)) for i in range(3)]
        det = [label(tall_box(i), score=0.9) for i in range(3)]
        gt_path = tmp_path / "gt.txt"
        det_path = tmp_path / "det.txt"
        gt_path.write_text(serialize_label_file(gt))
        det_path.write_text(serialize_label_file(det))
        report = evaluate_files(gt_path, det_path, "Car", points=11)
        assert report.points == 11
        assert abs(report.results[0].ap - 100.0) < 1e-12


class TestReportRendering:
    def fixture_report(self):
        # plausible published-style figures exercise the fixed-point render
        values = [(90.79, 90.23), (83.33, 82.27), (71.13, 69.81)]
        dummy = MatchResult(det_order=np.zeros(0, dtype=int), outcomes=(),
                            matched_gt=np.zeros(0, dtype=int),
                            similarities=np.zeros(0), n_valid_gt=1)
        results = tuple(
            DifficultyResult(spec=spec, ap=ap, aos=aos, n_valid_gt=1, matches=dummy)
            for spec, (ap, aos) in zip(DIFFICULTIES, values))
        return EvalReport(class_name="Car", iou_threshold=0.7, points=40,
                          results=results)

    def test_render_parse_roundtrip(self):
        report = self.fixture_report()
        table = format_report_table(report)
        parsed = parse_report_table(table)
        det = parsed["Car (Detection)"]
        aos = parsed["Car (Orientation)"]
        assert det == {"Easy": 90.79, "Moderate": 83.33, "Hard": 71.13}
        assert aos == {"Easy": 90.23, "Moderate": 82.27, "Hard": 69.81}

    def test_table_mentions_protocol(self):
        table = format_report_table(self.fixture_report())
        assert "40-point" in table
        assert "IoU >= 0.7" in table

    def test_key_values_cover_all_difficulties(self):
        kv = report_key_values(self.fixture_report())
        for name in ("easy", "moderate", "hard"):
            assert f"{name}.ap" in kv
            assert f"{name}.aos" in kv
            assert f"{name}.n_gt" in kv
        assert kv["class_name"] == "Car"
        assert float(kv["easy.ap"]) == pytest.approx(90.79)

    def test_parse_rejects_malformed_table(self):
        with pytest.raises(ValueError):
            parse_report_table("just one line\n")


class TestBench:
    def test_statistics_are_consistent(self):
        rng = np.random.default_rng(95)
        cfg = net.HeadConfig(feature_dim=16, hidden_dim=8, n_bins=2)
        params = net.init_params(cfg, 1)
        features = rng.normal(size=(10, 16))
        result = bench_inference(params, features, cfg.layout(),
                                 repetitions=10, warmup=1)
        assert isinstance(result, BenchResult)
        assert len(result.times) == 10
        assert result.batch_size == 10
        assert result.feature_dim == 16
        assert min(result.times) <= result.mean <= max(result.times)
        assert min(result.times) <= result.p50 <= result.p95 <= max(result.times)
        assert result.per_object_mean == pytest.approx(result.mean / 10)
        assert all(t > 0 for t in result.times)

"""Metrics tests: IoU/NMS/AP against brute-force oracles, plus export formats."""
import itertools
import logging

import numpy as np
import pytest

from cmac.errors import ContractError, EvaluationError
from cmac.evaluation import (Detection, attention_to_gray,
                             dataset_average_precision, average_precision,
                             dump_detections, evaluate, export_attention_map,
                             format_report, iou, mean_ap, nms, read_graymap)
from cmac.fusion import Box
from cmac.global_attention import AttentionTrace

from oracles import best_assignment_ap, iou_xyxy, nms_loops


def det(x1, y1, x2, y2, cls=1, score=0.5):
    return Detection(Box(x1, y1, x2, y2), cls, score)


def random_box(rng, lo=0.0, hi=40.0, min_side=1.0):
    x1 = rng.uniform(lo, hi - min_side)
    y1 = rng.uniform(lo, hi - min_side)
    return Box(x1, y1, x1 + rng.uniform(min_side, 15.0),
               y1 + rng.uniform(min_side, 15.0))


class TestIou:
    def test_identical(self):
        b = Box(2.0, 3.0, 9.0, 11.0)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 5, 5), Box(10, 10, 20, 20)) == 0.0

    def test_half_shift(self):
        # overlap 5x10 = 50, union 100 + 100 - 50 = 150
        assert iou(Box(0, 0, 10, 10), Box(5, 0, 15, 10)) == 1.0 / 3.0

    def test_zero_area_logged(self, caplog):
        with caplog.at_level(logging.WARNING, logger="cmac.evaluation"):
            v = iou(Box(3, 3, 3, 7), Box(0, 0, 10, 10))
        assert v == 0.0
        assert any("zero-area" in r.message for r in caplog.records)

    def test_matches_oracle_and_symmetric(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            a, b = random_box(rng), random_box(rng)
            v = iou(a, b)
            assert v == iou_xyxy(a.as_tuple(), b.as_tuple())
            assert v == iou(b, a)
            assert 0.0 <= v <= 1.0


class TestNms:
    def test_threshold_domain(self):
        d = [det(0, 0, 5, 5)]
        for bad in (0.0, 1.0, -0.2, 1.5):
            with pytest.raises(ContractError):
                nms(d, bad)

    def test_single_unchanged(self):
        d = [det(0, 0, 5, 5, score=0.4)]
        assert nms(d, 0.5) == d

    def test_duplicate_keeps_higher_score(self):
        dets = [det(0, 0, 10, 10, score=0.8), det(0, 0, 10, 10, score=0.9)]
        kept = nms(dets, 0.5)
        assert len(kept) == 1 and kept[0].score == 0.9

    def test_other_class_not_suppressed(self):
        dets = [det(0, 0, 10, 10, cls=1, score=0.9),
                det(0, 0, 10, 10, cls=2, score=0.8)]
        assert len(nms(dets, 0.5)) == 2

    def test_suppression_is_strict_inequality(self):
        # IoU exactly 0.5: inter 50, union 100
        dets = [det(0, 0, 10, 10, score=0.9), det(0, 0, 10, 5, score=0.8)]
        assert len(nms(dets, 0.5)) == 2
        assert len(nms(dets, 0.49)) == 1

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(60):
            n = int(rng.integers(1, 8))
            boxes = [random_box(rng, hi=20.0) for _ in range(n)]
            scores = rng.uniform(size=n)
            dets = [Detection(b, 1, float(s)) for b, s in zip(boxes, scores)]
            thresh = float(rng.uniform(0.1, 0.9))
            kept = nms(dets, thresh)
            pos = {id(d): i for i, d in enumerate(dets)}
            assert sorted(pos[id(d)] for d in kept) == sorted(
                nms_loops([b.as_tuple() for b in boxes], list(scores), thresh))

    def test_input_order_independent(self):
        rng = np.random.default_rng(23)
        boxes = [random_box(rng, hi=15.0) for _ in range(7)]
        scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3]  # distinct: tie rule idle
        dets = [Detection(b, 1, s) for b, s in zip(boxes, scores)]
        base = {(d.score, d.box.as_tuple()) for d in nms(dets, 0.4)}
        for _ in range(10):
            perm = list(rng.permutation(len(dets)))
            got = {(d.score, d.box.as_tuple())
                   for d in nms([dets[i] for i in perm], 0.4)}
            assert got == base


def gts_of(*pairs):
    return [(Box(*p[:4]), p[4]) for p in pairs]


class TestAveragePrecision:
    def test_perfect(self):
        gts = gts_of((0, 0, 10, 10, 1), (20, 20, 30, 30, 1))
        dets = [det(0, 0, 10, 10, score=0.9), det(20, 20, 30, 30, score=0.8)]
        assert average_precision(dets, gts, 1) == 1.0

    def test_no_detections(self):
        assert average_precision([], gts_of((0, 0, 10, 10, 1)), 1) == 0.0

    def test_hand_case_all_point(self):
        # two gts; score-ordered outcomes TP, FP, TP
        gts = gts_of((0, 0, 10, 10, 1), (20, 20, 30, 30, 1))
        dets = [det(0, 0, 10, 10, score=0.9),
                det(50, 50, 60, 60, score=0.8),
                det(20, 20, 30, 30, score=0.7)]
        # precisions (1, 1/2, 2/3), recalls (1/2, 1/2, 1)
        # envelope area = 0.5 * 1 + 0.5 * (2/3)
        assert average_precision(dets, gts, 1) == pytest.approx(5.0 / 6.0, abs=1e-12)

    def test_hand_case_voc07(self):
        gts = gts_of((0, 0, 10, 10, 1), (20, 20, 30, 30, 1))
        dets = [det(0, 0, 10, 10, score=0.9),
                det(50, 50, 60, 60, score=0.8),
                det(20, 20, 30, 30, score=0.7)]
        # 6 recall points <= 0.5 see precision 1, the other 5 see 2/3
        want = (6 * 1.0 + 5 * (2.0 / 3.0)) / 11.0
        assert average_precision(dets, gts, 1, variant="voc07") == pytest.approx(
            want, abs=1e-12)

    def test_unknown_variant(self):
        with pytest.raises(ContractError):
            average_precision([], gts_of((0, 0, 5, 5, 1)), 1, variant="coco")

    def test_claimed_gt_makes_fp(self):
        # det2's argmax gt is already claimed; no fallback to the other gt
        gts = gts_of((0, 0, 10, 10, 1), (0, 0, 10, 9, 1))
        dets = [det(0, 0, 10, 10, score=0.9), det(0, 0, 10, 9.5, score=0.8)]
        assert average_precision(dets, gts, 1) == pytest.approx(0.5, abs=1e-12)

    def test_no_gt_is_undefined(self, caplog):
        with caplog.at_level(logging.WARNING, logger="cmac.evaluation"):
            ap = average_precision([det(0, 0, 5, 5, cls=2)], gts_of((0, 0, 5, 5, 1)), 2)
        assert ap is None
        assert any("undefined" in r.message for r in caplog.records)

    def test_other_classes_ignored(self):
        gts = gts_of((0, 0, 10, 10, 1), (0, 0, 10, 10, 2))
        dets = [det(0, 0, 10, 10, cls=1, score=0.9),
                det(40, 40, 50, 50, cls=2, score=0.95)]  # class-2 FP, irrelevant
        assert average_precision(dets, gts, 1) == 1.0

    def test_iou_threshold_respected(self):
        gts = gts_of((0, 0, 10, 10, 1))
        d = [det(5, 0, 15, 10, score=0.9)]  # IoU 1/3
        assert average_precision(d, gts, 1, iou_thresh=0.5) == 0.0
        assert average_precision(d, gts, 1, iou_thresh=0.3) == 1.0

    def test_exhaustive_small_cases_match_oracle(self):
        # every det/gt subset assignment from a 4-box pool
        pool = [(0.0, 0.0, 10.0, 10.0), (5.0, 0.0, 15.0, 10.0),
                (0.0, 0.0, 10.0, 5.0), (20.0, 20.0, 30.0, 30.0)]
        scores = [0.9, 0.7, 0.5, 0.3]
        count = 0
        for gt_idx in itertools.chain.from_iterable(
                itertools.combinations(range(4), k) for k in (1, 2, 3, 4)):
            gts = [(Box(*pool[i]), 1) for i in gt_idx]
            for det_idx in itertools.chain.from_iterable(
                    itertools.combinations(range(4), k) for k in (0, 1, 2, 3, 4)):
                dets = [Detection(Box(*pool[i]), 1, scores[i]) for i in det_idx]
                got = average_precision(dets, gts, 1)
                want = best_assignment_ap(
                    [(scores[i], pool[i]) for i in det_idx],
                    [pool[i] for i in gt_idx])
                assert got == pytest.approx(want, abs=1e-12)
                count += 1
        assert count == 15 * 16

    def test_range_and_monotonicity_properties(self):
        rng = np.random.default_rng(31)
        for _ in range(40):
            n_gt = int(rng.integers(1, 4))
            gts = [(random_box(rng, hi=30.0), 1) for _ in range(n_gt)]
            dets = []
            for _ in range(int(rng.integers(0, 5))):
                if rng.uniform() < 0.5 and gts:
                    b = gts[int(rng.integers(len(gts)))][0]
                else:
                    b = random_box(rng, hi=30.0)
                dets.append(Detection(b, 1, float(rng.uniform())))
            base = average_precision(dets, gts, 1)
            assert 0.0 <= base <= 1.0
            low = min((d.score for d in dets), default=1.0)
            # a false positive ranked below everything never helps
            fp = Detection(Box(200, 200, 210, 210), 1, low / 2.0)
            assert average_precision(dets + [fp], gts, 1) <= base + 1e-12
            # a trailing true positive for an untouched gt never hurts
            extra = (Box(300, 300, 310, 310), 1)
            before = average_precision(dets, gts + [extra], 1)
            tp = Detection(extra[0], 1, low / 2.0)
            assert average_precision(dets + [tp], gts + [extra], 1) >= before - 1e-12


class TestDatasetPooling:
    def test_pooled_ranking_matches_hand_case(self):
        # per-image matching, global ranking: same 5/6 curve split across images
        im_a = ([det(0, 0, 10, 10, score=0.9)], gts_of((0, 0, 10, 10, 1)))
        im_b = ([det(50, 50, 60, 60, score=0.8), det(20, 20, 30, 30, score=0.7)],
                gts_of((20, 20, 30, 30, 1)))
        ap = dataset_average_precision([im_a[0], im_b[0]], [im_a[1], im_b[1]], 1)
        assert ap == pytest.approx(5.0 / 6.0, abs=1e-12)

    def test_matching_stays_within_image(self):
        dets = [[det(0, 0, 10, 10, score=0.9)], []]
        gts = [gts_of(), gts_of((0, 0, 10, 10, 1))]
        assert dataset_average_precision(dets, gts, 1) == 0.0

    def test_no_gt_anywhere_undefined(self):
        assert dataset_average_precision([[det(0, 0, 5, 5)]], [gts_of()], 1) is None


class TestMeanAp:
    def test_two_classes(self):
        assert mean_ap({1: 1.0, 2: 0.0}) == 0.5

    def test_single_class(self):
        assert mean_ap({3: 0.75}) == 0.75

    def test_undefined_excluded(self, caplog):
        with caplog.at_level(logging.WARNING, logger="cmac.evaluation"):
            assert mean_ap({1: None, 2: 0.8}) == 0.8
        assert any("excludes" in r.message for r in caplog.records)

    def test_all_undefined_raises(self):
        with pytest.raises(EvaluationError):
            mean_ap({1: None, 2: None})

    def test_evaluate_wires_classes(self):
        dets = [[det(0, 0, 10, 10, cls=1, score=0.9)]]
        gts = [gts_of((0, 0, 10, 10, 1), (20, 20, 30, 30, 2))]
        per_class, m = evaluate(dets, gts, num_classes=3)
        assert set(per_class) == {1, 2, 3}
        assert per_class[1] == 1.0 and per_class[2] == 0.0
        assert per_class[3] is None
        assert m == 0.5


def make_trace(alpha_rows):
    a = np.asarray(alpha_rows, dtype=np.float64)
    ctx = np.zeros((a.shape[0], 2))
    return AttentionTrace(alphas=[np.full_like(a, 1.0 / a.shape[1]), a],
                          contexts=[ctx, ctx], final_context=ctx)


class TestAttentionExport:
    def test_uniform_alpha_constant_gray(self):
        g = attention_to_gray(np.full(16, 1.0 / 16.0), 64)
        assert g.shape == (64, 64)
        assert np.all(g == round(255 / 16))

    def test_one_hot_bright_block(self):
        alpha = np.zeros(16)
        alpha[6] = 1.0  # row 1, col 2 of the 4x4 grid
        g = attention_to_gray(alpha, 64)
        assert np.all(g[16:32, 32:48] == 255)
        g[16:32, 32:48] = 0
        assert np.all(g == 0)

    def test_non_divisible_upsample(self):
        alpha = np.linspace(0.0, 1.0, 9)
        g = attention_to_gray(alpha, 10)
        assert g.shape == (10, 10)
        assert set(np.unique(g)) <= set(np.round(255 * alpha).astype(np.uint8))
        # nearest map keeps corners
        assert g[0, 0] == 0 and g[-1, -1] == 255

    def test_not_square_rejected(self):
        with pytest.raises(ContractError):
            attention_to_gray(np.ones(5) / 5.0, 16)

    def test_round_trip_recovers_quantized_alpha(self, tmp_path):
        rng = np.random.default_rng(7)
        raw = rng.uniform(size=(2, 9))
        alpha = raw / raw.sum(axis=1, keepdims=True)
        p = tmp_path / "att.pgm"
        export_attention_map(make_trace(alpha), 24, p, row=1)
        img = read_graymap(p)
        assert img.shape == (24, 24)
        assert np.array_equal(img, attention_to_gray(alpha[1], 24))
        # final step of the trace, not the first
        assert not np.array_equal(img, attention_to_gray(np.full(9, 1 / 9), 24))

    def test_part_window_sidecar(self, tmp_path):
        alpha = np.full((1, 4), 0.25)
        roi = Box(10.0, 20.0, 30.0, 60.0)
        parts = [np.array([[0.5, -0.5]]), np.array([[0.0, 0.0]])]
        p = tmp_path / "att.pgm"
        export_attention_map(make_trace(alpha), 16, p, parts=parts, roi=roi)
        lines = (tmp_path / "att.pgm.parts").read_text().splitlines()
        assert len(lines) == 2
        i0, x1, y1, x2, y2 = lines[0].split()
        # center (20,40) + t*(10,20) = (25,30); half window (5,10)
        assert (int(i0), float(x1), float(y1), float(x2), float(y2)) == (
            0, 20.0, 20.0, 30.0, 40.0)
        i1, x1, y1, x2, y2 = lines[1].split()
        assert (int(i1), float(x1), float(y1), float(x2), float(y2)) == (
            1, 15.0, 30.0, 25.0, 50.0)

    def test_empty_trace_rejected(self):
        t = AttentionTrace(alphas=[], contexts=[], final_context=np.zeros((1, 2)))
        with pytest.raises(ContractError):
            export_attention_map(t, 16, "/tmp/never.pgm")

    def test_bad_row_rejected(self, tmp_path):
        with pytest.raises(ContractError):
            export_attention_map(make_trace(np.full((1, 4), 0.25)), 16,
                                 tmp_path / "x.pgm", row=3)

    def test_io_failure_names_path(self, tmp_path):
        bad = tmp_path / "missing-dir" / "att.pgm"
        with pytest.raises(EvaluationError, match="missing-dir"):
            export_attention_map(make_trace(np.full((1, 4), 0.25)), 16, bad)


class TestDumpAndReport:
    def test_detections_dump_format(self, tmp_path):
        dets = {"im-2": [det(1.5, 2.0, 3.25, 4.0, cls=2, score=0.625)],
                "im-1": [det(0, 0, 8, 8, cls=1, score=0.5),
                         det(1, 1, 9, 9, cls=3, score=0.25)]}
        p = tmp_path / "dets.txt"
        dump_detections(dets, p)
        lines = p.read_text().splitlines()
        assert len(lines) == 3
        assert lines[0].split()[0] == "im-1" and lines[2].split()[0] == "im-2"
        tok = lines[2].split()
        assert tok[1] == "2"
        assert [float(t) for t in tok[2:]] == [0.625, 1.5, 2.0, 3.25, 4.0]

    def test_dump_io_failure(self, tmp_path):
        with pytest.raises(EvaluationError, match="nope"):
            dump_detections({}, tmp_path / "nope" / "d.txt")

    def test_report_table(self):
        text = format_report({1: 0.5, 2: None, 3: 1.0}, 0.75,
                             class_names={1: "crate"})
        assert "crate" in text
        assert "undefined" in text
        assert "class-3" in text
        lines = [l for l in text.splitlines() if l.strip()]
        assert lines[-1].startswith("mAP")
        assert "0.7500" in lines[-1]

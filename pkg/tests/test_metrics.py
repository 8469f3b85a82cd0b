import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from insmos import metrics as MT


def box(shape, y0, y1, x0, x1):
    m = np.zeros(shape, dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


def ap_oracle(preds, scores, gts, thr):
    """Single-sample AP with explicit loops over the ranked list."""
    order = sorted(range(len(preds)), key=lambda i: (-scores[i], i))
    taken, tp = set(), []
    for p in order:
        cands = [(MT.iou(preds[p], gts[g]), -g) for g in range(len(gts))
                 if g not in taken and MT.iou(preds[p], gts[g]) >= thr]
        if cands:
            taken.add(-max(cands)[1])
            tp.append(True)
        else:
            tp.append(False)
    prec, rec = [], []
    hits = 0
    for i, t in enumerate(tp):
        hits += t
        prec.append(hits / (i + 1))
        rec.append(hits / len(gts))
    total = 0.0
    for r in np.linspace(0, 1, 101):
        ps = [prec[i] for i in range(len(tp)) if rec[i] >= r]
        total += max(ps) if ps else 0.0
    return total / 101


class TestIoU:
    def test_identical(self):
        m = box((4, 4), 0, 2, 0, 2)
        assert MT.iou(m, m) == 1.0

    def test_disjoint(self):
        assert MT.iou(box((4, 4), 0, 2, 0, 2), box((4, 4), 2, 4, 2, 4)) == 0.0

    def test_half_overlap(self):
        assert MT.iou(box((4, 4), 0, 2, 0, 2), box((4, 4), 0, 2, 1, 3)) == pytest.approx(1 / 3)

    def test_empty_conventions(self):
        z = np.zeros((3, 3), bool)
        assert MT.iou(z, z) == 1.0
        assert MT.iou(z, box((3, 3), 0, 1, 0, 1)) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            MT.iou(np.zeros((2, 2)), np.zeros((3, 3)))


class TestMIoU:
    def setup_method(self):
        self.a = box((6, 6), 0, 3, 0, 3)
        self.b = box((6, 6), 3, 6, 3, 6)

    def test_perfect(self):
        assert MT.miou_ins_sample([self.b, self.a], [self.a, self.b]) == 1.0

    def test_no_predictions(self):
        assert MT.miou_ins_sample([], [self.a]) == 0.0

    def test_two_gt_one_perfect(self):
        assert MT.miou_ins_sample([self.a], [self.a, self.b]) == 0.5

    def test_dataset_skips_samples_without_gt(self):
        assert MT.miou_ins([([self.a], [self.a]), ([self.a], [])]) == 1.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
    def test_matches_exhaustive(self, n_gt, n_pred, seed):
        r = np.random.default_rng(seed)
        gts = [r.random((5, 5)) > 0.5 for _ in range(n_gt)]
        preds = [r.random((5, 5)) > 0.5 for _ in range(n_pred)]
        ious = MT.iou_matrix(gts, preds)
        k = min(n_gt, n_pred)
        best = max(sum(ious[g, p] for g, p in zip(gs, ps))
                   for gs in itertools.permutations(range(n_gt), k)
                   for ps in itertools.permutations(range(n_pred), k))
        assert MT.miou_ins_sample(preds, gts) == pytest.approx(best / n_gt, abs=1e-12)

    def test_foreground(self):
        full = np.ones((4, 4), bool)
        half = box((4, 4), 0, 2, 0, 4)
        assert MT.miou_01_sample([full], [half]) == 0.5
        assert MT.miou_01_sample([self.a, self.b], [self.a | self.b]) == 1.0
        assert MT.miou_01_sample([], [], shape=(4, 4)) == 1.0

    def test_relabeling_invariance(self, rng):
        gts = [rng.random((5, 5)) > 0.5 for _ in range(3)]
        preds = [rng.random((5, 5)) > 0.5 for _ in range(3)]
        a = MT.miou_ins_sample(preds, gts)
        assert MT.miou_ins_sample(preds[::-1], gts[::-1]) == pytest.approx(a, abs=1e-12)


class TestAP:
    def setup_method(self):
        self.g = box((8, 8), 0, 4, 0, 4)
        self.far = box((8, 8), 5, 8, 5, 8)

    def test_perfect(self):
        assert MT.map_coco([([self.g], [0.9], [self.g])]) == 1.0

    def test_two_prediction_pr_case(self):
        ap = MT.average_precision([([self.far, self.g], [0.9, 0.4], [self.g])], 0.5)
        assert abs(ap - 0.5) <= 1e-6

    def test_no_predictions(self):
        assert MT.map_coco([([], [], [self.g])]) == 0.0

    def test_no_gt_conventions(self):
        assert MT.average_precision([([], [], [])], 0.5) == 1.0
        assert MT.average_precision([([self.g], [0.5], [])], 0.5) == 0.0

    def test_trailing_false_positive_is_free(self):
        base = [([self.g], [0.9], [self.g])]
        extra = [([self.g, self.far], [0.9, 0.0], [self.g])]
        assert MT.map_coco(extra) == MT.map_coco(base) == 1.0

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 3), st.integers(0, 2**31 - 1))
    def test_matches_pr_oracle(self, n_pred, n_gt, seed):
        r = np.random.default_rng(seed)
        gts = [box((8, 8), *sorted(r.integers(0, 9, 2) + [0, 1]), *sorted(r.integers(0, 9, 2) + [0, 1]))
               for _ in range(n_gt)]
        preds = [g.copy() for g in gts]
        preds = [np.roll(preds[r.integers(n_gt)], r.integers(-2, 3), axis=1) for _ in range(n_pred)]
        scores = list(r.random(n_pred))
        for thr in (0.5, 0.75):
            got = MT.average_precision([(preds, scores, gts)], thr)
            assert got == pytest.approx(ap_oracle(preds, scores, gts, thr), abs=1e-12)

    def test_range_and_relabeling(self, rng):
        preds = [rng.random((6, 6)) > 0.4 for _ in range(4)]
        gts = [rng.random((6, 6)) > 0.4 for _ in range(2)]
        s = list(rng.random(4))
        a = MT.map_coco([(preds, s, gts)])
        assert 0.0 <= a <= 1.0
        assert MT.map_coco([(preds[::-1], s[::-1], gts[::-1])]) == a


class TestFlowMetrics:
    def test_identity(self, rng):
        F = rng.normal(size=(2, 4, 4))
        assert MT.epe(F, F) == 0.0 and MT.ratio_1px(F, F) == 1.0

    def test_unit_offset_is_not_under_one_pixel(self):
        F = np.zeros((2, 3, 3))
        G = F.copy()
        G[0] = 1.0
        assert MT.epe(F, G) == 1.0 and MT.ratio_1px(F, G) == 0.0

    def test_half_pixel_offset(self):
        F = np.zeros((2, 3, 3))
        G = F.copy()
        G[0] = 0.5
        assert MT.ratio_1px(F, G) == 1.0

    def test_345(self):
        G = np.stack([np.full((2, 2), 3.0), np.full((2, 2), 4.0)])
        assert MT.epe(np.zeros_like(G), G) == 5.0

    def test_translation_invariant(self, rng):
        F, G = rng.normal(size=(2, 5, 5)), rng.normal(size=(2, 5, 5))
        c = np.array([3.0, -1.0])[:, None, None]
        assert MT.epe(F + c, G + c) == pytest.approx(MT.epe(F, G), abs=1e-12)

    def test_empty_valid_set(self):
        with pytest.raises(ValueError):
            MT.epe(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), np.zeros((2, 2), bool))


class TestFMeasure:
    def test_fixtures(self):
        g = box((2, 2), 0, 1, 0, 2)
        assert MT.f_measure(g, g) == 1.0
        assert MT.f_measure(np.zeros((2, 2)), g) == 0.0
        p = np.array([[1, 0], [1, 0]], bool)
        assert MT.f_measure(p, g) == 0.5


def test_static_rejected():
    s = box((4, 4), 0, 2, 0, 2)
    assert MT.static_rejected([], s)
    assert MT.static_rejected([box((4, 4), 0, 1, 0, 1)], s)
    assert not MT.static_rejected([box((4, 4), 0, 1, 0, 2)], s)


def test_report_ranges_and_serialization():
    rng = np.random.default_rng(3)
    recs = []
    for i in range(4):
        g = [rng.random((6, 6)) > 0.5]
        recs.append({"id": i, "pred_masks": [rng.random((6, 6)) > 0.5], "scores": [0.7], "gt_masks": g,
                     "shape": (6, 6), "flow_pred": rng.normal(size=(2, 6, 6)), "flow_gt": rng.normal(size=(2, 6, 6))})
    rep = MT.evaluate(recs)
    for v in (rep.mAP, rep.mIoU_ins, rep.mIoU_01, rep.f_measure, rep.ratio_1px):
        assert 0.0 <= v <= 1.0
    assert rep.EPE >= 0
    assert json.loads(rep.to_json())["samples"][0]["id"] == 0
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("id,num_gt") and len(lines) == 5
    assert_allclose(rep.mIoU_01, np.mean([s["mIoU_01"] for s in rep.samples]))

"""Detection-metric tests against hand-computed and brute-force oracles."""

import numpy as np
import pytest

from tdconv import metrics as M
from tdconv import tdc


def single_frame(dets, gts, iou_thr=0.5):
    return M.match_detections({0: dets}, {0: gts}, iou_thr=iou_thr)


class TestIou:
    def test_identical(self):
        assert M.iou((3, 4, 5, 6), (3, 4, 5, 6)) == 1.0

    def test_disjoint(self):
        assert M.iou((0, 0, 2, 2), (10, 10, 2, 2)) == 0.0

    def test_touching_edges_is_zero(self):
        # boxes sharing only an edge have zero intersection area
        assert M.iou((0, 0, 2, 2), (2, 0, 2, 2)) == 0.0

    def test_corner_overlap_one_seventh(self):
        # intersection 1, union 4 + 4 - 1 = 7
        assert M.iou((0, 0, 2, 2), (1, 1, 2, 2)) == pytest.approx(1 / 7, abs=1e-15)

    def test_zero_area_degenerate(self):
        assert M.iou((0, 0, 0, 2), (0, 0, 2, 2)) == 0.0

    def test_negative_extent_raises(self):
        with pytest.raises(ValueError):
            M.iou((0, 0, -1, 2), (0, 0, 2, 2))

    def test_containment(self):
        # 2x2 inside 4x4: intersection 4, union 16
        assert M.iou((0, 0, 4, 4), (0, 0, 2, 2)) == pytest.approx(0.25)

    def test_symmetry_random(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            a = tuple(rng.uniform(0.5, 10, size=4))
            b = tuple(rng.uniform(0.5, 10, size=4))
            assert M.iou(a, b) == pytest.approx(M.iou(b, a), abs=1e-15)
            assert 0.0 <= M.iou(a, b) <= 1.0


def greedy_oracle(dets, gts, iou_thr=0.5):
    """Reference matcher: literal restatement of the greedy protocol."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    used = set()
    labels = [None] * len(dets)
    for i in order:
        box = dets[i][0]
        candidates = [
            (M.iou(box, g), gi) for gi, g in enumerate(gts)
            if gi not in used and M.iou(box, g) >= iou_thr
        ]
        if candidates:
            # highest IoU wins, lowest gt index on ties
            best = max(candidates, key=lambda c: (c[0], -c[1]))
            used.add(best[1])
            labels[i] = best[1]
    return order, labels


class TestMatching:
    def test_exact_hit(self):
        m = single_frame([((5, 5, 3, 3), 0.9)], [(5, 5, 3, 3)])
        assert m.tp == 1 and m.fn == 0
        assert list(m.is_tp) == [True]

    def test_double_detection_single_gt(self):
        m = single_frame([((5, 5, 3, 3), 0.9), ((5, 5, 3, 3), 0.8)], [(5, 5, 3, 3)])
        assert list(m.is_tp) == [True, False]
        assert m.tp == 1 and m.fn == 0

    def test_confidence_tie_insertion_order(self):
        # equal confidence: first-inserted det claims the gt
        m = single_frame([((5, 5, 3, 3), 0.5), ((5, 5, 3, 3), 0.5)], [(5, 5, 3, 3)])
        assert m.assignments == [(0, 0, 0)]

    def test_iou_tie_lowest_gt_index(self):
        # det overlaps both gts equally; must take gt 0
        m = single_frame([((5, 5, 4, 4), 0.9)], [(5, 4, 4, 4), (5, 6, 4, 4)])
        assert m.assignments == [(0, 0, 0)]

    def test_crafted_three_det_two_gt_vs_oracle(self):
        gts = [(10.0, 10.0, 4.0, 4.0), (13.0, 10.0, 4.0, 4.0)]
        dets = [
            ((11.0, 10.0, 4.0, 4.0), 0.7),  # overlaps both
            ((10.0, 10.0, 4.0, 4.0), 0.9),  # exact on gt 0
            ((30.0, 30.0, 4.0, 4.0), 0.8),  # pure FP
        ]
        order, labels = greedy_oracle(dets, gts)
        m = single_frame(dets, gts)
        got = {det_idx: gt_idx for _f, det_idx, gt_idx in m.assignments}
        want = {i: labels[i] for i in range(len(dets)) if labels[i] is not None}
        assert got == want
        assert [dets[i][1] for i in order] == list(m.confidences)

    def test_random_instances_vs_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(40):
            n_gt = rng.integers(1, 5)
            n_det = rng.integers(0, 7)
            gts = [tuple(rng.uniform(2, 30, size=2)) + (4.0, 4.0) for _ in range(n_gt)]
            dets = []
            for _ in range(n_det):
                base = gts[rng.integers(0, n_gt)]
                jitter = rng.uniform(-3, 3, size=2)
                conf = round(float(rng.uniform(0, 1)), 2)  # rounded to force ties
                dets.append(((base[0] + jitter[0], base[1] + jitter[1], 4.0, 4.0), conf))
            _order, labels = greedy_oracle(dets, gts)
            m = single_frame(dets, gts)
            got = {d: g for _f, d, g in m.assignments}
            want = {i: labels[i] for i in range(len(dets)) if labels[i] is not None}
            assert got == want

    def test_frames_independent(self):
        m = M.match_detections(
            {0: [((5, 5, 3, 3), 0.9)], 1: [((5, 5, 3, 3), 0.8)]},
            {0: [(5, 5, 3, 3)], 1: [(20, 20, 3, 3)]},
        )
        assert m.tp == 1 and m.fn == 1 and m.num_gt == 2

    def test_tp_plus_fn_equals_gt(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            gts = [tuple(rng.uniform(2, 30, size=2)) + (4.0, 4.0) for _ in range(3)]
            dets = [(tuple(rng.uniform(2, 30, size=2)) + (4.0, 4.0), float(rng.uniform(0, 1)))
                    for _ in range(5)]
            m = single_frame(dets, gts)
            assert m.tp + m.fn == m.num_gt
            gt_claims = [a[2] for a in m.assignments]
            assert len(gt_claims) == len(set(gt_claims))


class TestPrf1:
    def test_perfect(self):
        m = single_frame([((5, 5, 3, 3), 0.9)], [(5, 5, 3, 3)])
        assert M.prf1(m) == (1.0, 1.0, 1.0)

    def test_empty_detections(self):
        m = single_frame([], [(5, 5, 3, 3)])
        assert M.prf1(m) == (0.0, 0.0, 0.0)

    def test_one_tp_one_fp(self):
        m = single_frame([((5, 5, 3, 3), 0.9), ((20, 20, 3, 3), 0.8)], [(5, 5, 3, 3)])
        p, r, f1 = M.prf1(m)
        assert (p, r) == (0.5, 1.0)
        assert f1 == pytest.approx(2 / 3, abs=1e-15)

    def test_recall_non_increasing_in_threshold(self):
        rng = np.random.default_rng(5)
        gts = [tuple(rng.uniform(5, 60, size=2)) + (4.0, 4.0) for _ in range(6)]
        dets = [((g[0] + rng.uniform(-2, 2), g[1], 4.0, 4.0), float(rng.uniform(0, 1)))
                for g in gts for _ in range(2)]
        m = single_frame(dets, gts)
        last = 1.1
        for thr in np.linspace(0, 1, 21):
            r = M.prf1(m, thr)[1]
            assert r <= last + 1e-12
            last = r

    def test_best_f1_threshold(self):
        # keeping only the 0.9 TP yields F1=1; including the FP drops it
        m = single_frame([((5, 5, 3, 3), 0.9), ((20, 20, 3, 3), 0.8)], [(5, 5, 3, 3)])
        thr = M.best_f1_threshold(m)
        assert M.prf1(m, thr)[2] == 1.0


class TestAp50:
    def test_all_found_first(self):
        m = single_frame(
            [((5, 5, 3, 3), 0.9), ((15, 5, 3, 3), 0.8), ((40, 40, 3, 3), 0.2)],
            [(5, 5, 3, 3), (15, 5, 3, 3)],
        )
        assert M.ap50(m) == 1.0

    def test_fp_then_tp_half(self):
        m = single_frame([((20, 20, 3, 3), 0.9), ((5, 5, 3, 3), 0.8)], [(5, 5, 3, 3)])
        assert M.ap50(m) == pytest.approx(0.5, abs=1e-15)

    def test_tp_then_fp_one(self):
        m = single_frame([((5, 5, 3, 3), 0.9), ((20, 20, 3, 3), 0.8)], [(5, 5, 3, 3)])
        assert M.ap50(m) == pytest.approx(1.0, abs=1e-15)

    def test_zero_gt_raises(self):
        m = M.match_detections({0: [((5, 5, 3, 3), 0.9)]}, {0: []})
        with pytest.raises(ValueError):
            M.ap50(m)

    def test_no_detections_zero(self):
        m = single_frame([], [(5, 5, 3, 3)])
        assert M.ap50(m) == 0.0

    def test_monotone_rescale_invariance(self):
        rng = np.random.default_rng(23)
        for _ in range(20):
            n = int(rng.integers(3, 12))
            m = M.MatchResult(
                confidences=np.sort(rng.uniform(0, 1, size=n))[::-1],
                is_tp=rng.uniform(size=n) < 0.5,
                num_gt=int(rng.integers(1, 8)),
            )
            if m.tp > m.num_gt:
                m.is_tp = m.is_tp.copy()
                m.is_tp[m.num_gt:] = False
            base = M.ap50(m)
            for fn in (lambda c: c ** 3, lambda c: 0.1 + 0.5 * c, np.tanh):
                rescaled = M.MatchResult(
                    confidences=fn(m.confidences), is_tp=m.is_tp, num_gt=m.num_gt)
                assert M.ap50(rescaled) == pytest.approx(base, abs=1e-15)

    def test_pr_curve_matches_counts(self):
        m = single_frame([((5, 5, 3, 3), 0.9), ((20, 20, 3, 3), 0.8)], [(5, 5, 3, 3)])
        recall, precision = M.pr_curve(m)
        assert list(recall) == [1.0, 1.0]
        assert list(precision) == [1.0, 0.5]


class TestCounting:
    def test_conv2d_same_pad_macs(self):
        # 3x3 kernel, 1->1 channels, 8x8 same-pad output: 64 * 9
        assert M.conv_macs(out_elems=64, c_in=1, k_elems=9) == 576

    def test_fused_tdcr_param_example(self):
        # 8->8 channels, Kt=5, 3x3 spatial: 8*8*5*3*3 + 8 = 2888
        mod = tdc.TdcrModule.init(8, 8, kt=5)
        fused = tdc.reparameterize(mod)
        assert fused.param_count() == 2888
        params, _ = M.count_params_flops(fused, (1, 8, 5, 16, 16))
        assert params == 2888

    def test_fused_flops_below_branched(self):
        mod = tdc.TdcrModule.init(4, 8, kt=5)
        fused = tdc.reparameterize(mod)
        shape = (1, 4, 5, 16, 16)
        _, branched = M.count_params_flops(mod, shape)
        _, fused_macs = M.count_params_flops(fused, shape)
        assert fused_macs < branched

    def test_unknown_type_raises(self):
        with pytest.raises(TypeError):
            M.count_params_flops(object(), (1, 1, 5, 8, 8))

    def test_visitor_table(self):
        v = M.CountVisitor()
        v.add("a", 10, 100)
        v.add("b", 5, 50)
        assert v.params == 15 and v.macs == 150
        assert "total" in v.table()

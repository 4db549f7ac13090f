import math

import numpy as np
import pytest

from oracles import brute_force_tie_ap, jittered_predictions, naive_map, to_oracle_inputs
from vecmap.data import GeneratorParams, generate_scenes
from vecmap.evaluation import (
    EASY_THRESHOLDS,
    HARD_THRESHOLDS,
    DetectionRecord,
    EvalError,
    annotate,
    ap_at_threshold,
    average_precision,
    detections_from_scenes,
    greedy_match,
    loc_quality_histogram,
    map_report,
    recall_vs_score,
    score_histograms,
)
from vecmap.geometry import MapScene, PolylineInstance


def line(x, y0=0.2, y1=0.8, n=4, class_id=1):
    return PolylineInstance(class_id, np.linspace([x, y0], [x, y1], n))


def random_set(seed, n_scenes=5):
    rng = np.random.default_rng(seed)
    gts = generate_scenes(seed, n_scenes, GeneratorParams(n_points=6)).scenes
    preds, scores = jittered_predictions(gts, rng)
    return gts, preds, scores


class TestAp:
    def test_single_true_positive(self):
        gt = MapScene([line(0.3)])
        dets = detections_from_scenes([MapScene([line(0.3)])], [[0.7]])
        assert ap_at_threshold(dets, [gt], 1, 0.5) == 1.0

    def test_no_predictions(self):
        assert ap_at_threshold([], [MapScene([line(0.3)])], 1, 0.5) == 0.0

    def test_tp_then_fp(self):
        gt = MapScene([line(0.3)])
        dets = detections_from_scenes([MapScene([line(0.3), line(0.9)])], [[0.9, 0.8]])
        assert greedy_match(dets, [gt], 1, 0.5).tp == [True, False]
        assert ap_at_threshold(dets, [gt], 1, 0.5) == 1.0

    def test_fp_then_tp_hand_value(self):
        gt = MapScene([line(0.3)])
        dets = detections_from_scenes([MapScene([line(0.3), line(0.9)])], [[0.5, 0.8]])
        assert ap_at_threshold(dets, [gt], 1, 0.5) == 0.5

    def test_average_precision_hand(self):
        # ranks: T F T F, 3 GTs: precision at TPs 1 and 2/3
        assert average_precision([True, False, True, False], 3) == pytest.approx((1 + 2 / 3) / 3, abs=1e-15)

    def test_other_scene_gt_not_matched(self):
        gts = [MapScene([line(0.3)]), MapScene([line(0.7)])]
        dets = detections_from_scenes([MapScene([]), MapScene([line(0.3)])], [[], [0.9]])
        assert ap_at_threshold(dets, gts, 1, 0.5) == 0.0

    def test_invalid_threshold(self):
        with pytest.raises(EvalError):
            ap_at_threshold([], [], 1, 0.0)

    @pytest.mark.parametrize("score", [-0.1, 1.5])
    def test_score_range(self, score):
        with pytest.raises(EvalError):
            DetectionRecord(0, 1, score, np.zeros((2, 2)))

    @pytest.mark.parametrize("seed", range(8))
    def test_tie_orderings_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        gts = [MapScene([line(0.2), line(0.5), line(0.8)])]
        insts = [line(float(np.clip(x, 0, 1))) for x in rng.uniform(0.1, 0.9, 6)]
        scores = [float(s) for s in rng.choice([0.3, 0.6, 0.9], 6)]
        preds = [MapScene(insts)]
        dets = detections_from_scenes(preds, [scores])
        odets, ogts = to_oracle_inputs(preds, [scores], gts)
        for tau in (0.5, 1.5, 3.0):
            assert ap_at_threshold(dets, gts, 1, tau) == brute_force_tie_ap(odets, ogts, 1, tau)


class TestReport:
    def test_perfect(self):
        gts = generate_scenes(0, 4).scenes
        rep = map_report(detections_from_scenes(gts, [[1.0] * len(s) for s in gts]), gts)
        assert rep.map_hard == rep.map_easy == 1.0

    def test_empty(self):
        gts = generate_scenes(0, 4).scenes
        rep = map_report([], gts)
        assert rep.map_hard == rep.map_easy == 0.0

    def test_thresholds(self):
        assert HARD_THRESHOLDS == (0.2, 0.5, 1.0) and EASY_THRESHOLDS == (0.5, 1.0, 1.5)

    def test_missing_class_warns(self):
        gts = [MapScene([line(0.3)])]
        rep = map_report(detections_from_scenes(gts, [[1.0]]), gts)
        assert len(rep.metadata["warnings"]) == 2
        assert rep.ap["lane_divider"]["0.5"] == 1.0
        assert rep.map_easy == pytest.approx(1 / 3)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_naive_and_ordering(self, seed):
        gts, preds, scores = random_set(seed)
        rep = map_report(detections_from_scenes(preds, scores), gts)
        ref = naive_map(*to_oracle_inputs(preds, scores, gts))
        assert rep.map_hard == ref["hard"] and rep.map_easy == ref["easy"]
        assert rep.map_hard <= rep.map_easy

    @pytest.mark.parametrize("seed", range(4))
    def test_ap_monotone_in_threshold(self, seed):
        gts, preds, scores = random_set(seed + 100)
        dets = detections_from_scenes(preds, scores)
        for c in range(3):
            aps = [ap_at_threshold(dets, gts, c, t) for t in (0.1, 0.2, 0.5, 1.0, 1.5, 3.0)]
            assert aps == sorted(aps)

    def test_rank_invariance(self):
        gts, preds, scores = random_set(7)
        a = map_report(detections_from_scenes(preds, scores), gts)
        squashed = [[s ** 3 for s in sc] for sc in scores]
        b = map_report(detections_from_scenes(preds, squashed), gts)
        assert a.ap == b.ap

    def test_report_json(self):
        gts, preds, scores = random_set(1)
        import json

        d = json.loads(map_report(detections_from_scenes(preds, scores), gts).to_json())
        assert set(d["ap"]) == {"pedestrian_crossing", "lane_divider", "road_boundary"}
        assert set(d["ap"]["lane_divider"]) == {"0.2", "0.5", "1", "1.5"}
        assert "tp_assignment" in d["metadata"]


class TestDiagnostics:
    def fixture(self):
        gts = [MapScene([line(0.2), line(0.5), line(0.8)])]
        preds = [MapScene([line(0.2), line(0.5), line(0.95)])]
        return detections_from_scenes(preds, [[0.9, 0.6, 0.3]]), gts

    def test_recall_curve_hand(self):
        dets, gts = self.fixture()
        curve = recall_vs_score(dets, gts, 0.5, [0.0, 0.5, 0.7, 0.95])
        assert curve.recall == [2 / 3, 2 / 3, 1 / 3, 0.0]

    def test_recall_perfect_at_zero(self):
        gts = generate_scenes(0, 3).scenes
        dets = detections_from_scenes(gts, [[0.8] * len(s) for s in gts])
        assert recall_vs_score(dets, gts).recall[0] == 1.0

    @pytest.mark.parametrize("seed", range(5))
    def test_recall_non_increasing(self, seed):
        gts, preds, scores = random_set(seed)
        r = recall_vs_score(detections_from_scenes(preds, scores), gts).recall
        assert all(a >= b for a, b in zip(r, r[1:]))

    def test_grid_validated(self):
        with pytest.raises(EvalError):
            recall_vs_score([], [], 0.5, [0.5, 0.2])

    def test_all_tp_single_bin(self):
        gts = generate_scenes(0, 3).scenes
        dets = detections_from_scenes(gts, [[0.95] * len(s) for s in gts])
        tp, fp = score_histograms(dets, gts, 0.5, 10)
        assert tp.freq[9] == 1.0 and sum(tp.freq) == 1.0
        assert fp.empty and fp.count == 0

    def test_histogram_hand(self):
        dets, gts = self.fixture()
        tp, fp = score_histograms(dets, gts, 0.5, 2)
        assert tp.freq == [0.0, 1.0] and fp.freq == [1.0, 0.0]
        assert tp.to_csv().splitlines()[0] == "bin_lo,bin_hi,freq"

    @pytest.mark.parametrize("seed", range(5))
    def test_frequencies_sum_to_one(self, seed):
        gts, preds, scores = random_set(seed)
        dets = detections_from_scenes(preds, scores)
        for h in (*score_histograms(dets, gts, 0.5, 7), loc_quality_histogram(dets, gts, 0.3, 7)):
            if not h.empty:
                assert abs(math.fsum(h.freq) - 1.0) <= 1e-12

    def test_loc_quality_perfect(self):
        gts = generate_scenes(0, 3).scenes
        dets = detections_from_scenes(gts, [[0.95] * len(s) for s in gts])
        h = loc_quality_histogram(dets, gts, 0.9, 10)
        assert h.freq[0] == 1.0

    def test_loc_quality_empty_below_cut(self):
        dets, gts = self.fixture()
        h = loc_quality_histogram(dets, gts, 0.95)
        assert h.empty

    def test_loc_quality_hand(self):
        dets, gts = self.fixture()
        # cut 0.5 keeps two exact matches, distance 0
        h = loc_quality_histogram(dets, gts, 0.5, bins=3, max_distance=1.5)
        assert h.freq == [1.0, 0.0, 0.0]
        # cut 0.0 adds the third, 0.15 * 30 m = 4.5 m away -> clipped into the last bin
        h = loc_quality_histogram(dets, gts, 0.0, bins=3, max_distance=1.5)
        assert h.freq == [2 / 3, 0.0, 1 / 3]

    def test_annotate(self):
        dets, gts = self.fixture()
        ann = annotate(dets, gts, 0.5)
        assert [a.matched_gt is not None for a in ann] == [True, True, False]
        assert ann[0].chamfer == 0.0
        assert dets[0].matched_gt is None

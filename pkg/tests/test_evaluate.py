import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from triground.evaluate import (Detection, GroundingPrediction, average_precision, detection_metrics,
                                grounding_metrics, oracle_predictions, read_predictions, write_predictions)
from triground.geometry import OrientedBox9
from triground.scenes import Prompt, Scene, SceneObject

# ranked hits T, F, T against two ground truths; every-point interpolated area
# 0.5 * 1 + 0.5 * 2/3, computed by hand from the PR curve
TOY_AP = 0.8333333333333334


def toy_scene():
    objs = [SceneObject(OrientedBox9((0, 0, 0.3), (0.5, 0.5, 0.6)), 8, 0),
            SceneObject(OrientedBox9((1.5, 0, 0.3), (0.5, 0.5, 0.6), (0.4, 0, 0)), 8, 1),
            SceneObject(OrientedBox9((-1.5, 1, 0.4), (1.2, 0.8, 0.8)), 1, 2)]
    prompts = [Prompt("the red box", 0, False, 0), Prompt("the box on the left", 1, True, 4),
               Prompt("the blue table", 2, False, 0)]
    return Scene("toy", [], objs, prompts)


class TestAveragePrecision:
    def test_toy_pr_curve(self):
        ap, ar = average_precision([0.9, 0.8, 0.7], [True, False, True], 2)
        assert ap == pytest.approx(TOY_AP, abs=1e-12) and ar == 1.0

    def test_toy_through_detection_matching(self):
        s = toy_scene()
        dets = [Detection("toy", list(s.objects[0].box.to_vector()), 0.9, 8),
                Detection("toy", [3, 3, 0.3, 0.5, 0.5, 0.6, 0, 0, 0], 0.8, 8),
                Detection("toy", list(s.objects[1].box.to_vector()), 0.7, 8)]
        res = detection_metrics([s], dets)
        assert res.per_category["box"].ap25 == pytest.approx(TOY_AP, abs=1e-12)
        assert res.per_category["table"].ap25 == 0.0

    def test_duplicate_detection_is_false_positive(self):
        s = toy_scene()
        box = list(s.objects[2].box.to_vector())
        res = detection_metrics([s], [Detection("toy", box, 0.9, 1), Detection("toy", box, 0.8, 1)])
        assert res.per_category["table"].ap50 == 1.0 and res.per_category["table"].ar50 == 1.0

    def test_empty(self):
        assert average_precision([], [], 3) == (0.0, 0.0)

    @given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), max_size=20), st.integers(1, 10))
    def test_bounded_and_below_recall(self, items, extra):
        scores = [s for s, _ in items]
        tp = [t for _, t in items]
        n_gt = sum(tp) + extra - 1 if sum(tp) else extra
        ap, ar = average_precision(scores, tp, n_gt)
        assert 0.0 <= ap <= ar <= 1.0


class TestMetrics:
    def test_oracle_grounding(self):
        s = toy_scene()
        res = grounding_metrics([s], oracle_predictions([s], "ground"))
        assert res.ap25 == res.ap50 == 1.0

    def test_oracle_detection(self):
        s = toy_scene()
        res = detection_metrics([s], oracle_predictions([s], "detect"))
        assert res.ap50 == 1.0 and res.overall.ar50 == 1.0

    def test_no_predictions(self):
        s = toy_scene()
        for task, fn in (("ground", grounding_metrics), ("detect", detection_metrics)):
            res = fn([s], [])
            assert res.ap25 == res.ap50 == res.overall.ar25 == res.overall.ar50 == 0.0, task

    def test_grounding_is_top1_accuracy(self):
        s = toy_scene()
        preds = oracle_predictions([s], "ground")
        preds[1] = GroundingPrediction("toy", 1, list(s.objects[2].box.to_vector()), 1.0,
                                       [list(s.objects[2].box.to_vector()) + [1.0],
                                        list(s.objects[1].box.to_vector()) + [0.5]])
        res = grounding_metrics([s], preds)
        assert res.ap25 == pytest.approx(2 / 3)
        assert res.overall.ar25 == 1.0          # the right box was among the candidates
        assert res.splits["view_dep"].ap25 == 0.0 and res.splits["view_indep"].ap25 == 1.0
        assert res.splits["hard"].n + res.splits["easy"].n == 3
        assert res.splits["view_dep"].n + res.splits["view_indep"].n == 3

    def test_prediction_file_round_trip(self, tmp_path):
        s = toy_scene()
        for task in ("ground", "detect"):
            preds = oracle_predictions([s], task)
            write_predictions(preds, tmp_path / f"{task}.jsonl")
            assert read_predictions(tmp_path / f"{task}.jsonl", task) == preds

    def test_values_in_unit_interval(self):
        s = toy_scene()
        rng = np.random.default_rng(0)
        dets = [Detection("toy", list(o.box.to_vector() + rng.normal(0, 0.1, 9)), float(rng.uniform()), o.category)
                for o in s.objects for _ in range(3)]
        res = detection_metrics([s], dets)
        for _, _, ap25, ap50, ar25, ar50, _ in res.rows():
            assert 0 <= ap25 <= ar25 <= 1 and 0 <= ap50 <= ar50 <= 1

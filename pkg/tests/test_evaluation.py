import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bonecheck import evaluation as ev


def pairwise_auroc(scores, truths):
    """Brute-force oracle: fraction of (abnormal, normal) pairs won, ties 1/2."""
    pos = [s for s, t in zip(scores, truths) if t == "abnormal"]
    neg = [s for s, t in zip(scores, truths) if t == "normal"]
    wins = 0.0
    for p, n in itertools.product(pos, neg):
        if p > n:
            wins += 1.0
        elif p == n:
            wins += 0.5
    return wins / (len(pos) * len(neg))


def kappa_first_principles(tp, fn, fp, tn):
    """Chance-corrected agreement via explicit marginal products."""
    n = tp + fn + fp + tn
    p_o = (tp + tn) / n
    pred_abn, pred_norm = (tp + fp) / n, (fn + tn) / n
    truth_abn, truth_norm = (tp + fn) / n, (fp + tn) / n
    p_e = pred_abn * truth_abn + pred_norm * truth_norm
    if p_e == 1.0:
        return 0.0
    return (p_o - p_e) / (1.0 - p_e)


def _pred(truth, prob, study_type="wrist", sid="s"):
    return ev.StudyPrediction(sid, study_type, truth, [prob])


class TestAggregation:
    def test_mean_by_hand(self):
        assert ev.aggregate_study([0.2, 0.6, 0.1]) == pytest.approx(0.3)

    def test_single_view(self):
        assert ev.aggregate_study([0.73]) == pytest.approx(0.73)

    def test_constant_views(self):
        assert ev.aggregate_study([0.4, 0.4, 0.4]) == pytest.approx(0.4)

    def test_empty_rejected(self):
        with pytest.raises(ev.MetricsError):
            ev.aggregate_study([])

    def test_permutation_invariance(self):
        probs = [0.1, 0.5, 0.9, 0.3]
        assert ev.aggregate_study(probs) == ev.aggregate_study(probs[::-1])


class TestDecide:
    def test_low_score_is_abnormal(self):
        assert ev.decide(0.05) == "abnormal"

    def test_high_score_is_normal(self):
        assert ev.decide(0.88) == "normal"

    def test_boundary_goes_to_normal(self):
        assert ev.decide(0.5) == "normal"

    def test_threshold_consistency(self):
        for p in np.linspace(0, 1, 101):
            assert (ev.decide(p) == "normal") == (1 - p <= 0.5)


class TestConfusion:
    def test_all_correct(self):
        preds = [_pred("abnormal", 0.1), _pred("normal", 0.9)]
        cm = ev.confusion(preds)
        assert (cm.tp, cm.fn, cm.fp, cm.tn) == (1, 0, 0, 1)

    def test_inversion_swaps_cells(self):
        preds = [_pred("abnormal", 0.1), _pred("normal", 0.9)]
        inverted = [_pred("abnormal", 0.9), _pred("normal", 0.1)]
        cm, icm = ev.confusion(preds), ev.confusion(inverted)
        assert (icm.fn, icm.fp) == (cm.tp, cm.tn)

    def test_hand_built_twenty(self):
        preds = ([_pred("abnormal", 0.1)] * 8 + [_pred("abnormal", 0.9)] * 2
                 + [_pred("normal", 0.1)] * 1 + [_pred("normal", 0.9)] * 9)
        cm = ev.confusion(preds)
        assert (cm.tp, cm.fn, cm.fp, cm.tn) == (8, 2, 1, 9)

    def test_empty_rejected(self):
        with pytest.raises(ev.MetricsError):
            ev.confusion([])


class TestBasicMetrics:
    def test_hand_derived_matrix(self):
        m = ev.basic_metrics(ev.ConfusionMatrix(tp=8, fn=2, fp=1, tn=9))
        assert m["accuracy"] == pytest.approx(0.85, abs=1e-4)
        assert m["precision"] == pytest.approx(0.8889, abs=1e-4)
        assert m["recall"] == pytest.approx(0.8, abs=1e-4)
        assert m["specificity"] == pytest.approx(0.9, abs=1e-4)
        assert m["f1"] == pytest.approx(0.8421, abs=1e-4)

    def test_perfect_matrix(self):
        m = ev.basic_metrics(ev.ConfusionMatrix(tp=5, fn=0, fp=0, tn=5))
        assert all(m[k] == 1.0 for k in ("accuracy", "precision", "recall",
                                         "specificity", "f1"))

    def test_zero_denominator_reported_absent(self):
        m = ev.basic_metrics(ev.ConfusionMatrix(tp=0, fn=3, fp=0, tn=2))
        assert m["precision"] is None
        assert m["recall"] == 0.0

    def test_monotonicity_fixing_an_error(self):
        worse = ev.ConfusionMatrix(tp=4, fn=3, fp=2, tn=5)
        better = ev.ConfusionMatrix(tp=5, fn=2, fp=2, tn=5)
        assert (ev.basic_metrics(better)["accuracy"]
                >= ev.basic_metrics(worse)["accuracy"])
        assert ev.cohen_kappa(better) >= ev.cohen_kappa(worse)


class TestCohenKappa:
    def test_perfect_agreement(self):
        assert ev.cohen_kappa(ev.ConfusionMatrix(tp=7, fn=0, fp=0, tn=3)) == 1.0

    def test_hand_marginals(self):
        assert ev.cohen_kappa(
            ev.ConfusionMatrix(tp=20, fn=5, fp=10, tn=15)) == pytest.approx(0.4)

    def test_degenerate_marginals_defined_zero(self):
        assert ev.cohen_kappa(ev.ConfusionMatrix(tp=10, fn=0, fp=0, tn=0)) == 0.0

    def test_against_first_principles_1000_random(self):
        rng = np.random.default_rng(17)
        for _ in range(1000):
            tp, fn, fp, tn = (int(v) for v in rng.integers(0, 40, size=4))
            if tp + fn + fp + tn == 0:
                continue
            cm = ev.ConfusionMatrix(tp=tp, fn=fn, fp=fp, tn=tn)
            assert abs(ev.cohen_kappa(cm)
                       - kappa_first_principles(tp, fn, fp, tn)) < 1e-12

    def test_range(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            tp, fn, fp, tn = (int(v) for v in rng.integers(0, 20, size=4))
            if tp + fn + fp + tn == 0:
                continue
            k = ev.cohen_kappa(ev.ConfusionMatrix(tp=tp, fn=fn, fp=fp, tn=tn))
            assert -1.0 - 1e-12 <= k <= 1.0 + 1e-12


class TestAuroc:
    def test_perfect_separation(self):
        assert ev.auroc([0.9, 0.8, 0.1, 0.2],
                        ["abnormal", "abnormal", "normal", "normal"]) == 1.0

    def test_all_ties(self):
        assert ev.auroc([0.5, 0.5, 0.5], ["abnormal", "normal", "normal"]) == 0.5

    def test_worked_example(self):
        scores = [0.1, 0.4, 0.35, 0.8]
        truths = ["normal", "normal", "abnormal", "abnormal"]
        assert ev.auroc(scores, truths) == pytest.approx(0.75)

    def test_single_class_rejected(self):
        with pytest.raises(ev.MetricsError):
            ev.auroc([0.1, 0.2], ["normal", "normal"])

    @given(st.lists(st.tuples(st.sampled_from([0.0, 0.25, 0.5, 0.6, 1.0]),
                              st.sampled_from(["normal", "abnormal"])),
                    min_size=2, max_size=12))
    @settings(max_examples=300, deadline=None)
    def test_matches_pairwise_brute_force(self, items):
        scores = [s for s, _ in items]
        truths = [t for _, t in items]
        if len(set(truths)) < 2:
            return
        assert abs(ev.auroc(scores, truths)
                   - pairwise_auroc(scores, truths)) < 1e-12


class TestReport:
    def _predictions(self):
        preds = []
        for i, t in enumerate(("elbow", "finger", "forearm", "hand",
                               "humerus", "shoulder", "wrist")):
            preds.append(ev.StudyPrediction(f"{t}/a{i}", t, "abnormal", [0.1, 0.2]))
            preds.append(ev.StudyPrediction(f"{t}/n{i}", t, "normal", [0.8]))
        return preds

    def test_perfect_classifier_rows(self):
        report = ev.report_from_predictions(self._predictions(), "valid")
        assert len(report.rows) == 7
        for row in report.rows + [report.overall]:
            assert row.kappa == 1.0
            assert row.metrics["auroc"] == 1.0

    def test_json_schema_fields(self):
        report = ev.report_from_predictions(self._predictions(), "valid")
        doc = report.as_dict()
        assert doc["split"] == "valid"
        assert len(doc["rows"]) == 7
        for row in doc["rows"] + [doc["overall"]]:
            for key in ("study_type", "n", "kappa", "precision", "recall",
                        "sensitivity", "specificity", "f1", "auroc", "accuracy"):
                assert key in row

    def test_coin_flip_kappa_near_zero(self):
        rng = np.random.default_rng(99)
        preds = []
        for i in range(500):
            truth = "abnormal" if rng.random() < 0.5 else "normal"
            preds.append(ev.StudyPrediction(f"wrist/s{i}", "wrist", truth,
                                            [float(rng.random())]))
        report = ev.report_from_predictions(preds, "valid")
        assert abs(report.overall.kappa) < 0.1

    def test_render_table_shape(self):
        text = ev.render_table(ev.report_from_predictions(self._predictions(), "valid"))
        lines = text.splitlines()
        assert "Per Encounter Metrics" in lines[0]
        assert len([l for l in lines if l.startswith(("elbow", "finger", "forearm",
                                                      "hand", "humerus", "shoulder",
                                                      "wrist", "overall"))]) == 8

    def test_predictions_csv(self, tmp_path):
        report = ev.report_from_predictions(self._predictions(), "valid")
        path = tmp_path / "preds.csv"
        ev.write_predictions_csv(report, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "study_id,study_type,truth,study_prob,decision"
        assert len(lines) == 15

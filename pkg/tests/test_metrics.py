import numpy as np
import pytest

from avdf.corpus import DualLabel
from avdf.errors import DataError
from avdf.metrics import (
    EvalReport,
    ScoredSample,
    binarize,
    count_confusion,
    eer,
    evaluate_scenarios,
    f1_suite,
    report_from_scores,
    roc_auc,
)
from avdf.model import (
    PRESENCE_AV,
    PRESENCE_AUDIO_ONLY,
    PRESENCE_VIDEO_ONLY,
    DetectionOutput,
)

from oracles import pairwise_auc


class TestBinarize:
    def test_boundary_is_positive(self):
        assert binarize([0.5])[0] == 1
        assert binarize([0.49])[0] == 0

    def test_threshold_monotonicity(self, rng):
        scores = rng.random(50)
        counts = [binarize(scores, t).sum() for t in np.linspace(0, 1, 21)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))


class TestF1Suite:
    def test_spec_hand_example(self):
        labels = [(1, 0), (0, 1), (1, 1), (0, 0)]
        preds = [(1, 0), (0, 0), (1, 1), (0, 0)]
        out = f1_suite(preds, labels)
        assert out["AF1"] == 1.0
        assert abs(out["VF1"] - 2 / 3) < 1e-12
        assert abs(out["OF1"] - 6 / 7) < 1e-12
        assert abs(out["CF1"] - 5 / 6) < 1e-12
        assert abs(out["WF1"] - 5 / 6) < 1e-12

    def test_perfect_predictions(self):
        labels = [(1, 0), (0, 1), (1, 1), (0, 0)]
        out = f1_suite(labels, labels)
        assert all(v == 1.0 for v in out.values())

    def test_all_negative_predictions_zero_f1(self):
        labels = [(1, 0), (0, 1)]
        preds = [(0, 0), (0, 0)]
        out = f1_suite(preds, labels)
        assert out["AF1"] == 0.0 and out["VF1"] == 0.0 and out["OF1"] == 0.0

    def test_identical_slot_confusions_collapse_the_averages(self, rng):
        labels_a = rng.integers(0, 2, size=30)
        preds_a = rng.integers(0, 2, size=30)
        labels = np.stack([labels_a, labels_a], axis=1)
        preds = np.stack([preds_a, preds_a], axis=1)
        out = f1_suite(preds, labels)
        assert out["OF1"] == out["CF1"] == out["WF1"]

    def test_empty_input_rejected(self):
        with pytest.raises(DataError):
            f1_suite(np.zeros((0, 2)), np.zeros((0, 2)))

    def test_single_slot_restriction(self):
        labels = [(1, 0), (0, 1), (1, 1), (0, 0)]
        preds = [(1, 0), (0, 0), (1, 1), (0, 0)]
        out = f1_suite(preds, labels, slots=(0,))
        assert out["OF1"] == out["AF1"] == 1.0
        assert out["CF1"] == out["WF1"] == 1.0


class TestRocAuc:
    def test_perfect_separation(self):
        assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_all_ties_give_half(self):
        assert roc_auc([0.4, 0.4, 0.4, 0.4], [1, 0, 1, 0]) == 0.5

    def test_spec_pairwise_example(self):
        assert roc_auc([0.9, 0.8, 0.4, 0.3], [1, 0, 1, 0]) == 0.75

    def test_matches_pairwise_oracle_exactly(self, rng):
        for n in (5, 37, 200):
            for trial in range(8):
                scores = rng.random(n)
                if trial % 2 == 0:
                    scores = np.round(scores, 1)  # force ties
                labels = rng.integers(0, 2, size=n)
                if labels.min() == labels.max():
                    labels[0] = 1 - labels[0]
                assert roc_auc(scores, labels) == pairwise_auc(scores, labels)

    def test_invariant_under_strictly_increasing_transform(self, rng):
        scores = np.round(rng.random(60), 2)
        labels = rng.integers(0, 2, size=60)
        labels[:2] = [0, 1]
        base = roc_auc(scores, labels)
        assert roc_auc(np.exp(3 * scores), labels) == base
        assert roc_auc(scores ** 3, labels) == base

    def test_single_class_rejected(self):
        with pytest.raises(DataError):
            roc_auc([0.1, 0.2], [1, 1])

    def test_permutation_invariance(self, rng):
        scores = rng.random(40)
        labels = rng.integers(0, 2, size=40)
        labels[:2] = [0, 1]
        perm = rng.permutation(40)
        assert roc_auc(scores, labels) == roc_auc(scores[perm], labels[perm])


class TestEer:
    def test_perfect_separation_is_zero(self):
        assert eer([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 0.0

    def test_perfect_anticorrelation_is_one(self):
        assert eer([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 1.0

    def test_spec_crossing_example(self):
        assert abs(eer([0.9, 0.6, 0.4, 0.1], [1, 0, 1, 0]) - 0.5) < 1e-12

    def test_symmetry_property(self, rng):
        for trial in range(100):
            n = int(rng.integers(6, 40))
            scores = rng.random(n)
            if trial % 3 == 0:
                scores = np.round(scores, 1)
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            a = eer(scores, labels)
            b = eer(1.0 - scores, 1 - labels)
            assert abs(a - b) < 1e-12
            assert 0.0 <= a <= 1.0

    def test_single_class_rejected(self):
        with pytest.raises(DataError):
            eer([0.1, 0.2], [0, 0])


class TestCountConfusion:
    def test_row_sums_equal_class_supports(self):
        true = [0, 1, 1, 2, 2, 2]
        pred = [0, 1, 2, 2, 2, 0]
        mat = count_confusion(true, pred)
        assert mat.sum() == 6
        np.testing.assert_array_equal(mat.sum(axis=1), [1, 2, 3])


def _scored(label, pa, pv, scenario=PRESENCE_AV, count=None):
    return ScoredSample(
        sample_id="s",
        p_audio_fake=pa,
        p_video_fake=pv,
        fused_real_score=(1 - pa) * (1 - pv),
        label=DualLabel(*label),
        scenario=scenario,
        count_pred=count,
    )


class TestReports:
    def make_scored(self, scenario=PRESENCE_AV):
        rows = [
            ((0, 0), 0.1, 0.2),
            ((1, 0), 0.9, 0.1),
            ((0, 1), 0.2, 0.8),
            ((1, 1), 0.8, 0.9),
        ]
        return [_scored(lbl, pa, pv, scenario, count=int(pa >= 0.5) + int(pv >= 0.5))
                for lbl, pa, pv in rows]

    def test_av_report_has_all_fields(self):
        report = report_from_scores(self.make_scored())
        assert report.scenario == "av"
        assert report.AF1 == report.VF1 == 1.0
        assert report.AUC_fused == 1.0
        assert report.count_confusion[0][0] == 1

    def test_audio_only_report_omits_video_metrics(self):
        report = report_from_scores(self.make_scored(PRESENCE_AUDIO_ONLY))
        assert report.VF1 is None
        assert report.VACC is None
        assert report.AUC_video is None
        assert report.AUC_fused is None
        assert report.AF1 is not None

    def test_video_only_report_omits_audio_metrics(self):
        report = report_from_scores(self.make_scored(PRESENCE_VIDEO_ONLY))
        assert report.AF1 is None and report.VF1 is not None

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            report_from_scores([])


class FakeSample:
    def __init__(self, sample_id, label):
        self.sample_id = sample_id
        self.label = label


class TestEvaluateScenarios:
    def detect_fn(self, sample, presence):
        # score from the true label, degraded to chance for absent modalities
        pa = 0.85 if sample.label.audio_fake else 0.15
        pv = 0.85 if sample.label.video_fake else 0.15
        if presence.audio_present and presence.video_present:
            fused = (1 - pa) * (1 - pv)
        elif presence.audio_present:
            fused = 1 - pa
        else:
            fused = 1 - pv
        return DetectionOutput(
            p_audio_fake=pa,
            p_video_fake=pv,
            count_probs=np.array([1.0, 0.0, 0.0]),
            fused_real_score=fused,
            embedding=np.zeros(4),
            presence=presence,
            unsupported=(),
        )

    def samples(self):
        return [FakeSample(f"s{i}", DualLabel(a, v))
                for i, (a, v) in enumerate([(0, 0), (1, 0), (0, 1), (1, 1)] * 3)]

    def test_three_reports_by_default(self):
        reports = evaluate_scenarios(self.detect_fn, self.samples())
        assert set(reports) == {"av", "audio", "video"}
        assert all(isinstance(r, EvalReport) for r in reports.values())

    def test_fused_score_is_product_of_real_probs(self):
        reports = evaluate_scenarios(self.detect_fn, self.samples())
        assert reports["av"].AUC_fused == 1.0

    def test_empty_split_rejected(self):
        with pytest.raises(DataError):
            evaluate_scenarios(self.detect_fn, [])

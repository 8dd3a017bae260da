import random

import numpy as np
import pytest
import torch

from propex import (
    ConfidenceHead,
    confidence_indication_metric,
    data_consistency_metric,
    evaluate,
    explanation_metrics,
    fit_confidence_probe,
    joint_accuracy,
    mask_sentences,
    query_only_eval,
    sufficiency_completeness,
    target_metrics,
)
from propex.evaluator import predict_corpus, select_best_gold

from helpers import StubModel, make_instance, make_tiny_model
from oracles import (
    brute_explanation_metrics,
    brute_joint_accuracy,
    brute_sufficiency_completeness,
    brute_target_metrics,
)


class TestTargetMetrics:
    def test_perfect_predictions(self):
        result = target_metrics([0, 1, 1, 0], [0, 1, 1, 0], 2)
        assert result.accuracy == 1.0
        assert result.macro_f1 == 1.0

    def test_hand_computed_case(self):
        result = target_metrics([0, 1, 1, 1], [0, 0, 1, 1], 2)
        assert result.accuracy == pytest.approx(0.75)
        # class 0: P=1, R=0.5 -> F1=2/3; class 1: P=2/3, R=1 -> F1=0.8
        assert result.macro_f1 == pytest.approx((2 / 3 + 0.8) / 2, abs=1e-12)

    def test_all_one_class_on_balanced_gold(self):
        result = target_metrics([1, 1, 1, 1], [0, 0, 1, 1], 2)
        assert result.accuracy == pytest.approx(0.5)
        assert result.macro_f1 == pytest.approx((0.0 + 2 / 3) / 2, abs=1e-12)

    def test_label_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            target_metrics([0, 2], [0, 1], 2)

    def test_matches_brute_force_on_random_sets(self):
        rng = random.Random(0)
        for _ in range(100):
            n_classes = rng.randint(2, 4)
            size = rng.randint(1, 20)
            pred = [rng.randrange(n_classes) for _ in range(size)]
            gold = [rng.randrange(n_classes) for _ in range(size)]
            result = target_metrics(pred, gold, n_classes)
            accuracy, macro = brute_target_metrics(pred, gold, n_classes)
            assert abs(result.accuracy - accuracy) <= 1e-12
            assert abs(result.macro_f1 - macro) <= 1e-12


class TestExplanationMetrics:
    def test_exact_match_against_one_gold(self):
        pred = np.array([0, 1])
        golds = [[1, 0], [0, 1]]
        chosen = select_best_gold(pred, golds)
        assert chosen.tolist() == [0, 1]
        result = explanation_metrics([pred], [golds])
        assert result.precision == 1.0
        assert result.recall == 1.0
        assert result.macro_f1 == 1.0

    def test_zero_recall_for_empty_prediction(self):
        result = explanation_metrics([np.array([0, 0])], [[[1, 0]]])
        assert result.recall == 0.0

    def test_instance_without_golds_is_skipped(self):
        with pytest.warns(UserWarning, match="skipped"):
            result = explanation_metrics(
                [np.array([1, 0]), np.array([1, 0])], [[], [[1, 0]]]
            )
        assert result.precision == 1.0

    def test_matches_brute_force_on_random_sets(self):
        rng = random.Random(1)
        for _ in range(100):
            instances = rng.randint(1, 20)
            preds, golds = [], []
            for _ in range(instances):
                length = rng.randint(1, 6)
                preds.append(np.array([rng.randint(0, 1) for _ in range(length)]))
                golds.append(
                    [
                        [rng.randint(0, 1) for _ in range(length)]
                        for _ in range(rng.randint(1, 3))
                    ]
                )
            result = explanation_metrics(preds, golds)
            precision, recall, macro = brute_explanation_metrics(preds, golds)
            assert abs(result.precision - precision) <= 1e-12
            assert abs(result.recall - recall) <= 1e-12
            assert abs(result.macro_f1 - macro) <= 1e-12


class TestJointAccuracy:
    def test_superset_explanation_is_incorrect(self):
        value = joint_accuracy([1], [np.array([1, 1])], [1], [[[1, 0]]])
        assert value == 0.0

    def test_matching_any_gold_counts(self):
        golds = [[[1, 0, 0], [0, 1, 0], [0, 0, 1]]]
        value = joint_accuracy([0], [np.array([0, 1, 0])], [0], golds)
        assert value == 1.0

    def test_wrong_label_with_perfect_explanation(self):
        value = joint_accuracy([1], [np.array([1, 0])], [0], [[[1, 0]]])
        assert value == 0.0

    def test_bounded_by_target_accuracy_and_match_rate(self):
        rng = random.Random(2)
        for _ in range(50):
            size = rng.randint(1, 15)
            length = rng.randint(1, 5)
            pred_labels = [rng.randint(0, 1) for _ in range(size)]
            gold_labels = [rng.randint(0, 1) for _ in range(size)]
            preds = [np.array([rng.randint(0, 1) for _ in range(length)]) for _ in range(size)]
            golds = [
                [[rng.randint(0, 1) for _ in range(length)]] for _ in range(size)
            ]
            joint = joint_accuracy(pred_labels, preds, gold_labels, golds)
            accuracy = sum(p == g for p, g in zip(pred_labels, gold_labels)) / size
            match_rate = (
                sum(
                    any(list(g) == p.tolist() for g in gs)
                    for p, gs in zip(preds, golds)
                )
                / size
            )
            assert joint <= min(accuracy, match_rate) + 1e-12
            assert joint == pytest.approx(
                brute_joint_accuracy(pred_labels, preds, gold_labels, golds), abs=1e-12
            )


class TestSufficiencyCompleteness:
    def test_input_invariant_predictor_scores_100_100(self):
        class Constant(StubModel):
            def __call__(self, instance, label_for_explanation=None):
                output = super().__call__(instance, label_for_explanation)
                probs = torch.tensor([0.9, 0.1], dtype=torch.float64)
                output.prior_probs = probs
                output.class_probs = probs
                output.predicted_class = 0
                return output

        instances = [
            make_instance(sentences=(("a",), ("b",)), rationales=((1, 0),))
            for _ in range(3)
        ]
        result = sufficiency_completeness(Constant(), instances)
        assert result.sufficiency == 100.0
        assert result.completeness == 100.0

    def test_counting_two_of_three(self, small_dataset):
        instances = small_dataset.splits["test"][:3]
        model = StubModel()
        result = sufficiency_completeness(model, instances)
        suff, compl = brute_sufficiency_completeness(
            model, instances, "threshold", mask_sentences
        )
        assert result.sufficiency == pytest.approx(suff, abs=1e-12)
        assert result.completeness == pytest.approx(compl, abs=1e-12)

    def test_matches_brute_force_on_stub_corpus(self, small_dataset):
        instances = small_dataset.splits["test"]
        model = StubModel()
        for policy in ("threshold", "top1"):
            result = sufficiency_completeness(model, instances, policy)
            suff, compl = brute_sufficiency_completeness(
                model, instances, policy, mask_sentences
            )
            assert result.sufficiency == pytest.approx(suff, abs=1e-12)
            assert result.completeness == pytest.approx(compl, abs=1e-12)

    def test_keep_all_preserves_prediction_exactly(self, small_dataset):
        instances = small_dataset.splits["test"][:10]
        model = make_tiny_model(instances, seed=6)
        model.eval()
        with torch.no_grad():
            for instance in instances:
                original = model(instance).predicted_class
                kept = model(
                    mask_sentences(instance, [1] * instance.num_sentences)
                ).predicted_class
                assert kept == original


class TestDataConsistencyMetric:
    def test_zero_mask_words_give_zero_diffs(self, small_dataset):
        instances = small_dataset.splits["test"][:5]
        model = make_tiny_model(instances, seed=0)
        result = data_consistency_metric(model, instances, num_mask_words=0, repeats=2)
        assert result.pred_diff_mean == 0.0
        assert result.pred_diff_std == 0.0
        assert result.expl_diff_mean == 0.0

    def test_hand_set_two_pass_outputs(self):
        from propex.joint_model import ModelOutput

        sig_full = torch.tensor([[0.8, 0.3], [0.6, 0.5]], dtype=torch.float64)
        sig_masked = torch.tensor([[0.5, 0.3], [0.5, 0.5]], dtype=torch.float64)
        logit = lambda s: torch.log(s / (1 - s))

        class Scripted:
            def __call__(self, instance, label_for_explanation=None):
                masked = any(
                    tok == "[MASK]" for sent in instance.sentences for tok in sent
                )
                sig = sig_masked if masked else sig_full
                probs = (
                    torch.tensor([0.7, 0.3], dtype=torch.float64)
                    if not masked
                    else torch.tensor([0.55, 0.45], dtype=torch.float64)
                )
                return ModelOutput(
                    prior_probs=probs,
                    sentence_class_scores=logit(sig),
                    class_probs=probs,
                    predicted_class=0,
                    sentence_probs=sig[:, 0],
                )

        instance = make_instance(sentences=(("a",), ("b",)), rationales=((1, 0),))
        result = data_consistency_metric(
            Scripted(), [instance], num_mask_words=1, repeats=1, seed=0
        )
        # pred diff |0.7 - 0.55|; expl diff |0.8-0.5| + |0.6-0.5| at class 0
        assert result.pred_diff_mean == pytest.approx(0.15, abs=1e-9)
        assert result.expl_diff_mean == pytest.approx(0.4, abs=1e-9)
        assert result.pred_diff_std == 0.0

    def test_deterministic_for_fixed_seed(self, small_dataset):
        instances = small_dataset.splits["test"][:6]
        model = make_tiny_model(instances, seed=1)
        first = data_consistency_metric(model, instances, 2, repeats=3, seed=9)
        second = data_consistency_metric(model, instances, 2, repeats=3, seed=9)
        assert first == second

    def test_repeats_must_be_positive(self, small_dataset):
        model = StubModel()
        with pytest.raises(ValueError):
            data_consistency_metric(model, small_dataset.splits["test"][:1], 1, repeats=0)


class TestConfidenceIndicationMetric:
    def test_missing_head_is_an_error(self, small_dataset):
        with pytest.raises(ValueError, match="ConfidenceHead"):
            confidence_indication_metric(StubModel(), None, small_dataset.splits["test"])

    def test_mean_and_population_std(self):
        from propex.joint_model import ModelOutput
        from propex.objectives import sentence_prob_stats

        class Scripted:
            def __init__(self):
                self.confidences = iter([0.6, 0.8])

            def __call__(self, instance, label_for_explanation=None):
                conf = next(self.confidences)
                probs = torch.tensor([conf, 1 - conf], dtype=torch.float64)
                return ModelOutput(
                    prior_probs=probs,
                    sentence_class_scores=torch.zeros((2, 2), dtype=torch.float64),
                    class_probs=probs,
                    predicted_class=0,
                    sentence_probs=torch.tensor([0.5, 0.5], dtype=torch.float64),
                )

        head = ConfidenceHead()
        with torch.no_grad():
            head.linear.weight.zero_()
            head.linear.bias.fill_(0.0)  # sigmoid(0) = 0.5 for every instance
        instances = [
            make_instance(sentences=(("a",), ("b",)), rationales=((1, 0),)),
            make_instance(sentences=(("c",), ("d",)), rationales=((1, 0),)),
        ]
        result = confidence_indication_metric(Scripted(), head, instances)
        # diffs are |0.6-0.5| = 0.1 and |0.8-0.5| = 0.3
        assert result.diff_mean == pytest.approx(0.2, abs=1e-12)
        assert result.diff_std == pytest.approx(0.1, abs=1e-12)

    def test_probe_fitting_reduces_gap(self, small_dataset):
        instances = small_dataset.splits["validation"]
        model = make_tiny_model(instances, seed=3)
        torch.manual_seed(99)
        untrained = ConfidenceHead()
        before = confidence_indication_metric(model, untrained, instances)
        probe = fit_confidence_probe(model, instances, steps=200, seed=0)
        after = confidence_indication_metric(model, probe, instances)
        assert after.diff_mean <= before.diff_mean + 1e-9


class TestQueryOnly:
    def test_random_baseline_near_chance(self, small_dataset):
        instances = small_dataset.splits["test"]
        result = query_only_eval(StubModel(), instances, 2, seed=0)
        assert 0.2 <= result.random_accuracy <= 0.8

    def test_stub_sees_only_masked_documents(self, small_dataset):
        instances = small_dataset.splits["test"]
        model = StubModel()
        result = query_only_eval(model, instances, 2, seed=0)
        masked = [mask_sentences(i, [0] * i.num_sentences) for i in instances]
        expected = [model(m).predicted_class for m in masked]
        gold = [i.label for i in instances]
        accuracy, _ = brute_target_metrics(expected, gold, 2)
        assert result.accuracy == pytest.approx(accuracy, abs=1e-12)


class TestEvaluateAndReport:
    def test_report_fields_and_serialisation(self, small_dataset):
        instances = small_dataset.splits["test"]
        model = make_tiny_model(instances, seed=5)
        report = evaluate(
            model,
            small_dataset,
            properties=True,
            query_only=True,
            num_mask_words=1,
            repeats=2,
        )
        data = report.to_dict()
        for key in (
            "target",
            "explanation",
            "joint_accuracy",
            "faithfulness",
            "data_consistency",
            "confidence",
            "query_only",
        ):
            assert key in data
        markdown = report.to_markdown()
        for column in ("F1-C", "Acc-C", "P-E", "R-E", "F1-E", "Acc-Joint"):
            assert column in markdown
        assert "Suff." in markdown and "Compl." in markdown
        assert "Query-only" in markdown

    def test_property_blocks_absent_by_default(self, small_dataset):
        instances = small_dataset.splits["test"]
        model = make_tiny_model(instances, seed=5)
        report = evaluate(model, small_dataset)
        data = report.to_dict()
        assert "faithfulness" not in data
        assert "query_only" not in data

    def test_prediction_dump_shapes(self, small_dataset):
        instances = small_dataset.splits["test"][:4]
        model = make_tiny_model(instances, seed=5)
        for pred in predict_corpus(model, instances):
            assert pred.class_probs.shape == (2,)
            assert len(pred.sentence_probs) == len(pred.explanation)
            assert set(pred.explanation.tolist()) <= {0, 1}

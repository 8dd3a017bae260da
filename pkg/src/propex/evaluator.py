"""Target, explanation, joint, and property metrics plus the structured report.

Units: accuracies, precision/recall, and F1 values are fractions in [0, 1];
sufficiency and completeness are percentages in [0, 100] (they are read as
"proportion of instances preserving their prediction"). The explanation drift
statistic is an unnormalised per-sentence sum, so it can exceed 1 and grows
with sentence count.
"""

from __future__ import annotations

import json
import random
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .corpus import Dataset, Instance, mask_random_words, mask_sentences
from .joint_model import DecodePolicy, decode_explanation, eval_mode
from .objectives import ConfidenceHead, sentence_prob_stats


@dataclass(frozen=True)
class TargetMetrics:
    accuracy: float
    macro_f1: float


@dataclass(frozen=True)
class ExplanationMetrics:
    precision: float  # explanation class, micro-counted over the corpus
    recall: float
    macro_f1: float  # macro over {explanation, non-explanation} sentence classes


@dataclass(frozen=True)
class FaithfulnessMetrics:
    sufficiency: float  # percent; higher is better
    completeness: float  # percent; lower is better


@dataclass(frozen=True)
class DataConsistencyMetrics:
    pred_diff_mean: float
    pred_diff_std: float
    expl_diff_mean: float  # per-sentence sum, not a mean; exceeds 1 for long inputs
    expl_diff_std: float


@dataclass(frozen=True)
class ConfidenceMetrics:
    diff_mean: float
    diff_std: float


@dataclass(frozen=True)
class QueryOnlyMetrics:
    accuracy: float
    macro_f1: float
    random_accuracy: float
    random_macro_f1: float


def target_metrics(
    pred_labels: Sequence[int], gold_labels: Sequence[int], num_classes: int
) -> TargetMetrics:
    """Accuracy (fraction correct) and macro-averaged F1 over all classes.

    Per-class F1 uses P = TP/(TP+FP), R = TP/(TP+FN); classes with no
    predictions and no gold occurrences contribute 0 by convention.
    """
    pred = np.asarray(pred_labels, dtype=int)
    gold = np.asarray(gold_labels, dtype=int)
    if pred.shape != gold.shape or pred.size == 0:
        raise ValueError("prediction and gold label lists must be equal-length, nonempty")
    for arr, kind in ((pred, "predicted"), (gold, "gold")):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{kind} label outside [0, {num_classes})")
    accuracy = float(np.mean(pred == gold))
    f1_values = []
    for cls in range(num_classes):
        tp = int(np.sum((pred == cls) & (gold == cls)))
        fp = int(np.sum((pred == cls) & (gold != cls)))
        fn = int(np.sum((pred != cls) & (gold == cls)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        f1_values.append(f1)
    return TargetMetrics(accuracy=accuracy, macro_f1=float(np.mean(f1_values)))


def select_best_gold(pred: np.ndarray, golds: Sequence[Sequence[int]]) -> np.ndarray:
    """Pick the gold rationale with the largest overlap with the prediction; ties keep the first."""
    best = None
    best_overlap = -1
    for gold in golds:
        gold_arr = np.asarray(gold, dtype=int)
        overlap = int(np.sum((pred == 1) & (gold_arr == 1)))
        if overlap > best_overlap:
            best = gold_arr
            best_overlap = overlap
    assert best is not None
    return best


def explanation_metrics(
    preds: Sequence[np.ndarray], golds_per_instance: Sequence[Sequence[Sequence[int]]]
) -> ExplanationMetrics:
    """Corpus-level sentence-selection metrics with per-instance best-gold matching."""
    if len(preds) != len(golds_per_instance):
        raise ValueError("predictions and gold lists must align")
    tp = fp = fn = tn = 0
    for pred, golds in zip(preds, golds_per_instance):
        if not golds:
            warnings.warn("instance without gold rationales skipped", stacklevel=2)
            continue
        pred_arr = np.asarray(pred, dtype=int)
        gold = select_best_gold(pred_arr, golds)
        if len(gold) != len(pred_arr):
            raise ValueError("prediction and gold rationale lengths differ")
        tp += int(np.sum((pred_arr == 1) & (gold == 1)))
        fp += int(np.sum((pred_arr == 1) & (gold == 0)))
        fn += int(np.sum((pred_arr == 0) & (gold == 1)))
        tn += int(np.sum((pred_arr == 0) & (gold == 0)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1_pos = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    neg_precision = tn / (tn + fn) if tn + fn else 0.0
    neg_recall = tn / (tn + fp) if tn + fp else 0.0
    f1_neg = (
        2 * neg_precision * neg_recall / (neg_precision + neg_recall)
        if neg_precision + neg_recall
        else 0.0
    )
    return ExplanationMetrics(
        precision=precision, recall=recall, macro_f1=(f1_pos + f1_neg) / 2.0
    )


def joint_accuracy(
    pred_labels: Sequence[int],
    pred_explanations: Sequence[np.ndarray],
    gold_labels: Sequence[int],
    golds_per_instance: Sequence[Sequence[Sequence[int]]],
) -> float:
    """Fraction of instances with the right label AND an exact gold rationale match."""
    if not len(pred_labels) == len(pred_explanations) == len(gold_labels) == len(
        golds_per_instance
    ):
        raise ValueError("joint accuracy inputs must align")
    correct = 0
    for label, expl, gold_label, golds in zip(
        pred_labels, pred_explanations, gold_labels, golds_per_instance
    ):
        if label != gold_label:
            continue
        expl_arr = np.asarray(expl, dtype=int)
        if any(np.array_equal(expl_arr, np.asarray(g, dtype=int)) for g in golds):
            correct += 1
    return correct / len(pred_labels)


@dataclass
class Prediction:
    """Per-instance inference products used by the metric and dump paths."""

    id: str
    label: int
    explanation: np.ndarray
    class_probs: np.ndarray
    sentence_probs: np.ndarray


def predict_corpus(
    model, instances: Sequence[Instance], policy: DecodePolicy = "threshold"
) -> list[Prediction]:
    predictions = []
    with torch.no_grad(), eval_mode(model):
        for instance in instances:
            output = model(instance)
            predictions.append(
                Prediction(
                    id=instance.id,
                    label=output.predicted_class,
                    explanation=decode_explanation(output, policy),
                    class_probs=output.class_probs.detach().cpu().numpy(),
                    sentence_probs=output.sentence_probs.detach().cpu().numpy(),
                )
            )
    return predictions


def sufficiency_completeness(
    model, instances: Sequence[Instance], policy: DecodePolicy = "threshold"
) -> FaithfulnessMetrics:
    """Percent of instances whose prediction survives on the decoded explanation
    alone (sufficiency) and on its complement (completeness)."""
    preserved_selected = 0
    preserved_complement = 0
    with torch.no_grad(), eval_mode(model):
        for instance in instances:
            output = model(instance)
            original = output.predicted_class
            explanation = decode_explanation(output, policy)
            keep = [int(b) for b in explanation]
            complement = [1 - b for b in keep]
            if model(mask_sentences(instance, keep)).predicted_class == original:
                preserved_selected += 1
            if model(mask_sentences(instance, complement)).predicted_class == original:
                preserved_complement += 1
    count = len(instances)
    return FaithfulnessMetrics(
        sufficiency=100.0 * preserved_selected / count,
        completeness=100.0 * preserved_complement / count,
    )


def data_consistency_metric(
    model,
    instances: Sequence[Instance],
    num_mask_words: int,
    repeats: int = 5,
    seed: int = 0,
) -> DataConsistencyMetrics:
    """Prediction- and explanation-confidence drift under repeated word masking.

    The prediction drift compares the original predicted class's probability
    across the two passes; the explanation drift sums the per-sentence change
    of the sigmoid scores at that class, so its magnitude scales with sentence
    count. Deterministic for a fixed seed.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rng = random.Random(seed)
    pred_diffs = []
    expl_diffs = []
    with torch.no_grad(), eval_mode(model):
        for instance in instances:
            output = model(instance)
            cls = output.predicted_class
            confidence = float(output.class_probs[cls])
            column = torch.sigmoid(output.sentence_class_scores[:, cls])
            for _ in range(repeats):
                masked = mask_random_words(instance, num_mask_words, rng)
                masked_output = model(masked)
                masked_column = torch.sigmoid(masked_output.sentence_class_scores[:, cls])
                pred_diffs.append(abs(confidence - float(masked_output.class_probs[cls])))
                expl_diffs.append(float((column - masked_column).abs().sum()))
    return DataConsistencyMetrics(
        pred_diff_mean=float(np.mean(pred_diffs)),
        pred_diff_std=float(np.std(pred_diffs)),
        expl_diff_mean=float(np.mean(expl_diffs)),
        expl_diff_std=float(np.std(expl_diffs)),
    )


def confidence_indication_metric(
    model, head: ConfidenceHead | None, instances: Sequence[Instance]
) -> ConfidenceMetrics:
    """Mean/std gap between prediction confidence and the head's estimate."""
    if head is None:
        raise ValueError(
            "confidence metric needs a ConfidenceHead; fit a probe for models "
            "trained without the confidence objective"
        )
    diffs = []
    with torch.no_grad(), eval_mode(model):
        for instance in instances:
            output = model(instance)
            estimate = float(head(sentence_prob_stats(output.sentence_probs)))
            diffs.append(abs(float(output.class_probs[output.predicted_class]) - estimate))
    return ConfidenceMetrics(diff_mean=float(np.mean(diffs)), diff_std=float(np.std(diffs)))


def fit_confidence_probe(
    model,
    instances: Sequence[Instance],
    steps: int = 300,
    learning_rate: float = 0.05,
    seed: int = 0,
) -> ConfidenceHead:
    """Fit a fresh confidence head on a frozen model by minimising the same L1 gap.

    Used to score models trained without the confidence objective: the probe is
    the weakest-assumption way to read a confidence estimate out of their
    explanation scores.
    """
    stats_rows = []
    targets = []
    with torch.no_grad(), eval_mode(model):
        for instance in instances:
            output = model(instance)
            stats_rows.append(sentence_prob_stats(output.sentence_probs))
            targets.append(output.class_probs[output.predicted_class])
    stats = torch.stack(stats_rows)
    target = torch.stack(targets)
    torch.manual_seed(seed)
    head = ConfidenceHead()
    optimiser = torch.optim.Adam(head.parameters(), lr=learning_rate)
    for _ in range(steps):
        optimiser.zero_grad()
        loss = (target - head(stats)).abs().mean()
        loss.backward()
        optimiser.step()
    return head


def query_only_eval(
    model, instances: Sequence[Instance], num_classes: int, seed: int = 0
) -> QueryOnlyMetrics:
    """Target metrics with every document sentence masked, plus a random baseline."""
    masked = [
        mask_sentences(inst, [0] * inst.num_sentences) for inst in instances
    ]
    predictions = predict_corpus(model, masked)
    gold = [inst.label for inst in instances]
    result = target_metrics([p.label for p in predictions], gold, num_classes)
    rng = random.Random(seed)
    random_preds = [rng.randrange(num_classes) for _ in instances]
    random_result = target_metrics(random_preds, gold, num_classes)
    return QueryOnlyMetrics(
        accuracy=result.accuracy,
        macro_f1=result.macro_f1,
        random_accuracy=random_result.accuracy,
        random_macro_f1=random_result.macro_f1,
    )


@dataclass
class EvalReport:
    """Structured record of target, explanation, joint, and property metrics."""

    dataset: str
    split: str
    target: TargetMetrics
    explanation: ExplanationMetrics
    joint_accuracy: float
    faithfulness: FaithfulnessMetrics | None = None
    data_consistency: DataConsistencyMetrics | None = None
    confidence: ConfidenceMetrics | None = None
    query_only: QueryOnlyMetrics | None = None

    def to_dict(self) -> dict:
        report = {
            "dataset": self.dataset,
            "split": self.split,
            "target": {"accuracy": self.target.accuracy, "macro_f1": self.target.macro_f1},
            "explanation": {
                "precision": self.explanation.precision,
                "recall": self.explanation.recall,
                "macro_f1": self.explanation.macro_f1,
            },
            "joint_accuracy": self.joint_accuracy,
        }
        if self.faithfulness is not None:
            report["faithfulness"] = {
                "sufficiency_pct": self.faithfulness.sufficiency,
                "completeness_pct": self.faithfulness.completeness,
            }
        if self.data_consistency is not None:
            report["data_consistency"] = {
                "pred_diff_mean": self.data_consistency.pred_diff_mean,
                "pred_diff_std": self.data_consistency.pred_diff_std,
                "expl_diff_mean": self.data_consistency.expl_diff_mean,
                "expl_diff_std": self.data_consistency.expl_diff_std,
            }
        if self.confidence is not None:
            report["confidence"] = {
                "diff_mean": self.confidence.diff_mean,
                "diff_std": self.confidence.diff_std,
            }
        if self.query_only is not None:
            report["query_only"] = {
                "accuracy": self.query_only.accuracy,
                "macro_f1": self.query_only.macro_f1,
                "random_accuracy": self.query_only.random_accuracy,
                "random_macro_f1": self.query_only.random_macro_f1,
            }
        return report

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_markdown(self) -> str:
        lines = [
            f"# Evaluation: {self.dataset} / {self.split}",
            "",
            "| F1-C | Acc-C | P-E | R-E | F1-E | Acc-Joint |",
            "|------|-------|-----|-----|------|-----------|",
            "| {:.4f} | {:.4f} | {:.4f} | {:.4f} | {:.4f} | {:.4f} |".format(
                self.target.macro_f1,
                self.target.accuracy,
                self.explanation.precision,
                self.explanation.recall,
                self.explanation.macro_f1,
                self.joint_accuracy,
            ),
        ]
        if self.faithfulness is not None:
            lines += [
                "",
                "| Suff. % | Compl. % |",
                "|---------|----------|",
                "| {:.1f} | {:.1f} |".format(
                    self.faithfulness.sufficiency, self.faithfulness.completeness
                ),
            ]
        if self.data_consistency is not None:
            dc = self.data_consistency
            lines += [
                "",
                "| Pred. diff | Expl. diff |",
                "|------------|------------|",
                "| {:.4f} ({:.4f}) | {:.4f} ({:.4f}) |".format(
                    dc.pred_diff_mean, dc.pred_diff_std, dc.expl_diff_mean, dc.expl_diff_std
                ),
            ]
        if self.confidence is not None:
            lines += [
                "",
                "| Confidence diff |",
                "|-----------------|",
                "| {:.4f} ({:.4f}) |".format(
                    self.confidence.diff_mean, self.confidence.diff_std
                ),
            ]
        if self.query_only is not None:
            qo = self.query_only
            lines += [
                "",
                "| Query-only F1-C | Query-only Acc-C | Random F1-C | Random Acc-C |",
                "|-----------------|------------------|-------------|--------------|",
                "| {:.4f} | {:.4f} | {:.4f} | {:.4f} |".format(
                    qo.macro_f1, qo.accuracy, qo.random_macro_f1, qo.random_accuracy
                ),
            ]
        return "\n".join(lines) + "\n"


def evaluate(
    model,
    dataset: Dataset,
    split: str = "test",
    *,
    head: ConfidenceHead | None = None,
    policy: DecodePolicy = "threshold",
    num_mask_words: int = 2,
    repeats: int = 5,
    seed: int = 0,
    properties: bool = False,
    query_only: bool = False,
    probe_instances: Sequence[Instance] | None = None,
) -> EvalReport:
    """Run the full metric suite on one split.

    Property metrics require extra forward passes and are computed only when
    requested. Models without a trained confidence head get a probe fitted
    post-hoc on ``probe_instances`` (defaulting to the validation split).
    """
    instances = dataset.split(split)
    predictions = predict_corpus(model, instances, policy)
    gold_labels = [inst.label for inst in instances]
    golds = [inst.rationales for inst in instances]
    pred_labels = [p.label for p in predictions]
    pred_expls = [p.explanation for p in predictions]
    report = EvalReport(
        dataset=dataset.name,
        split=split,
        target=target_metrics(pred_labels, gold_labels, dataset.num_classes),
        explanation=explanation_metrics(pred_expls, golds),
        joint_accuracy=joint_accuracy(pred_labels, pred_expls, gold_labels, golds),
    )
    if properties:
        report.faithfulness = sufficiency_completeness(model, instances, policy)
        report.data_consistency = data_consistency_metric(
            model, instances, num_mask_words, repeats, seed
        )
        if head is None:
            probe_on = probe_instances
            if probe_on is None:
                probe_on = dataset.splits.get("validation", instances)
            head = fit_confidence_probe(model, probe_on, seed=seed)
        report.confidence = confidence_indication_metric(model, head, instances)
    if query_only:
        report.query_only = query_only_eval(model, instances, dataset.num_classes, seed)
    return report

"""Training losses: supervised cross-entropies plus the three property objectives.

All active terms are summed without per-term weights. The property terms are:
a REINFORCE surrogate rewarding explanations that preserve the prediction on
their own and fail to on their complement (faithfulness), an L1 penalty on
explanation-score drift under random word masking (data consistency), and an
L1 penalty tying a confidence readout of the explanation scores to the model's
prediction confidence (confidence indication).
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import Instance, mask_random_words, mask_sentences
from .joint_model import JointModel, ModelOutput, eval_mode

_EPS = 1e-12

LOSS_ORDER = ("L_C", "L_E", "L_F", "L_DC", "L_CI")


@dataclass
class ObjectiveConfig:
    """Which loss terms are active, plus their hyperparameters."""

    use_supervised_expl: bool = True
    use_faithfulness: bool = False
    use_data_consistency: bool = False
    use_confidence: bool = False
    sparsity_target: float = 0.5  # desired fraction of sentences selected
    num_mask_words: int = 2  # words masked per consistency perturbation
    use_reward_baseline: bool = True
    baseline_momentum: float = 0.9

    def __post_init__(self) -> None:
        if not 0.0 < self.sparsity_target < 1.0:
            raise ValueError("sparsity_target must lie in (0, 1)")
        if self.num_mask_words < 0:
            raise ValueError("num_mask_words must be >= 0")
        if not 0.0 <= self.baseline_momentum < 1.0:
            raise ValueError("baseline_momentum must lie in [0, 1)")

    def active_losses(self) -> tuple[str, ...]:
        names = ["L_C"]
        if self.use_supervised_expl:
            names.append("L_E")
        if self.use_faithfulness:
            names.append("L_F")
        if self.use_data_consistency:
            names.append("L_DC")
        if self.use_confidence:
            names.append("L_CI")
        return tuple(names)


_PRESET_FLAGS = {
    "sup": (True, False, False, False),
    "sup+f": (True, True, False, False),
    "sup+dc": (True, False, True, False),
    "sup+ci": (True, False, False, True),
    "sup+all": (True, True, True, True),
    "unsup": (False, False, False, False),
    "unsup+f": (False, True, False, False),
    "unsup+dc": (False, False, True, False),
    "unsup+ci": (False, False, False, True),
    "unsup+all": (False, True, True, True),
}


def objective_preset(name: str, **overrides) -> ObjectiveConfig:
    """Build an ObjectiveConfig from a named preset, with field overrides."""
    if name not in _PRESET_FLAGS:
        raise ValueError(
            f"unknown objectives preset {name!r}; choose from {sorted(_PRESET_FLAGS)}"
        )
    sup, fai, dc, ci = _PRESET_FLAGS[name]
    return ObjectiveConfig(
        use_supervised_expl=sup,
        use_faithfulness=fai,
        use_data_consistency=dc,
        use_confidence=ci,
        **overrides,
    )


def target_loss(class_probs: torch.Tensor, label: int) -> torch.Tensor:
    """Cross-entropy of the conditioned class distribution at the gold label."""
    return -torch.log(class_probs[label].clamp_min(_EPS))


def explanation_loss(sentence_probs: torch.Tensor, rationale: Sequence[int]) -> torch.Tensor:
    """Mean binary cross-entropy of sentence probabilities against a gold rationale."""
    if len(rationale) != sentence_probs.shape[0]:
        raise ValueError("rationale length does not match sentence count")
    gold = torch.as_tensor(rationale, dtype=sentence_probs.dtype, device=sentence_probs.device)
    probs = sentence_probs.clamp(_EPS, 1.0 - _EPS)
    bce = -(gold * torch.log(probs) + (1.0 - gold) * torch.log(1.0 - probs))
    return bce.mean()


@dataclass
class FaithfulnessSample:
    """One sampled sentence mask with its reward and graph-connected log-probability."""

    mask: np.ndarray  # binary, length S
    log_prob: torch.Tensor  # scalar, carries gradients into sentence_probs
    reward: float
    selected_label: int  # prediction on the selected sentences only
    complement_label: int  # prediction on the unselected sentences only


def faithfulness_reward(
    original_class: int,
    selected_label: int,
    complement_label: int,
    selected_fraction: float,
    sparsity_target: float,
) -> float:
    """Reward = preserved-on-selection - preserved-on-complement - sparsity miss.

    Bounded in [-1 - max(t, 1 - t), 1] for sparsity target t.
    """
    preserved = 1.0 if selected_label == original_class else 0.0
    leaked = 1.0 if complement_label == original_class else 0.0
    return preserved - leaked - abs(selected_fraction - sparsity_target)


def faithfulness_sample(
    instance: Instance,
    output: ModelOutput,
    sparsity_target: float,
    generator: torch.Generator,
    model: JointModel,
) -> FaithfulnessSample:
    """Sample a sentence mask from the explanation probabilities and score it.

    The two auxiliary predictions (selected-only and complement-only inputs)
    run without gradient tracking and with dropout disabled; only ``log_prob``
    connects back to the computation graph.
    """
    probs = output.sentence_probs
    mask = torch.bernoulli(probs.detach(), generator=generator)
    clamped = probs.clamp(_EPS, 1.0 - _EPS)
    log_prob = (mask * torch.log(clamped) + (1.0 - mask) * torch.log(1.0 - clamped)).sum()
    keep = [int(b) for b in mask.tolist()]
    complement = [1 - b for b in keep]
    with torch.no_grad(), eval_mode(model):
        selected_label = model(mask_sentences(instance, keep)).predicted_class
        complement_label = model(mask_sentences(instance, complement)).predicted_class
    reward = faithfulness_reward(
        output.predicted_class,
        selected_label,
        complement_label,
        float(mask.mean()),
        sparsity_target,
    )
    return FaithfulnessSample(
        mask=np.array(keep, dtype=int),
        log_prob=log_prob,
        reward=reward,
        selected_label=selected_label,
        complement_label=complement_label,
    )


class RewardBaseline:
    """Scalar exponential moving average of the reward, treated as a constant."""

    def __init__(self, momentum: float = 0.9, enabled: bool = True):
        self.momentum = momentum
        self.enabled = enabled
        self._value: float | None = None

    @property
    def value(self) -> float:
        if not self.enabled or self._value is None:
            return 0.0
        return self._value

    def update(self, reward: float) -> None:
        if not self.enabled:
            return
        if self._value is None:
            self._value = reward
        else:
            self._value = self.momentum * self._value + (1.0 - self.momentum) * reward


def faithfulness_loss(
    samples: Sequence[FaithfulnessSample], baseline: float = 0.0
) -> torch.Tensor:
    """REINFORCE surrogate whose minimisation ascends the expected reward.

    Mean over samples of -(reward - baseline) * log_prob; the baseline is a
    constant, so subtracting it leaves the gradient estimate unbiased.
    """
    if not samples:
        raise ValueError("faithfulness_loss needs at least one sample")
    terms = [-(s.reward - baseline) * s.log_prob for s in samples]
    return torch.stack(terms).mean()


def data_consistency_loss(
    instance: Instance,
    output: ModelOutput,
    num_mask_words: int,
    rng: random.Random,
    model: JointModel,
) -> torch.Tensor:
    """Mean absolute drift of sigmoid sentence-class scores under word masking.

    The masked forward pass also tracks gradients, so both the original and
    perturbed score surfaces are pulled together.
    """
    masked = mask_random_words(instance, num_mask_words, rng)
    masked_output = model(masked)
    original = torch.sigmoid(output.sentence_class_scores)
    perturbed = torch.sigmoid(masked_output.sentence_class_scores)
    return (original - perturbed).abs().mean()


def sentence_prob_stats(sentence_probs: torch.Tensor) -> torch.Tensor:
    """(max, min, mean, population std) of the sentence probabilities.

    Population form keeps the std defined at a single sentence; the tiny
    epsilon inside the sqrt keeps gradients finite for constant vectors.
    """
    mean = sentence_probs.mean()
    var = ((sentence_probs - mean) ** 2).mean()
    return torch.stack(
        [sentence_probs.max(), sentence_probs.min(), mean, torch.sqrt(var + _EPS)]
    )


class ConfidenceHead(nn.Module):
    """Linear readout from the four explanation-score statistics to a confidence."""

    def __init__(self):
        super().__init__()
        self.linear = nn.Linear(4, 1)
        self.double()

    def forward(self, stats: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.linear(stats)).squeeze(-1)


def confidence_indication_loss(output: ModelOutput, head: ConfidenceHead) -> torch.Tensor:
    """L1 gap between predicted-class confidence and the head's estimate.

    Gradients reach the head, the sentence probabilities, and the class
    distribution, so both tasks can be re-calibrated toward agreement.
    """
    stats = sentence_prob_stats(output.sentence_probs)
    estimate = head(stats)
    return (output.class_probs[output.predicted_class] - estimate).abs()


def total_loss(parts: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """Plain unweighted sum of the active loss terms, in a fixed order."""
    if not parts:
        raise ValueError("total_loss needs at least one active term")
    ordered = [parts[name] for name in LOSS_ORDER if name in parts]
    if len(ordered) != len(parts):
        unknown = set(parts) - set(LOSS_ORDER)
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    total = ordered[0]
    for term in ordered[1:]:
        total = total + term
    return total


@dataclass
class RngBundle:
    """Randomness sources for the stochastic objectives, always injected."""

    sample_generator: torch.Generator  # Bernoulli sentence-mask sampling
    word_mask_rng: random.Random  # consistency word masking

    @classmethod
    def seeded(cls, seed: int) -> "RngBundle":
        generator = torch.Generator()
        generator.manual_seed(seed)
        return cls(sample_generator=generator, word_mask_rng=random.Random(seed + 1))


def compute_batch_losses(
    model: JointModel,
    head: ConfidenceHead | None,
    batch: Sequence[Instance],
    config: ObjectiveConfig,
    rngs: RngBundle,
    baseline: RewardBaseline,
) -> dict[str, torch.Tensor]:
    """Batch means of every active loss term, keyed by the logged loss names.

    The explanation score column is teacher-forced to the gold label during
    training; the faithfulness baseline is read before this batch's rewards
    update it.
    """
    if not batch:
        raise ValueError("empty batch")
    if config.use_confidence and head is None:
        raise ValueError("confidence objective active but no ConfidenceHead given")
    per_term: dict[str, list[torch.Tensor]] = {name: [] for name in config.active_losses()}
    samples: list[FaithfulnessSample] = []
    for instance in batch:
        output = model(instance, label_for_explanation=instance.label)
        per_term["L_C"].append(target_loss(output.class_probs, instance.label))
        if config.use_supervised_expl:
            per_term["L_E"].append(
                explanation_loss(output.sentence_probs, instance.rationales[0])
            )
        if config.use_faithfulness:
            samples.append(
                faithfulness_sample(
                    instance, output, config.sparsity_target, rngs.sample_generator, model
                )
            )
        if config.use_data_consistency:
            per_term["L_DC"].append(
                data_consistency_loss(
                    instance, output, config.num_mask_words, rngs.word_mask_rng, model
                )
            )
        if config.use_confidence:
            per_term["L_CI"].append(confidence_indication_loss(output, head))
    parts: dict[str, torch.Tensor] = {}
    for name, terms in per_term.items():
        if name == "L_F":
            continue
        parts[name] = torch.stack(terms).mean()
    if config.use_faithfulness:
        parts["L_F"] = faithfulness_loss(samples, baseline.value)
        baseline.update(float(np.mean([s.reward for s in samples])))
    return parts

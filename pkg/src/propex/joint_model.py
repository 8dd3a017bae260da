"""Joint classifier and sentence-rationale scorer with evidence-conditioned prediction."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
from torch import nn

from .corpus import Instance
from .encoder import EncoderConfig, EncodingError, TransformerEncoder, Vocab, layout

DecodePolicy = Literal["threshold", "top1"]

_EPS = 1e-12


@dataclass
class ModelOutput:
    """All forward-pass products for one instance.

    ``prior_probs`` is the class distribution read off the query marker before
    evidence conditioning; ``class_probs`` is the final conditioned
    distribution; ``sentence_probs`` holds the sigmoid of the sentence score
    column at the signal class (the predicted class unless teacher forcing
    supplied a label).
    """

    prior_probs: torch.Tensor  # [N]
    sentence_class_scores: torch.Tensor  # [S, N], raw scores
    class_probs: torch.Tensor  # [N]
    predicted_class: int
    sentence_probs: torch.Tensor  # [S], in (0, 1)


def condition(prior_probs: torch.Tensor, sentence_class_scores: torch.Tensor) -> torch.Tensor:
    """Rescale the prior class distribution by pooled per-class sentence evidence.

    Evidence per class is the mean sigmoid sentence score; the elementwise
    product with the prior is renormalised so the result stays a distribution.
    Constant evidence across classes leaves the prior unchanged.
    """
    evidence = torch.sigmoid(sentence_class_scores).mean(dim=0)
    unnorm = prior_probs * evidence
    return unnorm / unnorm.sum().clamp_min(_EPS)


class JointModel(nn.Module):
    """Two projection heads over marker representations, conditioned at the output."""

    def __init__(self, encoder_config: EncoderConfig, num_classes: int):
        super().__init__()
        if num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        self.num_classes = num_classes
        self.encoder = TransformerEncoder(encoder_config)
        hidden = encoder_config.hidden_size
        self.target_hidden = nn.Linear(hidden, hidden)
        self.target_out = nn.Linear(hidden, num_classes)
        self.expl_hidden = nn.Linear(hidden, hidden)
        self.expl_out = nn.Linear(hidden, num_classes)
        self.double()

    @property
    def vocab(self) -> Vocab:
        vocab = self.encoder.config.vocab
        if vocab is None:
            raise EncodingError("model encoder has no bound vocabulary")
        return vocab

    def forward(
        self, instance: Instance, label_for_explanation: int | None = None
    ) -> ModelOutput:
        """Run one instance; ``label_for_explanation`` teacher-forces the score column."""
        enc_input = layout(instance, self.vocab)
        hidden = self.encoder(enc_input)
        query_state, sentence_states = self.encoder.marker_states(hidden, enc_input)
        prior_probs = torch.softmax(self.target_out(self.target_hidden(query_state)), dim=-1)
        scores = self.expl_out(self.expl_hidden(sentence_states))
        class_probs = condition(prior_probs, scores)
        predicted = int(class_probs.argmax())
        signal = predicted if label_for_explanation is None else label_for_explanation
        return ModelOutput(
            prior_probs=prior_probs,
            sentence_class_scores=scores,
            class_probs=class_probs,
            predicted_class=predicted,
            sentence_probs=torch.sigmoid(scores[:, signal]),
        )


def decode_explanation(output: ModelOutput, policy: DecodePolicy = "threshold") -> np.ndarray:
    """Turn sentence probabilities into a binary selection vector.

    ``threshold`` selects every sentence with probability >= 0.5 and falls back
    to ``top1`` when nothing clears the bar; ``top1`` selects exactly the
    highest-probability sentence, ties broken by lowest index.
    """
    probs = output.sentence_probs.detach().cpu().numpy()
    selection = np.zeros(len(probs), dtype=int)
    if policy == "threshold":
        selection[probs >= 0.5] = 1
        if selection.any():
            return selection
    elif policy != "top1":
        raise ValueError(f"unknown decode policy {policy!r}")
    selection[:] = 0
    selection[int(np.argmax(probs))] = 1
    return selection


@contextmanager
def eval_mode(model):
    """Temporarily put a module in eval mode; tolerates plain callables in tests."""
    was_training = bool(getattr(model, "training", False))
    if hasattr(model, "eval"):
        model.eval()
    try:
        yield model
    finally:
        if was_training:
            model.train()

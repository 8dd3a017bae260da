"""Shared builders and stubs for the test suite."""

from __future__ import annotations

import zlib

import torch

from propex import EncoderConfig, Instance, JointModel, Vocab
from propex.joint_model import ModelOutput


def make_instance(
    sentences=(("alpha", "beta"), ("gamma",)),
    query=("what", "now"),
    answer=None,
    label=0,
    rationales=None,
    instance_id="t0",
) -> Instance:
    sentences = tuple(tuple(s) for s in sentences)
    if rationales is None:
        rationales = ((1,) + (0,) * (len(sentences) - 1),)
    return Instance(
        id=instance_id,
        query=tuple(query),
        answer=None if answer is None else tuple(answer),
        sentences=sentences,
        label=label,
        rationales=tuple(tuple(v) for v in rationales),
    )


def make_tiny_model(
    instances,
    num_classes=2,
    hidden_size=16,
    num_layers=2,
    num_heads=2,
    max_seq_len=64,
    seed=0,
) -> JointModel:
    vocab = Vocab.build(instances)
    torch.manual_seed(seed)
    config = EncoderConfig(
        hidden_size=hidden_size,
        num_layers=num_layers,
        num_heads=num_heads,
        max_seq_len=max_seq_len,
        vocab=vocab,
    )
    return JointModel(config, num_classes)


class StubModel:
    """Deterministic fake model: outputs derive from a checksum of visible tokens.

    Gives evaluator tests a model whose predictions react to masking without
    any trained weights in the loop.
    """

    def __init__(self, num_classes: int = 2):
        self.num_classes = num_classes

    def _digest(self, tokens: tuple[str, ...]) -> int:
        return zlib.crc32(" ".join(tokens).encode())

    def __call__(self, instance: Instance, label_for_explanation=None) -> ModelOutput:
        seeds = [self._digest(sent) for sent in instance.sentences]
        whole = self._digest(instance.query) + sum(seeds)
        logits = torch.tensor(
            [((whole >> (3 * c)) % 97) / 97.0 for c in range(self.num_classes)],
            dtype=torch.float64,
        )
        prior = torch.softmax(logits, dim=-1)
        scores = torch.tensor(
            [
                [((seed >> (2 * c)) % 89) / 89.0 - 0.5 for c in range(self.num_classes)]
                for seed in seeds
            ],
            dtype=torch.float64,
        )
        evidence = torch.sigmoid(scores).mean(dim=0)
        class_probs = prior * evidence
        class_probs = class_probs / class_probs.sum()
        predicted = int(class_probs.argmax())
        signal = predicted if label_for_explanation is None else label_for_explanation
        return ModelOutput(
            prior_probs=prior,
            sentence_class_scores=scores,
            class_probs=class_probs,
            predicted_class=predicted,
            sentence_probs=torch.sigmoid(scores[:, signal]),
        )

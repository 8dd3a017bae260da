from __future__ import annotations

import pytest

from propex import SyntheticSpec, generate_synthetic

SMALL_SPEC = SyntheticSpec(
    vocab_size=32,
    num_classes=2,
    sentences_per_instance=(3, 3),
    rationale_sentences=(1, 1),
    instances_per_split={"train": 40, "validation": 16, "test": 16},
    seed=5,
    sentence_length=3,
    num_query_keys=2,
)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(SMALL_SPEC)


@pytest.fixture(scope="session")
def small_train_instances(small_dataset):
    return small_dataset.splits["train"]

"""Data model, JSONL ingestion, synthetic corpus generation, and input perturbations."""

from __future__ import annotations

import json
import random
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

MASK_TOKEN = "[MASK]"

TokenSeq = tuple[str, ...]


class DataError(ValueError):
    """Malformed dataset file or a record violating the data model."""


def tokenize(text: str) -> TokenSeq:
    """Whitespace tokenisation at ingestion; subword handling is the encoder's concern."""
    return tuple(text.split())


@dataclass(frozen=True)
class Instance:
    """One classification example with sentence-level gold rationales.

    Immutable: perturbation functions return modified copies, so instances are
    safe to share across parallel data-loading workers.
    """

    id: str
    query: TokenSeq
    answer: TokenSeq | None
    sentences: tuple[TokenSeq, ...]
    label: int
    rationales: tuple[tuple[int, ...], ...]

    @property
    def num_sentences(self) -> int:
        return len(self.sentences)

    def sentence_token_count(self) -> int:
        return sum(len(s) for s in self.sentences)

    def validate(self, num_classes: int) -> None:
        if self.num_sentences < 1:
            raise DataError(f"instance {self.id!r}: needs at least one sentence")
        if not 0 <= self.label < num_classes:
            raise DataError(
                f"instance {self.id!r}: label {self.label} outside [0, {num_classes})"
            )
        for vec in self.rationales:
            if len(vec) != self.num_sentences:
                raise DataError(
                    f"instance {self.id!r}: rationale length {len(vec)} != "
                    f"{self.num_sentences} sentences"
                )
            if any(bit not in (0, 1) for bit in vec):
                raise DataError(f"instance {self.id!r}: rationale entries must be 0/1")

    def has_nonempty_rationale(self) -> bool:
        return any(any(vec) for vec in self.rationales)


@dataclass
class Dataset:
    """Named collection of instance splits sharing one class inventory."""

    name: str
    num_classes: int
    splits: dict[str, list[Instance]]
    multi_gold: bool = False

    def split(self, name: str) -> list[Instance]:
        if name not in self.splits:
            raise DataError(f"dataset {self.name!r} has no split {name!r}")
        return self.splits[name]

    def require_splits(self, names: Iterable[str]) -> None:
        missing = [n for n in names if n not in self.splits]
        if missing:
            raise DataError(f"dataset {self.name!r} is missing splits: {missing}")


def instance_from_record(
    record: Mapping, num_classes: int, where: str = "record"
) -> Instance:
    required = {"id", "query", "answer", "sentences", "label", "rationales"}
    missing = required - set(record)
    if missing:
        raise DataError(f"{where}: missing fields {sorted(missing)}")
    answer = record["answer"]
    instance = Instance(
        id=str(record["id"]),
        query=tokenize(record["query"]),
        answer=None if answer is None else tokenize(answer),
        sentences=tuple(tokenize(s) for s in record["sentences"]),
        label=int(record["label"]),
        rationales=tuple(tuple(int(b) for b in vec) for vec in record["rationales"]),
    )
    instance.validate(num_classes)
    return instance


def instance_to_record(instance: Instance) -> dict:
    return {
        "id": instance.id,
        "query": " ".join(instance.query),
        "answer": None if instance.answer is None else " ".join(instance.answer),
        "sentences": [" ".join(s) for s in instance.sentences],
        "label": instance.label,
        "rationales": [list(vec) for vec in instance.rationales],
    }


def load_jsonl(
    path: str | Path,
    num_classes: int,
    split: str = "data",
    name: str | None = None,
) -> Dataset:
    """Load one JSONL file (UTF-8, one record per line) into a single-split dataset."""
    path = Path(path)
    instances: list[Instance] = []
    with path.open(encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise DataError(f"{path}:{line_no}: malformed JSON ({err.msg})") from err
            instances.append(
                instance_from_record(record, num_classes, where=f"{path}:{line_no}")
            )
    multi_gold = any(len(inst.rationales) > 1 for inst in instances)
    return Dataset(
        name=name or path.stem,
        num_classes=num_classes,
        splits={split: instances},
        multi_gold=multi_gold,
    )


def load_split_dir(
    path: str | Path,
    num_classes: int,
    name: str | None = None,
    splits: Sequence[str] = ("train", "validation", "test"),
) -> Dataset:
    """Load ``<split>.jsonl`` files from a directory into one dataset."""
    path = Path(path)
    loaded: dict[str, list[Instance]] = {}
    for split in splits:
        file = path / f"{split}.jsonl"
        if not file.exists():
            raise DataError(f"missing split file {file}")
        loaded[split] = load_jsonl(file, num_classes, split=split).splits[split]
    multi_gold = any(
        len(inst.rationales) > 1 for insts in loaded.values() for inst in insts
    )
    return Dataset(
        name=name or path.name,
        num_classes=num_classes,
        splits=loaded,
        multi_gold=multi_gold,
    )


def write_jsonl(path: str | Path, instances: Iterable[Instance]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for instance in instances:
            handle.write(json.dumps(instance_to_record(instance)) + "\n")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters for the deterministic desk-scale corpus generator.

    The generated task is solvable only from the evidence sentences: each
    rationale sentence pairs the query's key token with class-indicator
    tokens, while distractor sentences pair the key with a random filler word.
    Labels and key tokens are assigned round-robin, so the label is exactly
    balanced within every key group and a query-only predictor scores at
    chance by construction. Indicator tokens appear ``indicator_copies`` times
    per rationale sentence: the redundancy means a single masked word rarely
    removes the evidence outright, leaving room for perturbation-robust
    scoring.
    """

    vocab_size: int = 64
    num_classes: int = 2
    sentences_per_instance: tuple[int, int] = (6, 6)
    rationale_sentences: tuple[int, int] = (1, 2)
    instances_per_split: Mapping[str, int] = field(
        default_factory=lambda: {"train": 500, "validation": 100, "test": 100}
    )
    seed: int = 0
    sentence_length: int = 5
    num_query_keys: int = 5
    indicator_copies: int = 2

    def __post_init__(self) -> None:
        lo_s, hi_s = self.sentences_per_instance
        lo_r, hi_r = self.rationale_sentences
        if not (1 <= lo_s <= hi_s):
            raise DataError("sentences_per_instance must be a range with 1 <= lo <= hi")
        if not (1 <= lo_r <= hi_r):
            raise DataError("rationale_sentences must be a range with 1 <= lo <= hi")
        if hi_r > lo_s:
            raise DataError("rationale_sentences max must not exceed sentences min")
        reserved = self.num_classes + self.num_query_keys + 1  # indicators + keys + mask
        if self.vocab_size <= reserved:
            raise DataError(
                f"vocab_size {self.vocab_size} leaves no filler words "
                f"(needs > {reserved})"
            )
        if self.indicator_copies < 1:
            raise DataError("indicator_copies must be >= 1")
        if self.sentence_length < 1 + self.indicator_copies:
            raise DataError(
                "sentence_length must fit the key token plus the indicator copies"
            )
        if self.num_classes < 2:
            raise DataError("num_classes must be >= 2")

    @property
    def indicator_tokens(self) -> tuple[str, ...]:
        return tuple(f"lbl{c}" for c in range(self.num_classes))

    @property
    def key_tokens(self) -> tuple[str, ...]:
        return tuple(f"key{k}" for k in range(self.num_query_keys))

    @property
    def filler_tokens(self) -> tuple[str, ...]:
        count = self.vocab_size - self.num_classes - self.num_query_keys - 1
        return tuple(f"w{i:03d}" for i in range(count))


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Generate a dataset whose labels are recoverable only from rationale sentences."""
    rng = random.Random(spec.seed)
    indicators = spec.indicator_tokens
    keys = spec.key_tokens
    fillers = spec.filler_tokens
    splits: dict[str, list[Instance]] = {}
    for split, count in spec.instances_per_split.items():
        instances = []
        for i in range(count):
            label = i % spec.num_classes
            key = keys[(i // spec.num_classes) % spec.num_query_keys]
            num_sents = rng.randint(*spec.sentences_per_instance)
            num_rat = rng.randint(*spec.rationale_sentences)
            rat_positions = set(rng.sample(range(num_sents), num_rat))
            sentences = []
            for j in range(num_sents):
                if j in rat_positions:
                    tokens = [key] + [indicators[label]] * spec.indicator_copies
                else:
                    tokens = [key, rng.choice(fillers)]
                tokens += [rng.choice(fillers) for _ in range(spec.sentence_length - len(tokens))]
                rng.shuffle(tokens)
                sentences.append(tuple(tokens))
            instances.append(
                Instance(
                    id=f"{split}-{i:05d}",
                    query=("about", key),
                    answer=None,
                    sentences=tuple(sentences),
                    label=label,
                    rationales=(
                        tuple(1 if j in rat_positions else 0 for j in range(num_sents)),
                    ),
                )
            )
        splits[split] = instances
    return Dataset(
        name=f"synthetic-{spec.seed}",
        num_classes=spec.num_classes,
        splits=splits,
        multi_gold=False,
    )


def mask_random_words(instance: Instance, k: int, rng: random.Random) -> Instance:
    """Replace ``k`` distinct sentence-token positions with the mask token.

    Only document sentences are perturbed; the query and answer stay intact so
    the task identity is fixed while the evidence is disturbed. Sentence
    boundaries, label, and rationales are unchanged.
    """
    if k < 0:
        raise DataError(f"mask count must be >= 0, got {k}")
    positions = [
        (j, t) for j, sent in enumerate(instance.sentences) for t in range(len(sent))
    ]
    if k > len(positions):
        warnings.warn(
            f"instance {instance.id!r}: asked to mask {k} words but only "
            f"{len(positions)} sentence tokens exist; masking all",
            stacklevel=2,
        )
        k = len(positions)
    chosen = set(rng.sample(positions, k))
    sentences = tuple(
        tuple(
            MASK_TOKEN if (j, t) in chosen else token for t, token in enumerate(sent)
        )
        for j, sent in enumerate(instance.sentences)
    )
    return Instance(
        id=instance.id,
        query=instance.query,
        answer=instance.answer,
        sentences=sentences,
        label=instance.label,
        rationales=instance.rationales,
    )


def mask_sentences(instance: Instance, keep: Sequence[int]) -> Instance:
    """Mask every token of the sentences with ``keep[j] == 0``.

    Sentence count and token positions are preserved so marker layouts stay
    comparable across forward passes; only token identity changes.
    """
    if len(keep) != instance.num_sentences:
        raise DataError(
            f"instance {instance.id!r}: keep vector length {len(keep)} != "
            f"{instance.num_sentences} sentences"
        )
    sentences = tuple(
        sent if keep[j] else tuple(MASK_TOKEN for _ in sent)
        for j, sent in enumerate(instance.sentences)
    )
    return Instance(
        id=instance.id,
        query=instance.query,
        answer=instance.answer,
        sentences=sentences,
        label=instance.label,
        rationales=instance.rationales,
    )

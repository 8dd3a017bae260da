"""Optimisation loop, checkpoint selection, and checkpoint file I/O."""

from __future__ import annotations

import copy
import logging
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import torch

from .corpus import DataError, Dataset
from .encoder import (
    EncoderConfig,
    Vocab,
    encoder_config_from_dict,
    encoder_config_to_dict,
)
from .evaluator import explanation_metrics, predict_corpus, target_metrics
from .joint_model import DecodePolicy, JointModel
from .objectives import (
    LOSS_ORDER,
    ConfidenceHead,
    ObjectiveConfig,
    RewardBaseline,
    RngBundle,
    compute_batch_losses,
    total_loss,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "propex-checkpoint@1"

# Reference hyperparameters from the original large-scale setting; the desk-scale
# defaults below replace them because the encoder here is small and randomly
# initialised rather than pretrained.
PAPER_LEARNING_RATE = 2e-5
PAPER_EPOCHS = 10
PAPER_BATCH_SIZE = 8
PAPER_SPARSITY_TARGET = 0.5


class ConfigError(ValueError):
    """Invalid run configuration."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the ids of the offending batch."""

    def __init__(self, step: int, batch_ids: Sequence[str]):
        super().__init__(
            f"non-finite loss at step {step}; last batch ids: {list(batch_ids)}"
        )
        self.step = step
        self.batch_ids = list(batch_ids)


@dataclass
class TrainConfig:
    """Optimisation hyperparameters plus the objective and encoder configs."""

    learning_rate: float = 1e-3
    # The confidence head is a 5-parameter sigmoid readout; it needs far larger
    # steps than the transformer weights to track the moving confidence target.
    head_learning_rate: float = 5e-2
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    grad_clip: float | None = 1.0  # global-norm clip; steadies the REINFORCE term
    selection_metric: str = "mean_f1"
    decode_policy: DecodePolicy = "threshold"
    objectives: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


VALIDATION_METRICS = ("acc_c", "f1_c", "p_e", "r_e", "f1_e", "mean_f1")


def validation_metrics(
    model: JointModel, instances, num_classes: int, policy: DecodePolicy = "threshold"
) -> dict[str, float]:
    """Target and explanation metrics on one split, plus their unweighted mean F1."""
    predictions = predict_corpus(model, instances, policy)
    gold_labels = [inst.label for inst in instances]
    target = target_metrics([p.label for p in predictions], gold_labels, num_classes)
    explanation = explanation_metrics(
        [p.explanation for p in predictions], [inst.rationales for inst in instances]
    )
    return {
        "acc_c": target.accuracy,
        "f1_c": target.macro_f1,
        "p_e": explanation.precision,
        "r_e": explanation.recall,
        "f1_e": explanation.macro_f1,
        "mean_f1": (target.macro_f1 + explanation.macro_f1) / 2.0,
    }


def select_checkpoint(history: Sequence[dict], metric: str) -> int:
    """Index of the history entry maximising the metric; ties go to the earliest."""
    if not history:
        raise ConfigError("empty validation history")
    if metric not in history[0]:
        raise ConfigError(
            f"unknown selection metric {metric!r}; available: "
            f"{sorted(k for k in history[0] if k != 'epoch')}"
        )
    best = 0
    for idx, entry in enumerate(history):
        if entry[metric] > history[best][metric]:
            best = idx
    return best


@dataclass
class TrainResult:
    """Trained model plus everything needed to reproduce the selection."""

    model: JointModel
    head: ConfidenceHead | None
    history: list[dict]
    log: list[dict]
    best_epoch: int
    best_state: dict

    def restore_best(self) -> None:
        self.model.load_state_dict(self.best_state["model"])
        if self.head is not None and self.best_state.get("head") is not None:
            self.head.load_state_dict(self.best_state["head"])


def _snapshot(model: JointModel, head: ConfidenceHead | None) -> dict:
    return {
        "model": copy.deepcopy(model.state_dict()),
        "head": None if head is None else copy.deepcopy(head.state_dict()),
    }


def train(config: TrainConfig, dataset: Dataset) -> TrainResult:
    """Seeded training over the train split with per-epoch validation selection.

    Per step: shuffle-ordered batch, batch-mean losses, one optimiser step.
    The retained checkpoint maximises the configured validation metric. Raises
    TrainingDiverged (with the batch ids) the moment the total loss goes
    non-finite.
    """
    dataset.require_splits(("train", "validation"))
    train_instances = dataset.split("train")
    val_instances = dataset.split("validation")
    objectives = config.objectives
    if objectives.use_supervised_expl:
        for inst in train_instances:
            if not inst.rationales or not inst.has_nonempty_rationale():
                raise DataError(
                    f"instance {inst.id!r} lacks a nonempty rationale but "
                    "supervised explanation training is enabled"
                )

    torch.manual_seed(config.seed)
    encoder_config = config.encoder
    if encoder_config.vocab is None:
        encoder_config = encoder_config.with_vocab(Vocab.build(train_instances))
    model = JointModel(encoder_config, dataset.num_classes)
    head = ConfidenceHead() if objectives.use_confidence else None
    parameters = list(model.parameters())
    groups = [{"params": list(model.parameters()), "lr": config.learning_rate}]
    if head is not None:
        parameters += list(head.parameters())
        groups.append({"params": list(head.parameters()), "lr": config.head_learning_rate})
    optimiser = torch.optim.Adam(groups)

    shuffle_rng = random.Random(config.seed)
    rngs = RngBundle.seeded(config.seed)
    baseline = RewardBaseline(
        momentum=objectives.baseline_momentum, enabled=objectives.use_reward_baseline
    )

    history: list[dict] = []
    log: list[dict] = []
    best_metric = -math.inf
    best_epoch = 0
    best_state = _snapshot(model, head)
    step = 0
    for epoch in range(config.epochs):
        order = list(range(len(train_instances)))
        shuffle_rng.shuffle(order)
        model.train()
        for start in range(0, len(order), config.batch_size):
            batch = [train_instances[i] for i in order[start : start + config.batch_size]]
            parts = compute_batch_losses(model, head, batch, objectives, rngs, baseline)
            record = {"step": step}
            for name in LOSS_ORDER:
                if name in parts:
                    record[name] = float(parts[name].detach())
            # summed in record-key order so total == sum(components) holds exactly
            record["total"] = sum(record[name] for name in record if name != "step")
            if not math.isfinite(record["total"]):
                raise TrainingDiverged(step, [inst.id for inst in batch])
            loss = total_loss(parts)
            optimiser.zero_grad()
            loss.backward()
            if config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(parameters, config.grad_clip)
            optimiser.step()
            log.append(record)
            step += 1
        metrics = validation_metrics(
            model, val_instances, dataset.num_classes, config.decode_policy
        )
        history.append({"epoch": epoch, **metrics})
        logger.info(
            "epoch %d: %s", epoch, " ".join(f"{k}={v:.4f}" for k, v in metrics.items())
        )
        if config.selection_metric not in metrics:
            raise ConfigError(
                f"unknown selection metric {config.selection_metric!r}; "
                f"available: {sorted(metrics)}"
            )
        if metrics[config.selection_metric] > best_metric:
            best_metric = metrics[config.selection_metric]
            best_epoch = epoch
            best_state = _snapshot(model, head)
    return TrainResult(
        model=model,
        head=head,
        history=history,
        log=log,
        best_epoch=best_epoch,
        best_state=best_state,
    )


def run_seeds(config: TrainConfig, dataset: Dataset, seeds: Sequence[int]) -> list[TrainResult]:
    """Independent training runs differing only in seed (multi-seed protocol)."""
    return [train(replace(config, seed=seed), dataset) for seed in seeds]


def save_checkpoint(
    path: str | Path,
    model: JointModel,
    head: ConfidenceHead | None = None,
    metadata: dict | None = None,
) -> None:
    """Self-describing checkpoint container; round-trips parameters bit-exactly."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "num_classes": model.num_classes,
        "encoder_config": encoder_config_to_dict(model.encoder.config),
        "model_state": model.state_dict(),
        "head_state": None if head is None else head.state_dict(),
        "metadata": metadata or {},
    }
    torch.save(payload, Path(path))


@dataclass
class LoadedCheckpoint:
    model: JointModel
    head: ConfidenceHead | None
    metadata: dict


def load_checkpoint(path: str | Path) -> LoadedCheckpoint:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint file {path} does not exist")
    payload = torch.load(path, weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unrecognised checkpoint format in {path}")
    encoder_config = encoder_config_from_dict(payload["encoder_config"])
    model = JointModel(encoder_config, payload["num_classes"])
    model.load_state_dict(payload["model_state"])
    head = None
    if payload["head_state"] is not None:
        head = ConfidenceHead()
        head.load_state_dict(payload["head_state"])
    return LoadedCheckpoint(model=model, head=head, metadata=payload.get("metadata", {}))

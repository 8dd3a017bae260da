"""Command-line entry point: synth | train | eval | sweep, driven by a YAML config."""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import yaml

from .corpus import (
    DataError,
    Dataset,
    SyntheticSpec,
    generate_synthetic,
    load_split_dir,
    write_jsonl,
)
from .encoder import EncoderConfig, EncodingError
from .evaluator import evaluate, predict_corpus
from .objectives import ObjectiveConfig, objective_preset
from .trainer import (
    ConfigError,
    TrainConfig,
    TrainingDiverged,
    load_checkpoint,
    save_checkpoint,
    train,
)

logger = logging.getLogger(__name__)

_EVAL_KEYS = {"policy", "num_mask_words", "repeats", "seed", "properties", "query_only"}
_DATA_KEYS = {"path", "num_classes"}
_SWEEP_KEYS = {"learning_rate", "sparsity_target", "num_mask_words"}
_TOP_KEYS = {"data", "synthetic", "model", "objectives", "train", "eval", "sweep", "output_dir"}


def _reject_unknown(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where} section: {sorted(unknown)}")


def _dataclass_from_section(cls, section: dict, where: str, **extra):
    names = {f.name for f in fields(cls)}
    _reject_unknown(section, names - set(extra), where)
    try:
        return cls(**section, **extra)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid {where} section: {err}") from err


def load_config(path: str | Path) -> dict:
    with Path(path).open(encoding="utf-8") as handle:
        config = yaml.safe_load(handle)
    if not isinstance(config, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    _reject_unknown(config, _TOP_KEYS, "top-level")
    return config


def parse_synthetic_spec(section: dict) -> SyntheticSpec:
    section = dict(section)
    for key in ("sentences_per_instance", "rationale_sentences"):
        if key in section:
            section[key] = tuple(section[key])
    return _dataclass_from_section(SyntheticSpec, section, "synthetic")


def parse_encoder_config(section: dict) -> EncoderConfig:
    return _dataclass_from_section(EncoderConfig, section, "model")


def parse_objective_config(section: dict) -> ObjectiveConfig:
    section = dict(section)
    preset = section.pop("preset", None)
    if preset is not None:
        names = {f.name for f in fields(ObjectiveConfig)}
        flag_names = {
            "use_supervised_expl",
            "use_faithfulness",
            "use_data_consistency",
            "use_confidence",
        }
        _reject_unknown(section, names, "objectives")
        overlap = flag_names & set(section)
        if overlap:
            raise ConfigError(
                f"objectives preset {preset!r} conflicts with explicit flags {sorted(overlap)}"
            )
        try:
            return objective_preset(preset, **section)
        except ValueError as err:
            raise ConfigError(str(err)) from err
    return _dataclass_from_section(ObjectiveConfig, section, "objectives")


def parse_train_config(
    section: dict, objectives: ObjectiveConfig, encoder: EncoderConfig
) -> TrainConfig:
    return _dataclass_from_section(
        TrainConfig, section, "train", objectives=objectives, encoder=encoder
    )


def resolve_dataset(config: dict) -> Dataset:
    has_path = "data" in config and config["data"] and config["data"].get("path")
    if has_path and "synthetic" in config:
        raise ConfigError("give either data.path or a synthetic section, not both")
    if has_path:
        data = config["data"]
        _reject_unknown(data, _DATA_KEYS, "data")
        if "num_classes" not in data:
            raise ConfigError("data section needs num_classes")
        return load_split_dir(data["path"], int(data["num_classes"]))
    if "synthetic" in config:
        return generate_synthetic(parse_synthetic_spec(config["synthetic"]))
    raise ConfigError("config needs a data.path or a synthetic section")


def resolved_config_dict(config: dict) -> dict:
    """Materialise every default so a snapshot reproduces the run exactly."""
    resolved = dict(config)
    if "synthetic" in config:
        resolved["synthetic"] = asdict(parse_synthetic_spec(config["synthetic"]))
        resolved["synthetic"]["instances_per_split"] = dict(
            resolved["synthetic"]["instances_per_split"]
        )
    objectives = parse_objective_config(config.get("objectives", {}))
    resolved["objectives"] = asdict(objectives)
    encoder = parse_encoder_config(config.get("model", {}))
    model_dict = asdict(encoder)
    model_dict.pop("vocab", None)  # bound at train time from the corpus
    resolved["model"] = model_dict
    train_cfg = parse_train_config(config.get("train", {}), objectives, encoder)
    resolved["train"] = {
        "learning_rate": train_cfg.learning_rate,
        "epochs": train_cfg.epochs,
        "batch_size": train_cfg.batch_size,
        "seed": train_cfg.seed,
        "grad_clip": train_cfg.grad_clip,
        "selection_metric": train_cfg.selection_metric,
        "decode_policy": train_cfg.decode_policy,
    }
    eval_section = dict(config.get("eval", {}))
    _reject_unknown(eval_section, _EVAL_KEYS, "eval")
    resolved["eval"] = {
        "policy": eval_section.get("policy", "threshold"),
        "num_mask_words": eval_section.get("num_mask_words", objectives.num_mask_words),
        "repeats": eval_section.get("repeats", 5),
        "seed": eval_section.get("seed", 0),
        "properties": bool(eval_section.get("properties", False)),
        "query_only": bool(eval_section.get("query_only", False)),
    }
    return resolved


def _write_snapshot(config: dict, out_dir: Path) -> None:
    snapshot = resolved_config_dict(config)
    with (out_dir / "config_resolved.yaml").open("w", encoding="utf-8") as handle:
        yaml.safe_dump(snapshot, handle, sort_keys=False)


def _output_dir(config: dict, override: str | None) -> Path:
    out = override or config.get("output_dir")
    if not out:
        raise ConfigError("no output directory (set output_dir or pass --output)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_synth(config: dict, out_dir: Path) -> None:
    if "synthetic" not in config:
        raise ConfigError("synth command needs a synthetic section")
    spec = parse_synthetic_spec(config["synthetic"])
    dataset = generate_synthetic(spec)
    for split, instances in dataset.splits.items():
        write_jsonl(out_dir / f"{split}.jsonl", instances)
    spec_dict = asdict(spec)
    spec_dict["instances_per_split"] = dict(spec_dict["instances_per_split"])
    manifest = {
        "seed": spec.seed,
        "num_classes": spec.num_classes,
        "spec": spec_dict,
        "counts": {split: len(insts) for split, insts in dataset.splits.items()},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    _write_snapshot(config, out_dir)
    logger.info("wrote %s splits to %s", len(dataset.splits), out_dir)


def cmd_train(config: dict, out_dir: Path) -> None:
    dataset = resolve_dataset(config)
    objectives = parse_objective_config(config.get("objectives", {}))
    encoder = parse_encoder_config(config.get("model", {}))
    train_config = parse_train_config(config.get("train", {}), objectives, encoder)
    result = train(train_config, dataset)
    metadata = {
        "objectives": asdict(objectives),
        "best_epoch": result.best_epoch,
        "seed": train_config.seed,
        "dataset": dataset.name,
    }
    save_checkpoint(out_dir / "final.ckpt", result.model, result.head, metadata)
    result.restore_best()
    save_checkpoint(out_dir / "best.ckpt", result.model, result.head, metadata)
    with (out_dir / "train_log.jsonl").open("w", encoding="utf-8") as handle:
        for record in result.log:
            handle.write(json.dumps(record) + "\n")
    (out_dir / "history.json").write_text(json.dumps(result.history, indent=2) + "\n")
    _write_snapshot(config, out_dir)
    best = result.history[result.best_epoch]
    logger.info(
        "best epoch %d: %s",
        result.best_epoch,
        " ".join(f"{k}={v:.4f}" for k, v in best.items() if k != "epoch"),
    )


def cmd_eval(
    config: dict,
    out_dir: Path,
    checkpoint_path: str,
    properties: bool,
    query_only: bool,
) -> None:
    dataset = resolve_dataset(config)
    dataset.require_splits(("test",))
    loaded = load_checkpoint(checkpoint_path)
    eval_section = dict(config.get("eval", {}))
    _reject_unknown(eval_section, _EVAL_KEYS, "eval")
    policy = eval_section.get("policy", "threshold")
    report = evaluate(
        loaded.model,
        dataset,
        split="test",
        head=loaded.head,
        policy=policy,
        num_mask_words=int(eval_section.get("num_mask_words", 2)),
        repeats=int(eval_section.get("repeats", 5)),
        seed=int(eval_section.get("seed", 0)),
        properties=properties or bool(eval_section.get("properties", False)),
        query_only=query_only or bool(eval_section.get("query_only", False)),
    )
    (out_dir / "report.json").write_text(report.to_json() + "\n")
    (out_dir / "report.md").write_text(report.to_markdown())
    with (out_dir / "predictions.jsonl").open("w", encoding="utf-8") as handle:
        for pred in predict_corpus(loaded.model, dataset.split("test"), policy):
            handle.write(
                json.dumps(
                    {
                        "id": pred.id,
                        "predicted_label": pred.label,
                        "p_C": [float(p) for p in pred.class_probs],
                        "sentence_probs": [float(p) for p in pred.sentence_probs],
                        "explanation": [int(b) for b in pred.explanation],
                    }
                )
                + "\n"
            )
    _write_snapshot(config, out_dir)
    logger.info("report written to %s", out_dir / "report.json")


def cmd_sweep(config: dict, out_dir: Path) -> None:
    if "sweep" not in config:
        raise ConfigError("sweep command needs a sweep section")
    sweep = config["sweep"]
    _reject_unknown(sweep, _SWEEP_KEYS, "sweep")
    if not sweep:
        raise ConfigError("sweep section lists no hyperparameters")
    dataset = resolve_dataset(config)
    base_objectives = parse_objective_config(config.get("objectives", {}))
    encoder = parse_encoder_config(config.get("model", {}))
    base_train = parse_train_config(config.get("train", {}), base_objectives, encoder)
    names = sorted(sweep)
    grids = [sweep[name] for name in names]
    results = []
    for combo in itertools.product(*grids):
        assignment = dict(zip(names, combo))
        objectives = replace(
            base_objectives,
            **{k: v for k, v in assignment.items() if k in ("sparsity_target", "num_mask_words")},
        )
        train_config = replace(
            base_train,
            objectives=objectives,
            **{k: v for k, v in assignment.items() if k == "learning_rate"},
        )
        result = train(train_config, dataset)
        best = result.history[result.best_epoch]
        results.append(
            {
                "assignment": assignment,
                "best_epoch": result.best_epoch,
                "validation": {k: v for k, v in best.items() if k != "epoch"},
            }
        )
        logger.info(
            "sweep %s -> %s=%.4f",
            assignment,
            base_train.selection_metric,
            best[base_train.selection_metric],
        )
    results.sort(
        key=lambda r: r["validation"][base_train.selection_metric], reverse=True
    )
    (out_dir / "sweep_results.json").write_text(json.dumps(results, indent=2) + "\n")
    _write_snapshot(config, out_dir)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="propex",
        description=(
            "Joint sentence-rationale extraction and classification with "
            "explanation-property training objectives"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic dataset to JSONL files")
    train_p = sub.add_parser("train", help="train a model and write checkpoints")
    eval_p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    sweep_p = sub.add_parser("sweep", help="grid-search hyperparameters on validation")
    for p in (synth, train_p, eval_p, sweep_p):
        p.add_argument("-c", "--config", required=True, help="YAML run config")
        p.add_argument("-o", "--output", help="output directory (overrides output_dir)")
    eval_p.add_argument("--checkpoint", required=True, help="checkpoint file to load")
    eval_p.add_argument(
        "--properties",
        action="store_true",
        help="also compute sufficiency/completeness, consistency, and confidence blocks",
    )
    eval_p.add_argument(
        "--query-only",
        action="store_true",
        help="also evaluate with all document sentences masked",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        out_dir = _output_dir(config, args.output)
        if args.command == "synth":
            cmd_synth(config, out_dir)
        elif args.command == "train":
            cmd_train(config, out_dir)
        elif args.command == "eval":
            cmd_eval(config, out_dir, args.checkpoint, args.properties, args.query_only)
        elif args.command == "sweep":
            cmd_sweep(config, out_dir)
    except (ConfigError, DataError, EncodingError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except TrainingDiverged as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Joint sentence-rationale extraction and classification with property objectives."""

from .corpus import (
    MASK_TOKEN,
    DataError,
    Dataset,
    Instance,
    SyntheticSpec,
    generate_synthetic,
    load_jsonl,
    load_split_dir,
    mask_random_words,
    mask_sentences,
    write_jsonl,
)
from .encoder import (
    EncoderConfig,
    EncoderInput,
    EncodingError,
    TransformerEncoder,
    Vocab,
    layout,
)
from .evaluator import (
    EvalReport,
    confidence_indication_metric,
    data_consistency_metric,
    evaluate,
    explanation_metrics,
    fit_confidence_probe,
    joint_accuracy,
    predict_corpus,
    query_only_eval,
    sufficiency_completeness,
    target_metrics,
)
from .joint_model import JointModel, ModelOutput, condition, decode_explanation
from .objectives import (
    ConfidenceHead,
    FaithfulnessSample,
    ObjectiveConfig,
    RewardBaseline,
    confidence_indication_loss,
    data_consistency_loss,
    explanation_loss,
    faithfulness_loss,
    faithfulness_reward,
    faithfulness_sample,
    objective_preset,
    target_loss,
    total_loss,
)
from .trainer import (
    ConfigError,
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    load_checkpoint,
    run_seeds,
    save_checkpoint,
    select_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "MASK_TOKEN",
    "ConfidenceHead",
    "ConfigError",
    "DataError",
    "Dataset",
    "EncoderConfig",
    "EncoderInput",
    "EncodingError",
    "EvalReport",
    "FaithfulnessSample",
    "Instance",
    "JointModel",
    "ModelOutput",
    "ObjectiveConfig",
    "RewardBaseline",
    "SyntheticSpec",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "TransformerEncoder",
    "Vocab",
    "condition",
    "confidence_indication_loss",
    "confidence_indication_metric",
    "data_consistency_loss",
    "data_consistency_metric",
    "decode_explanation",
    "evaluate",
    "explanation_loss",
    "explanation_metrics",
    "faithfulness_loss",
    "faithfulness_reward",
    "faithfulness_sample",
    "fit_confidence_probe",
    "generate_synthetic",
    "joint_accuracy",
    "layout",
    "load_checkpoint",
    "load_jsonl",
    "load_split_dir",
    "mask_random_words",
    "mask_sentences",
    "objective_preset",
    "predict_corpus",
    "query_only_eval",
    "run_seeds",
    "save_checkpoint",
    "select_checkpoint",
    "sufficiency_completeness",
    "target_loss",
    "target_metrics",
    "total_loss",
    "train",
    "write_jsonl",
]

"""Descriptor-coverage toolkit.

Diagnoses and corrects the situation where a model's clinical-concept
descriptors are unevenly covered across class/subgroup cells: audit coverage,
train a descriptor-conditioned attention encoder with alignment and
decorrelation objectives, and evaluate fairness/calibration/grounding.
"""

from .coverage import (
    CdiResult,
    CoverageEntry,
    CoverageTable,
    ErrorEntry,
    ErrorTable,
    LongTailReport,
    SCGKey,
    cdi,
    coverage_report,
    coverage_table,
    coverage_table_from_csv,
    coverage_table_to_csv,
    eligible_keys,
    enumerate_scgs,
    hard_coverage,
    pearson,
    pearson_with_flag,
    soft_coverage,
)
from .dam import ChannelNorm, DescriptorModulator, descriptor_uncertainty
from .data import (
    DataDims,
    Dataset,
    GeneratorTruth,
    Sample,
    SynthConfig,
    generate_synthetic_dataset,
    load_dataset,
    load_manifest,
    planted_presence_rates,
    save_dataset,
    split_dataset,
    write_manifest,
)
from .encoder import (
    ORDERINGS,
    EncoderConfig,
    ForwardOutput,
    SemanticEncoder,
    load_model_archive,
    save_model_archive,
)
from .errors import (
    ConfigurationError,
    DescovError,
    DiagnosticError,
    ManifestError,
    TrainingError,
)
from .evaluation import (
    MetricReport,
    PredictionSet,
    auroc,
    average_precision,
    balanced_accuracy,
    build_report,
    classification_metrics,
    expected_calibration_error,
    fairness_metrics,
    grounding_metrics,
    macro_f1,
    scg_error_table,
    sensitivity_at_specificity,
)
from .objectives import (
    AlignmentHead,
    BatchContext,
    LossWeights,
    alignment_loss,
    batch_group_stats,
    classification_loss,
    coverage_constants,
    decorrelation_loss,
    descriptor_loss,
    gradient_check,
    soft_group_tpr,
    total_loss,
)
from .sdm import SDM_VARIANTS, SemanticMapper, normalize_channels
from .training import (
    DESK_SPLIT_RATIOS,
    TrainConfig,
    TrainResult,
    desk_preset,
    evaluate,
    evaluate_checkpoint,
    learning_rate_at,
    load_checkpoint,
    predict,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentHead",
    "BatchContext",
    "CdiResult",
    "ChannelNorm",
    "ConfigurationError",
    "CoverageEntry",
    "CoverageTable",
    "DESK_SPLIT_RATIOS",
    "DataDims",
    "Dataset",
    "DescovError",
    "DescriptorModulator",
    "DiagnosticError",
    "EncoderConfig",
    "ErrorEntry",
    "ErrorTable",
    "ForwardOutput",
    "GeneratorTruth",
    "LongTailReport",
    "LossWeights",
    "ManifestError",
    "MetricReport",
    "ORDERINGS",
    "PredictionSet",
    "SCGKey",
    "SDM_VARIANTS",
    "Sample",
    "SemanticEncoder",
    "SemanticMapper",
    "SynthConfig",
    "TrainConfig",
    "TrainResult",
    "TrainingError",
    "alignment_loss",
    "auroc",
    "average_precision",
    "balanced_accuracy",
    "batch_group_stats",
    "build_report",
    "cdi",
    "classification_loss",
    "classification_metrics",
    "coverage_constants",
    "coverage_report",
    "coverage_table",
    "coverage_table_from_csv",
    "coverage_table_to_csv",
    "decorrelation_loss",
    "descriptor_loss",
    "descriptor_uncertainty",
    "desk_preset",
    "eligible_keys",
    "enumerate_scgs",
    "evaluate",
    "evaluate_checkpoint",
    "expected_calibration_error",
    "fairness_metrics",
    "generate_synthetic_dataset",
    "gradient_check",
    "grounding_metrics",
    "hard_coverage",
    "learning_rate_at",
    "load_checkpoint",
    "load_dataset",
    "load_manifest",
    "load_model_archive",
    "macro_f1",
    "normalize_channels",
    "pearson",
    "pearson_with_flag",
    "planted_presence_rates",
    "predict",
    "save_dataset",
    "save_model_archive",
    "scg_error_table",
    "sensitivity_at_specificity",
    "soft_coverage",
    "soft_group_tpr",
    "split_dataset",
    "total_loss",
    "train",
    "write_manifest",
]

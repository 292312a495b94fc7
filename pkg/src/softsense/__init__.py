"""Soft-sensing classifier with attribution-guided sensor-weight fine-tuning."""

from .autodiff import (
    ComputationRecord,
    GeometryError,
    GradientSet,
    NumericError,
    RunningStats,
    ShapeError,
    Tensor,
    backward,
    grad,
)
from .data import (
    DataFormatError,
    DatasetSplit,
    FeatureScaler,
    SensorSample,
    SyntheticSpec,
    class_weights,
    generate,
    load_csv,
    write_csv,
)
from .finetune import (
    ConfusionPartition,
    FinetuneConfig,
    WeightTrace,
    finetune,
    finetune_recall_biased,
    finetune_round,
    partition_confusion,
    weight_gradient,
)
from .metrics import MetricReport, auroc, evaluate_split, tpr
from .model import (
    ArchitectureConfig,
    CorruptCheckpointError,
    LinearProbe,
    ModelParams,
    TaskOutput,
    TrainingConfig,
    TrainingDivergenceError,
    forward,
    init_params,
    load_checkpoint,
    predict_classes,
    save_checkpoint,
    train,
    weighted_bce,
)
from .saliency import (
    CLASS_FAILED,
    CLASS_PASSED,
    AggregateSaliency,
    SaliencyMap,
    aggregate,
    chain_rule_input_gradient,
    clip_small,
    saliency,
    standardize,
)

__version__ = "0.1.0"

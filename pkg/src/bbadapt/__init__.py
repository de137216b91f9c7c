"""Black-box unsupervised domain adaptation.

Step one distills a target model from truncated predictions of an
inaccessible source model; step two fine-tunes it on unlabeled target data
with a prior-debiased consistency loss.
"""

__version__ = "0.1.0"

from .data import (
    AugmentationPolicy,
    Dataset,
    Example,
    LabelShiftParams,
    SyntheticShiftSpec,
    apply_label_shift,
    augment,
    load_image_list,
    make_synthetic_shift,
)
from .distill import DistillFlags, LossBreakdown, run_distillation
from .finetune import FinetuneFlags, run_finetune
from .harness import ExperimentConfig, emit_report, evaluate, parse_config, run_experiment
from .networks import OptimConfig, SourceModel, TargetModel, train_source
from .oracle import BlackBoxOracle, QueryMode, QueryResult, query_dataset
from .pseudo import Hyperparams, TeacherBank

__all__ = [
    "AugmentationPolicy",
    "BlackBoxOracle",
    "Dataset",
    "DistillFlags",
    "Example",
    "ExperimentConfig",
    "FinetuneFlags",
    "Hyperparams",
    "LabelShiftParams",
    "LossBreakdown",
    "OptimConfig",
    "QueryMode",
    "QueryResult",
    "SourceModel",
    "SyntheticShiftSpec",
    "TargetModel",
    "TeacherBank",
    "apply_label_shift",
    "augment",
    "emit_report",
    "evaluate",
    "load_image_list",
    "make_synthetic_shift",
    "parse_config",
    "query_dataset",
    "run_distillation",
    "run_experiment",
    "run_finetune",
    "train_source",
]

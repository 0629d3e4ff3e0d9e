"""Depth-guided human mesh recovery on synthetic feature grids.

Gated RGB-depth fusion, metric bone-length calibration with a
depth-aware pose initializer, a gated residual refinement stage, and a
two-phase training pipeline, all differentiated by a hand-written tape
over float64 numpy with an optional compiled kernel backend.
"""

from .backend import BACKEND_NAME
from .body import BodyTemplate, build_template
from .metrics import LossWeights, MetricReport, compute_metrics, total_loss
from .model import (
    ABLATION_CELLS,
    AblationFlags,
    ModelConfig,
    ModelParams,
    forward,
    init_model,
    load_params,
    save_params,
)
from .pipeline import (
    RunConfig,
    RunReport,
    TrainingDiverged,
    ablation_suite,
    evaluate,
    load_config,
    seq_length_sweep,
    train,
)
from .synth import CameraModel, DataConfig, SequenceSample, make_dataset, make_sample

__version__ = "0.1.0"

__all__ = [
    "ABLATION_CELLS",
    "AblationFlags",
    "BACKEND_NAME",
    "BodyTemplate",
    "CameraModel",
    "DataConfig",
    "LossWeights",
    "MetricReport",
    "ModelConfig",
    "ModelParams",
    "RunConfig",
    "RunReport",
    "SequenceSample",
    "TrainingDiverged",
    "ablation_suite",
    "build_template",
    "compute_metrics",
    "evaluate",
    "forward",
    "init_model",
    "load_params",
    "make_dataset",
    "make_sample",
    "save_params",
    "seq_length_sweep",
    "total_loss",
    "train",
    "__version__",
]

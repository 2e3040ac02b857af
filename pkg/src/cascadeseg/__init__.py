"""Multi-stage cascaded UNet segmentation on a small numpy tensor engine."""

from .config import TrainConfig
from .data import (
    SamplePair,
    SynthParams,
    generate_synthetic,
    load_checkpoint,
    load_dataset,
    resize,
    save_checkpoint,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    ShapeError,
    TrainingError,
)
from .losses import StageWeights, jaccard_distance_loss, loss_no_ds, weighted_loss
from .metrics import compute_metrics, confusion, evaluate
from .models import (
    CascadeModel,
    StageModel,
    UNetConfig,
    build_cascade,
    build_stage,
    cascade_forward,
    stage_forward,
)
from .tensor import Tensor, backward, grad_check
from .training import augment, normalize_image, predict, train

__version__ = "0.1.0"

__all__ = [
    "CascadeModel",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "SamplePair",
    "ShapeError",
    "StageModel",
    "StageWeights",
    "SynthParams",
    "Tensor",
    "TrainConfig",
    "TrainingError",
    "UNetConfig",
    "augment",
    "backward",
    "build_cascade",
    "build_stage",
    "cascade_forward",
    "compute_metrics",
    "confusion",
    "evaluate",
    "generate_synthetic",
    "grad_check",
    "jaccard_distance_loss",
    "load_checkpoint",
    "load_dataset",
    "loss_no_ds",
    "normalize_image",
    "predict",
    "resize",
    "save_checkpoint",
    "stage_forward",
    "train",
    "weighted_loss",
]

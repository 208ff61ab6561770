"""Gradient-guided sparse fine-tuning at desk scale.

Pick the few parameters whose gradients matter for a downstream task,
train only those, and ship the result as a sparse delta over the base
checkpoint. Everything runs on plain float64 numpy with an optional
compiled kernel backend.
"""

from .autodiff import Tensor, backward, no_grad
from .data import Dataset, SynthSpec, load_csv, load_idx, synth_task
from .errors import (
    CompatibilityError,
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    GpsError,
    InputError,
    IntegrityError,
    NumericError,
    StateError,
)
from .models import Model, ModelSpec, build_model, enumerate_neurons
from .selection import (
    GradientSnapshot,
    SelectionConfig,
    SelectionMask,
    accumulate_gradients,
    build_mask,
    neuron_budget,
    scl_loss,
)
from .training import TrainConfig, evaluate, finetune, lr_at, masked_step
from .delta import (
    SparseDelta,
    apply_delta,
    checkpoint_digest,
    export_delta,
    load_checkpoint,
    load_delta,
    load_mask,
    mask_distribution,
    mask_overlap,
    save_checkpoint,
    save_delta,
    save_mask,
)

__version__ = "0.1.0"

__all__ = [
    "CompatibilityError",
    "ConfigError",
    "ContractError",
    "Dataset",
    "DimensionError",
    "FormatError",
    "GpsError",
    "GradientSnapshot",
    "InputError",
    "IntegrityError",
    "Model",
    "ModelSpec",
    "NumericError",
    "SelectionConfig",
    "SelectionMask",
    "SparseDelta",
    "StateError",
    "SynthSpec",
    "Tensor",
    "TrainConfig",
    "accumulate_gradients",
    "apply_delta",
    "backward",
    "build_mask",
    "build_model",
    "checkpoint_digest",
    "enumerate_neurons",
    "evaluate",
    "export_delta",
    "finetune",
    "load_checkpoint",
    "load_csv",
    "load_delta",
    "load_idx",
    "load_mask",
    "lr_at",
    "mask_distribution",
    "mask_overlap",
    "masked_step",
    "neuron_budget",
    "no_grad",
    "save_checkpoint",
    "save_delta",
    "save_mask",
    "scl_loss",
    "synth_task",
]

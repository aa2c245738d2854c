"""Masked patch-prediction pretraining with packed variable-resolution batches."""

__version__ = "0.1.0"

from .model import ModelConfig, build_models
from .packing import PackerConfig, PackedBatch, PackingStream, pack
from .pipeline import PipelineConfig, RawImage, sample_pipeline, stream_rng
from .training import TrainConfig, TrainState, run_training, train_step

__all__ = [
    "ModelConfig",
    "PackedBatch",
    "PackerConfig",
    "PackingStream",
    "PipelineConfig",
    "RawImage",
    "TrainConfig",
    "TrainState",
    "build_models",
    "pack",
    "run_training",
    "sample_pipeline",
    "stream_rng",
    "train_step",
]

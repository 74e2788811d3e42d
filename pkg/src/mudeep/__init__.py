"""Multi-scale Siamese network for person re-identification, in NumPy."""
from .checkpoint import Checkpoint, load_checkpoint, load_into_model, save_checkpoint
from .config import RunConfig
from .data import ImageSet, SampleRecord, load_manifest, synth_generate
from .errors import (CheckpointError, ConfigError, DataFormatError, GeometryError, MuDeepError,
                     NumericError, ProtocolError, ShapeError)
from .evaluation import CmcResult, cmc_from_scores, cmc_single_shot, export_saliency
from .model import ModelConfig, MuDeep
from .tensor import Parameter, Tape, Tensor, precision
from .training import TrainConfig, Trainer, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "CmcResult",
    "ConfigError",
    "DataFormatError",
    "GeometryError",
    "ImageSet",
    "ModelConfig",
    "MuDeep",
    "MuDeepError",
    "NumericError",
    "Parameter",
    "ProtocolError",
    "RunConfig",
    "SampleRecord",
    "ShapeError",
    "Tape",
    "Tensor",
    "TrainConfig",
    "Trainer",
    "cmc_from_scores",
    "cmc_single_shot",
    "export_saliency",
    "load_checkpoint",
    "load_into_model",
    "load_manifest",
    "precision",
    "save_checkpoint",
    "synth_generate",
    "train",
]

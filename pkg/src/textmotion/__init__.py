"""Text-to-motion generation with a multi-expert VQ-VAE tokenizer and a multi-path masked transformer."""

__version__ = "0.1.0"

from .config import DecodeSchedule, MmtConfig, TrainConfig, VqConfig
from .errors import ContractError, FormatError, NumericError, ShapeError, TextMotionError
from .inference import MotionPipeline
from .mmt import MultipathTransformer, TextMotionModel
from .pose_features import MotionFeatureSequence, SkeletonClip, featurize, recover
from .vqvae import VqVae

__all__ = [
    "ContractError", "DecodeSchedule", "FormatError", "MmtConfig", "MotionFeatureSequence",
    "MotionPipeline", "MultipathTransformer", "NumericError", "ShapeError", "SkeletonClip",
    "TextMotionError", "TextMotionModel", "TrainConfig", "VqConfig", "VqVae", "featurize", "recover",
]

"""Four-class dementia staging from MRI slices with from-scratch CNN/Transformer models."""

from .autodiff import Tensor, no_grad
from .ensemble import Ensemble, Prediction, fuse_average
from .errors import HybridError
from .estimators import ImageClassifier, SliceExtractor, SliceResizer, SoftVotingClassifier
from .models import ModelConfig, build_model, desk_config
from .trainer import TrainConfig, Trainer, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Ensemble", "HybridError", "ImageClassifier", "ModelConfig", "Prediction", "SliceExtractor",
    "SliceResizer", "SoftVotingClassifier", "Tensor", "TrainConfig", "Trainer", "build_model",
    "desk_config", "evaluate", "fuse_average", "no_grad", "train",
]

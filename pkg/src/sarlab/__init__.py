"""Multi-scale SAR ship chip recognition laboratory.

A small autodiff engine, a three-scale residual feature pyramid, principal
vector attention with a cosine-margin triplet hinge, an adaptive-weighted
classifier, a synthetic chip generator, a deterministic training loop and an
evaluation/report harness.
"""

__version__ = "0.1.0"

from .attention import AttentionConfig
from .classifier import LossWeights
from .data import DatasetManifest, SyntheticClassSpec, generate_synthetic, load_manifest
from .errors import SarlabError
from .model import ModelConfig, build_model, forward_model
from .pyramid import PyramidConfig
from .tensor import GradTape, Tensor
from .trainer import Checkpoint, TrainConfig, fit, load_checkpoint, save_checkpoint

__all__ = [
    "__version__",
    "AttentionConfig",
    "Checkpoint",
    "DatasetManifest",
    "GradTape",
    "LossWeights",
    "ModelConfig",
    "PyramidConfig",
    "SarlabError",
    "SyntheticClassSpec",
    "Tensor",
    "TrainConfig",
    "build_model",
    "fit",
    "forward_model",
    "generate_synthetic",
    "load_checkpoint",
    "load_manifest",
    "save_checkpoint",
]

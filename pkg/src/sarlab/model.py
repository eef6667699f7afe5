"""Model assembly: extractor plus classifier under one parameter set."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import classifier as awc
from .attention import AttentionConfig
from .errors import ContractError
from .pyramid import PyramidConfig, PyramidFeatures, build_extractor, forward_extractor
from .tensor import Tensor

__all__ = ["ModelConfig", "ModelParams", "build_model", "forward_model"]

_PARAM_STREAM = 0x7A11


@dataclass(frozen=True)
class ModelConfig:
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    num_classes: int = 3
    weight_mode: str = "learned"  # or "uniform"
    concat_final: bool = True

    def __post_init__(self):
        if self.weight_mode not in ("learned", "uniform"):
            raise ContractError(f"unknown weight mode {self.weight_mode!r}")
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")


@dataclass
class ModelParams:
    """Named learnable tensors plus batch-norm running buffers."""

    config: ModelConfig
    tensors: dict[str, Tensor]
    buffers: dict[str, np.ndarray]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def astype(self, dtype) -> "ModelParams":
        tensors = {k: Tensor(v.data.astype(dtype), requires_grad=True)
                   for k, v in self.tensors.items()}
        buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return ModelParams(self.config, tensors, buffers)


def build_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Deterministically initialise all parameters from ``seed``."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        (int(seed), _PARAM_STREAM))))
    params, buffers = build_extractor(cfg.pyramid, rng, dtype=dtype)
    cparams, cbuffers = awc.build_classifier(
        cfg.pyramid.adjusted_channels, cfg.pyramid.final_dim, cfg.num_classes,
        cfg.concat_final, rng, dtype=dtype)
    params.update(cparams)
    buffers.update(cbuffers)
    return ModelParams(cfg, params, buffers)


def forward_model(model: ModelParams, images: Tensor, training: bool,
                  update_running: bool | None = None
                  ) -> tuple[PyramidFeatures, Tensor, Tensor, Tensor]:
    """Full forward pass; returns (pyramid, probabilities, logits, weights)."""
    pyr = forward_extractor(model.tensors, model.buffers, model.config.pyramid,
                            images, training, update_running)
    probs, logits, weights = awc.classify(
        model.tensors, model.buffers, pyr, model.config.weight_mode,
        model.config.concat_final, training, update_running)
    return pyr, probs, logits, weights

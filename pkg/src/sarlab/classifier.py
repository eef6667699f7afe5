"""Adaptive-weighted classifier.

Each pyramid scale is pooled to a vector, scored by its own small
FC + batch-norm predictor, and the three scores are softmax-normalised into
per-sample scale weights. The weighted scale maps are pooled again,
concatenated with the deep feature and classified by a single affine head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .functional import batch_norm, global_avg_pool, linear, softmax
from .pyramid import PyramidFeatures
from .tensor import Tensor, as_tensor, clamp_min, concat

__all__ = [
    "LossWeights",
    "build_classifier",
    "scale_vectors",
    "predict_weights",
    "apply_weights",
    "fuse_and_classify",
    "recognition_loss",
    "total_loss",
    "one_hot",
]

PROB_FLOOR = 1e-12
NUM_SCALES = 3


@dataclass(frozen=True)
class LossWeights:
    """Coefficients blending the attention and recognition losses."""

    lambda1: float = 0.5
    lambda2: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractError("loss weights must be >= 0")
        if self.lambda1 == 0 and self.lambda2 == 0:
            raise ContractError("loss weights must not both be zero")


def build_classifier(adjusted_channels: int, final_dim: int, num_classes: int,
                     concat_final: bool, rng: np.random.Generator,
                     dtype=np.float64) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
    """Initialise the weight predictors and the classification head."""
    if num_classes < 2:
        raise ContractError("need at least two classes")
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    c = adjusted_channels
    for k in range(1, NUM_SCALES + 1):
        w = (rng.standard_normal((c, 1)) * np.sqrt(2.0 / c)).astype(dtype)
        params[f"wp{k}.fc.w"] = Tensor(w, requires_grad=True)
        params[f"wp{k}.fc.b"] = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
        params[f"wp{k}.bn.gamma"] = Tensor(np.ones(1, dtype=dtype), requires_grad=True)
        params[f"wp{k}.bn.beta"] = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
        buffers[f"wp{k}.bn.running_mean"] = np.zeros(1, dtype=dtype)
        buffers[f"wp{k}.bn.running_var"] = np.ones(1, dtype=dtype)

    in_dim = NUM_SCALES * c + (final_dim if concat_final else 0)
    hw = (rng.standard_normal((in_dim, num_classes)) * np.sqrt(2.0 / in_dim))
    params["head.w"] = Tensor(hw.astype(dtype), requires_grad=True)
    params["head.b"] = Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True)
    return params, buffers


def scale_vectors(pyr: PyramidFeatures) -> list[Tensor]:
    """Spatial global average pool of each scale map."""
    return [global_avg_pool(s) for s in pyr.scales]


def predict_weights(fvs: list[Tensor], params: dict[str, Tensor],
                    buffers: dict[str, np.ndarray], training: bool,
                    update_running: bool | None = None) -> Tensor:
    """Per-sample softmax weights over the scales, [N, 3].

    Each scale's pooled vector is scored by its own FC + batch-norm
    predictor; the three scalar scores are softmax-normalised per sample.
    """
    if len(fvs) != NUM_SCALES:
        raise ShapeError(f"expected {NUM_SCALES} scale vectors")
    scores = []
    for k, fv in enumerate(fvs, start=1):
        z = linear(fv, params[f"wp{k}.fc.w"], params[f"wp{k}.fc.b"])
        z = batch_norm(z, params[f"wp{k}.bn.gamma"], params[f"wp{k}.bn.beta"],
                       buffers[f"wp{k}.bn.running_mean"],
                       buffers[f"wp{k}.bn.running_var"],
                       training=training, update_running=update_running)
        scores.append(z)
    return softmax(concat(scores, axis=1))


def uniform_weights(n: int, dtype=np.float64) -> Tensor:
    return as_tensor(np.full((n, NUM_SCALES), 1.0 / NUM_SCALES, dtype=dtype))


def apply_weights(pyr: PyramidFeatures, weights: Tensor) -> PyramidFeatures:
    """Scale map k of sample n by weights[n, k]; the deep feature is untouched."""
    n = pyr.final.shape[0]
    if weights.shape != (n, NUM_SCALES):
        raise ShapeError(f"weights must be [N, {NUM_SCALES}]")
    weighted = []
    for k, s in enumerate(pyr.scales):
        wk = weights[:, k:k + 1].reshape(n, 1, 1, 1)
        weighted.append(s * wk)
    return PyramidFeatures(scales=weighted, final=pyr.final)


def fuse_and_classify(weighted: PyramidFeatures, params: dict[str, Tensor],
                      concat_final: bool) -> tuple[Tensor, Tensor]:
    """Pool, concatenate and classify; returns (probabilities, logits)."""
    parts = [global_avg_pool(s) for s in weighted.scales]
    if concat_final:
        parts.append(weighted.final)
    fused = concat(parts, axis=1)
    logits = linear(fused, params["head.w"], params["head.b"])
    return softmax(logits), logits


def classify(params: dict[str, Tensor], buffers: dict[str, np.ndarray],
             pyr: PyramidFeatures, weight_mode: str, concat_final: bool,
             training: bool, update_running: bool | None = None
             ) -> tuple[Tensor, Tensor, Tensor]:
    """Full classifier pass; returns (probabilities, logits, scale weights)."""
    if weight_mode == "uniform":
        weights = uniform_weights(pyr.final.shape[0], dtype=pyr.final.dtype)
    elif weight_mode == "learned":
        weights = predict_weights(scale_vectors(pyr), params, buffers,
                                  training, update_running)
    else:
        raise ContractError(f"unknown weight mode {weight_mode!r}")
    probs, logits = fuse_and_classify(apply_weights(pyr, weights), params,
                                      concat_final)
    return probs, logits, weights


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ContractError("label outside the class set")
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def recognition_loss(probs: Tensor, onehot: np.ndarray) -> Tensor:
    """Cross entropy of the true class, averaged over the batch.

    Probabilities are clamped at 1e-12 before the log.
    """
    onehot = np.asarray(onehot)
    if onehot.shape != probs.shape:
        raise ContractError("one-hot labels must match the prediction shape")
    if not (np.isin(onehot, (0.0, 1.0)).all()
            and (onehot.sum(axis=1) == 1.0).all()):
        raise ContractError("labels must be exactly one-hot")
    logp = clamp_min(probs, PROB_FLOOR).log()
    per_sample = -((logp * onehot.astype(probs.dtype)).sum(axis=1))
    return per_sample.mean()


def total_loss(l_att: Tensor, l_recg: Tensor, lw: LossWeights) -> Tensor:
    """Weighted sum lambda1 * attention + lambda2 * recognition."""
    return l_att * lw.lambda1 + l_recg * lw.lambda2

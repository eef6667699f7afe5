"""In-network feature pyramid over residual downsampling stages.

A 3x3 stem convolution feeds three residual stages. Each stage halves the
spatial extent with its first stride-2 convolution and carries a 1x1
projection shortcut, so a 64x64 chip yields 32x32, 16x16 and 8x8 maps.
Per stage, a lightweight 1x1 convolution adjusts the channel count to a
common width before the maps leave the extractor; the deep feature is the
global average pool of the last stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .functional import batch_norm, conv2d, global_avg_pool, relu
from .tensor import Tensor

__all__ = ["PyramidConfig", "PyramidFeatures", "build_extractor", "forward_extractor"]


@dataclass(frozen=True)
class PyramidConfig:
    """Shape of the extractor: input chip size, stage widths, adjusted width."""

    input_size: int = 64
    stage_channels: tuple[int, int, int] = (16, 32, 64)
    adjusted_channels: int = 16

    def __post_init__(self):
        if len(self.stage_channels) != 3:
            raise ShapeError("the pyramid is fixed at three scales")
        if any(c < 1 for c in self.stage_channels):
            raise ShapeError("stage channel counts must be positive")
        if self.adjusted_channels < 1:
            raise ShapeError("adjusted_channels must be >= 1")
        if self.input_size < 8 or self.input_size % 8 != 0:
            raise ShapeError("input_size must be a positive multiple of 8")

    @property
    def num_scales(self) -> int:
        return len(self.stage_channels)

    @property
    def final_dim(self) -> int:
        return self.stage_channels[-1]

    def scale_sizes(self) -> tuple[int, int, int]:
        s = self.input_size
        return (s // 2, s // 4, s // 8)


@dataclass
class PyramidFeatures:
    """Per-scale adjusted maps plus the deep feature for one batch."""

    scales: list[Tensor]
    final: Tensor

    def validate(self) -> None:
        n = self.final.shape[0]
        c = self.scales[0].shape[1]
        prev = None
        for s in self.scales:
            if s.shape[0] != n or s.shape[1] != c:
                raise ShapeError("pyramid scales disagree on batch or channels")
            if prev is not None and not (s.shape[2] < prev[2] and s.shape[3] < prev[3]):
                raise ShapeError("pyramid scales must strictly shrink")
            prev = s.shape


_STEM_CHANNELS = 16


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
             dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _add_bn(params: dict, buffers: dict, name: str, c: int, dtype) -> None:
    params[f"{name}.gamma"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
    params[f"{name}.beta"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
    buffers[f"{name}.running_mean"] = np.zeros(c, dtype=dtype)
    buffers[f"{name}.running_var"] = np.ones(c, dtype=dtype)


def build_extractor(cfg: PyramidConfig, rng: np.random.Generator,
                    dtype=np.float64) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
    """Initialise extractor parameters, deterministically from ``rng``.

    Conv weights use fan-in scaled normal draws; batch-norm layers start at
    gamma=1, beta=0 with zero/one running statistics.
    """
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}

    params["stem.w"] = Tensor(
        _kaiming(rng, (_STEM_CHANNELS, 1, 3, 3), 9, dtype), requires_grad=True)

    in_ch = _STEM_CHANNELS
    for k, out_ch in enumerate(cfg.stage_channels, start=1):
        params[f"stage{k}.conv1.w"] = Tensor(
            _kaiming(rng, (out_ch, in_ch, 3, 3), in_ch * 9, dtype), requires_grad=True)
        _add_bn(params, buffers, f"stage{k}.bn1", out_ch, dtype)
        params[f"stage{k}.conv2.w"] = Tensor(
            _kaiming(rng, (out_ch, out_ch, 3, 3), out_ch * 9, dtype), requires_grad=True)
        _add_bn(params, buffers, f"stage{k}.bn2", out_ch, dtype)
        params[f"stage{k}.proj.w"] = Tensor(
            _kaiming(rng, (out_ch, in_ch, 1, 1), in_ch, dtype), requires_grad=True)
        _add_bn(params, buffers, f"stage{k}.projbn", out_ch, dtype)
        in_ch = out_ch

    for k, out_ch in enumerate(cfg.stage_channels, start=1):
        params[f"adjust{k}.w"] = Tensor(
            _kaiming(rng, (cfg.adjusted_channels, out_ch, 1, 1), out_ch, dtype),
            requires_grad=True)
    return params, buffers


def _bn(params, buffers, name, x, training, update_running):
    return batch_norm(
        x, params[f"{name}.gamma"], params[f"{name}.beta"],
        buffers[f"{name}.running_mean"], buffers[f"{name}.running_var"],
        training=training, update_running=update_running)


def _stage(params, buffers, k: int, x: Tensor, training: bool,
           update_running: bool) -> Tensor:
    y = conv2d(x, params[f"stage{k}.conv1.w"], stride=2, pad=1)
    y = relu(_bn(params, buffers, f"stage{k}.bn1", y, training, update_running))
    y = conv2d(y, params[f"stage{k}.conv2.w"], stride=1, pad=1)
    y = _bn(params, buffers, f"stage{k}.bn2", y, training, update_running)
    sc = conv2d(x, params[f"stage{k}.proj.w"], stride=2, pad=0)
    sc = _bn(params, buffers, f"stage{k}.projbn", sc, training, update_running)
    return relu(y + sc)


def forward_extractor(params: dict[str, Tensor], buffers: dict[str, np.ndarray],
                      cfg: PyramidConfig, images: Tensor, training: bool,
                      update_running: bool | None = None) -> PyramidFeatures:
    """Run a batch of [N, 1, S, S] chips through the pyramid."""
    if update_running is None:
        update_running = training
    s = cfg.input_size
    if images.ndim != 4 or images.shape[1] != 1 or images.shape[2:] != (s, s):
        raise ShapeError(
            f"expected images of shape [N, 1, {s}, {s}], got {images.shape}")
    x = conv2d(images, params["stem.w"], stride=1, pad=1)
    scales = []
    for k in range(1, 4):
        x = _stage(params, buffers, k, x, training, update_running)
        scales.append(relu(conv2d(x, params[f"adjust{k}.w"], stride=1, pad=0)))
    return PyramidFeatures(scales=scales, final=global_avg_pool(x))

"""Finite-difference verification of analytic gradients.

Three suites: elementary operations checked coordinate by coordinate in
double precision, the attention loss through its unrolled power iteration,
and the full model pipeline on one triplet with sampled coordinates.
Relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-5);
the guard keeps finite-difference noise on true-zero gradients from
registering as error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionConfig, attention_loss
from .classifier import LossWeights, one_hot, recognition_loss, total_loss
from .functional import batch_norm, conv2d, global_avg_pool, linear, relu, softmax
from .model import ModelConfig, build_model, forward_model
from .pyramid import PyramidConfig
from .tensor import GradTape, Tensor

__all__ = ["GradCheckReport", "check_elementary", "check_attention",
           "check_pipeline", "run_all"]

ELEMENTARY_TOL = 1e-4
PIPELINE_TOL = 1e-3

_REL_FLOOR = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), _REL_FLOOR)
    return float((np.abs(a - n) / denom).max())


def _fd_full(f, arr: np.ndarray, h: float) -> np.ndarray:
    """Central differences of scalar f() over every coordinate of arr."""
    out = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        out[idx] = (fp - fm) / (2.0 * h)
    return out


def _fd_coords(f, arr: np.ndarray, coords, h: float) -> np.ndarray:
    vals = np.zeros(len(coords))
    flat = arr.reshape(-1)
    for i, c in enumerate(coords):
        old = flat[c]
        flat[c] = old + h
        fp = f()
        flat[c] = old - h
        fm = f()
        flat[c] = old
        vals[i] = (fp - fm) / (2.0 * h)
    return vals


def _check(build_loss, leaves: dict[str, np.ndarray], h: float) -> float:
    """Max relative error over all coordinates of all leaves."""
    tensors = {k: Tensor(v, requires_grad=True) for k, v in leaves.items()}
    with GradTape() as tape:
        loss = build_loss(tensors)
        tape.backward(loss)
    detached = {n: Tensor._wrap(v.data, False) for n, v in tensors.items()}

    def f():
        return build_loss(detached).item()

    worst = 0.0
    for t in tensors.values():
        numeric = _fd_full(f, t.data, h)
        worst = max(worst, relative_error(t.grad, numeric))
    return worst


def check_elementary(seed: int, h: float = 1e-4) -> float:
    """FD check of each elementary op plus a small composed net."""
    rng = np.random.default_rng(seed)
    worst = 0.0

    def rand(*shape):
        return rng.standard_normal(shape)

    r_conv = rand(2, 3, 3, 3)
    worst = max(worst, _check(
        lambda t: (conv2d(t["x"], t["k"], stride=2, pad=1) * r_conv).sum(),
        {"x": rand(2, 2, 6, 6), "k": rand(3, 2, 3, 3)}, h))

    r_conv2 = rand(1, 2, 3, 3)
    worst = max(worst, _check(
        lambda t: (conv2d(t["x"], t["k"], stride=1, pad=0) * r_conv2).sum(),
        {"x": rand(1, 1, 5, 5), "k": rand(2, 1, 3, 3)}, h))

    r_lin = rand(3, 5)
    worst = max(worst, _check(
        lambda t: (linear(t["x"], t["w"], t["b"]) * r_lin).sum(),
        {"x": rand(3, 4), "w": rand(4, 5), "b": rand(5)}, h))

    rm, rv = np.zeros(3), np.ones(3)
    r_bn = rand(5, 3)
    worst = max(worst, _check(
        lambda t: (batch_norm(t["x"], t["g"], t["b"], rm.copy(), rv.copy(),
                              training=True, update_running=False) * r_bn).sum(),
        {"x": rand(5, 3), "g": 1.0 + 0.2 * rand(3), "b": 0.2 * rand(3)}, h))

    r_bn4 = rand(3, 2, 4, 4)
    worst = max(worst, _check(
        lambda t: (batch_norm(t["x"], t["g"], t["b"], np.zeros(2), np.ones(2),
                              training=True, update_running=False) * r_bn4).sum(),
        {"x": rand(3, 2, 4, 4), "g": 1.0 + 0.2 * rand(2), "b": 0.2 * rand(2)}, h))

    r_sm = rand(3, 5)
    worst = max(worst, _check(
        lambda t: (softmax(t["x"]) * r_sm).sum(),
        {"x": rand(3, 5)}, h))

    r_gap = rand(2, 3)
    worst = max(worst, _check(
        lambda t: (global_avg_pool(t["x"]) * r_gap).sum(),
        {"x": rand(2, 3, 4, 5)}, h))

    # keep relu inputs away from the kink
    x_relu = rng.uniform(0.2, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    r_relu = rand(3, 4)
    worst = max(worst, _check(
        lambda t: (relu(t["x"]) * r_relu).sum(), {"x": x_relu}, h))

    worst = max(worst, _check(
        lambda t: (t["x"] / t["y"]).sum() + (t["x"] * t["x"]).mean()
                  + t["y"].exp().sum() * 0.1,
        {"x": rand(3, 3), "y": 2.0 + rng.uniform(0.5, 1.0, (3, 3))}, h))

    worst = max(worst, _check(
        lambda t: ((t["x"] * t["x"]) + 0.5).sqrt().sum()
                  + ((t["x"] * t["x"]) + 0.3).log().mean(),
        {"x": rand(4, 3)}, h))
    return worst


def check_attention(seed: int, h: float = 1e-5, iters: int = 15) -> float:
    """FD check through the attention loss and its unrolled PCA."""
    rng = np.random.default_rng(seed)
    maps = rng.standard_normal((3, 2, 5, 4))
    cfg = AttentionConfig(margin=0.9, power_iterations=iters)
    labels = np.array([0, 0, 1])

    x = Tensor(maps, requires_grad=True)
    with GradTape() as tape:
        loss = attention_loss([x], labels, cfg)
        tape.backward(loss)

    xd = Tensor._wrap(x.data, False)

    def f():
        return attention_loss([xd], labels, cfg).item()

    numeric = _fd_full(f, x.data, h)
    return relative_error(x.grad, numeric)


_TINY = ModelConfig(
    pyramid=PyramidConfig(input_size=16, stage_channels=(6, 8, 10),
                          adjusted_channels=4),
    num_classes=3)


def check_pipeline(seed: int, h: float = 1e-5, coords_per_tensor: int = 3,
                   image_coords: int = 8) -> float:
    """FD check of the total loss through a tiny full model on one triplet."""
    rng = np.random.default_rng(seed)
    model = build_model(_TINY, seed, dtype=np.float64)
    images = rng.uniform(0.0, 1.0, (3, 1, 16, 16))
    labels = np.array([0, 0, 1])
    lw = LossWeights(lambda1=0.5, lambda2=1.0)
    att_cfg = AttentionConfig(margin=0.6, power_iterations=10)
    onehot = one_hot(labels, 3)

    img_t = Tensor(images, requires_grad=True)

    def run(x: Tensor) -> Tensor:
        pyr, probs, _, _ = forward_model(model, x, training=True,
                                         update_running=False)
        l_att = attention_loss(pyr.scales, labels, att_cfg)
        l_recg = recognition_loss(probs, onehot)
        return total_loss(l_att, l_recg, lw)

    with GradTape() as tape:
        loss = run(img_t)
        tape.backward(loss)
    grads = {k: t.grad.copy() for k, t in model.tensors.items()}
    img_grad = img_t.grad.copy()
    model.zero_grads()

    img_detached = Tensor._wrap(images, False)

    def f():
        return run(img_detached).item()

    worst = 0.0
    for name in model.names():
        arr = model.tensors[name].data
        k = min(coords_per_tensor, arr.size)
        coords = rng.choice(arr.size, size=k, replace=False)
        numeric = _fd_coords(f, arr, coords, h)
        analytic = grads[name].reshape(-1)[coords]
        worst = max(worst, relative_error(analytic, numeric))

    coords = rng.choice(images.size, size=image_coords, replace=False)
    numeric = _fd_coords(f, images, coords, h)
    worst = max(worst, relative_error(img_grad.reshape(-1)[coords], numeric))
    return worst


@dataclass
class GradCheckReport:
    elementary_max: float
    attention_max: float
    pipeline_max: float

    @property
    def passed(self) -> bool:
        return (self.elementary_max < ELEMENTARY_TOL
                and self.attention_max < PIPELINE_TOL
                and self.pipeline_max < PIPELINE_TOL)

    def lines(self) -> list[str]:
        def verdict(v, tol):
            return f"{v:.3e} (tol {tol:.0e}) {'PASS' if v < tol else 'FAIL'}"

        return [
            f"elementary ops  max rel err {verdict(self.elementary_max, ELEMENTARY_TOL)}",
            f"attention loss  max rel err {verdict(self.attention_max, PIPELINE_TOL)}",
            f"full pipeline   max rel err {verdict(self.pipeline_max, PIPELINE_TOL)}",
        ]


def run_all(seeds: list[int]) -> GradCheckReport:
    return GradCheckReport(
        elementary_max=max(check_elementary(s) for s in seeds),
        attention_max=max(check_attention(s) for s in seeds),
        pipeline_max=max(check_pipeline(s) for s in seeds),
    )

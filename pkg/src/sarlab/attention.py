"""Multi-scale feature attention.

For every image and channel of a pyramid scale the dominant direction of the
map's column profiles is extracted with unrolled power iteration on the
centred Gram matrix, so the result stays differentiable end to end. Triplets
of such principal vectors feed a cosine-similarity hinge: two same-class
vectors should be more alike than either is to a third-class vector, by a
configurable margin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError, ZeroVectorError
from .tensor import Tensor, _apply, as_tensor, clamp_min, matmul

__all__ = [
    "AttentionConfig",
    "group_by_channel",
    "principal_vector",
    "principal_vectors",
    "cosine_sim",
    "hinge_attention",
    "attention_loss",
    "similarity_matrix",
    "principal_gap",
]

# Rows whose first Gram-vector product falls below this norm carry no
# directional signal and are flagged degenerate.
DEGENERATE_NORM = 1e-9

_NORM_FLOOR = 1e-40


@dataclass(frozen=True)
class AttentionConfig:
    margin: float = 0.5
    power_iterations: int = 20

    def __post_init__(self):
        if not np.isfinite(self.margin) or self.margin < 0:
            raise ContractError("margin must be finite and >= 0")
        if self.power_iterations < 1:
            raise ContractError("power_iterations must be >= 1")


def _batched_matvec(a: Tensor, b: Tensor) -> Tensor:
    """out[m, i] = sum_j a[m, i, j] * b[m, j], as one tape record."""
    out = np.einsum("mij,mj->mi", a.data, b.data)

    def backward(g):
        da = g[:, :, None] * b.data[:, None, :] if a.requires_grad else None
        db = np.einsum("mij,mi->mj", a.data, g) if b.requires_grad else None
        return da, db

    return _apply("batched_matvec", out, (a, b), backward)


def _normalize_rows(gv: Tensor, floor: float) -> Tensor:
    """Rows scaled to unit norm, with a tiny floor keeping zero rows at zero."""
    r = np.sqrt((gv.data * gv.data).sum(axis=1, keepdims=True) + floor)
    out = gv.data / r

    def backward(g):
        dot = (gv.data * g).sum(axis=1, keepdims=True)
        return ((g - gv.data * (dot / (r * r))) / r,)

    return _apply("normalize_rows", out, (gv,), backward)


def group_by_channel(scale_feats: Tensor) -> list[Tensor]:
    """Split [N, c, h, w] into c groups, each holding every image's map."""
    if scale_feats.ndim != 4:
        raise ShapeError("group_by_channel expects [N, c, h, w]")
    c = scale_feats.shape[1]
    return [scale_feats[:, ch] for ch in range(c)]


def principal_vectors(maps: Tensor, iters: int) -> tuple[Tensor, np.ndarray]:
    """Dominant right-singular directions of a batch of centred maps.

    ``maps`` is [M, h, w]; returns a unit [M, w] tensor plus a boolean mask
    of the rows that were degenerate (constant maps). Degenerate rows are
    replaced by the deterministic start vector and excluded from gradients.
    The largest-magnitude entry of each vector is made non-negative.
    """
    if maps.ndim != 3:
        raise ShapeError("principal_vectors expects [M, h, w]")
    m, h, w = maps.shape
    if h < 2:
        raise ShapeError("principal_vectors needs h >= 2 rows")
    if iters < 1:
        raise ContractError("power iteration needs iters >= 1")

    mu = maps.mean(axis=1, keepdims=True)
    xc = maps - mu
    gram = matmul(xc.transpose(0, 2, 1), xc)

    start = np.full((m, w), 1.0 / np.sqrt(w), dtype=maps.dtype)
    v = as_tensor(start)
    degenerate = None
    for it in range(iters):
        gv = _batched_matvec(gram, v)
        if it == 0:
            degenerate = np.linalg.norm(gv.data, axis=1) < DEGENERATE_NORM
        v = _normalize_rows(gv, _NORM_FLOOR)

    vd = v.data
    idx = np.abs(vd).argmax(axis=1)
    signs = np.sign(vd[np.arange(m), idx])
    signs[signs == 0] = 1.0
    v = v * signs[:, None].astype(maps.dtype)

    keep = (~degenerate)[:, None].astype(maps.dtype)
    v = v * keep + as_tensor(start * (1.0 - keep))
    return v, degenerate


def principal_vector(map2d: Tensor, iters: int = 20) -> tuple[Tensor, bool]:
    """Single-map convenience wrapper around :func:`principal_vectors`."""
    if map2d.ndim != 2:
        raise ShapeError("principal_vector expects a 2-D map")
    h, w = map2d.shape
    vs, degen = principal_vectors(map2d.reshape(1, h, w), iters)
    return vs.reshape(w), bool(degen[0])


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two nonzero vectors."""
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError("cosine_sim expects two vectors of equal length")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine similarity of a zero vector is undefined")
    an = a / (a * a).sum().sqrt()
    bn = b / (b * b).sum().sqrt()
    return (an * bn).sum()


def hinge_attention(pos: Tensor, neg1: Tensor, neg2: Tensor, margin: float) -> Tensor:
    """Elementwise hinge: max(neg1 + neg2 + margin - pos, 0)."""
    return clamp_min((neg1 + neg2) + (margin - pos), 0.0)


def _triplet_views(fps: Tensor, t: int, c: int, w: int):
    fps = fps.reshape(3 * t, c, w)
    return fps[0::3], fps[1::3], fps[2::3]


def attention_loss(scales: list[Tensor], labels: np.ndarray,
                   cfg: AttentionConfig) -> Tensor:
    """Triplet hinge over principal vectors, averaged over channels, scales
    and triplets.

    The batch must be laid out as consecutive triplets (anchor, same-class
    partner, other-class sample). Channels whose map is degenerate for any
    triplet member contribute zero. Returns a scalar tensor.
    """
    n = scales[0].shape[0]
    if n % 3 != 0 or n == 0:
        raise ContractError("attention loss expects a batch of whole triplets")
    t = n // 3
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ContractError("labels must align with the batch")
    a, b, other = labels[0::3], labels[1::3], labels[2::3]
    if not (a == b).all() or (a == other).any():
        raise ContractError(
            "each triplet needs two same-class samples and one other-class sample")

    total = None
    for feats in scales:
        _, c, h, w = feats.shape
        fps, degen = principal_vectors(feats.reshape(n * c, h, w),
                                       cfg.power_iterations)
        f1, f2, f3 = _triplet_views(fps, t, c, w)
        pos = (f1 * f2).sum(axis=2)
        neg1 = (f1 * f3).sum(axis=2)
        neg2 = (f2 * f3).sum(axis=2)
        hinge = hinge_attention(pos, neg1, neg2, cfg.margin)

        dmask = degen.reshape(3 * t, c)
        keep = ~(dmask[0::3] | dmask[1::3] | dmask[2::3])
        hinge = hinge * keep.astype(feats.dtype)
        per_scale = hinge.sum() / float(t * c)
        total = per_scale if total is None else total + per_scale
    return total / float(len(scales))


def similarity_matrix(fps: np.ndarray) -> np.ndarray:
    """Pairwise cosine matrix of row vectors; used for diagnostics."""
    norms = np.linalg.norm(fps, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    unit = fps / norms
    return unit @ unit.T


def principal_gap(scale_maps: list[np.ndarray], labels: np.ndarray,
                  iters: int = 20) -> float:
    """Mean intra-class minus inter-class cosine of principal vectors.

    ``scale_maps`` holds one [N, c, h, w] array per scale. Degenerate
    vectors are excluded from both pair pools. Larger is better separated.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(n, dtype=bool)
    gaps = []
    for arr in scale_maps:
        _, c, h, w = arr.shape
        fps, degen = principal_vectors(as_tensor(arr.reshape(n * c, h, w)), iters)
        fp = fps.data.reshape(n, c, w)
        dg = degen.reshape(n, c)
        for ch in range(c):
            good = ~dg[:, ch]
            if good.sum() < 3:
                continue
            sims = similarity_matrix(fp[good, ch])
            gmask = off_diag[np.ix_(good, good)]
            smask = same[np.ix_(good, good)]
            intra = sims[smask & gmask]
            inter = sims[~smask & gmask]
            if intra.size and inter.size:
                gaps.append(float(intra.mean() - inter.mean()))
    return float(np.mean(gaps)) if gaps else 0.0

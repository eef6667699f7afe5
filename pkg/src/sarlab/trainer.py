"""Triplet-aware training loop, SGD with momentum, and checkpoint I/O.

A batch is T triplets (anchor, same-class partner, other-class sample) laid
out consecutively, so the recognition loss sees all 3T images while the
attention loss sees the T triplets. The checkpoint format is a little-endian
binary: magic ``MSAW01``, a JSON config block, a tensor directory of
(name, rank, extents, offset) records, then a payload of 32-bit floats.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import classifier as awc
from .attention import AttentionConfig, attention_loss
from .classifier import LossWeights, one_hot, recognition_loss, total_loss
from .data import CHIP_SIZE, DatasetManifest, EpochEntry, balance_resample, materialize
from .errors import CheckpointError, ContractError, DataError, NumericError
from .model import ModelConfig, ModelParams, build_model, forward_model
from .pyramid import PyramidConfig
from .tensor import GradTape, Tensor

__all__ = [
    "TripletBatch",
    "TrainConfig",
    "Checkpoint",
    "sample_triplets",
    "train_step",
    "fit",
    "save_checkpoint",
    "load_checkpoint",
    "FitResult",
]

CHECKPOINT_MAGIC = b"MSAW01"

_TRIPLET_STREAM = 0x7319


@dataclass
class TripletBatch:
    """T consecutive (anchor, partner, other) triplets as one image tensor."""

    images: np.ndarray   # [3T, 1, S, S]
    labels: np.ndarray   # [3T] int
    triplets: np.ndarray  # [T, 3] positions into the flat batch

    def __post_init__(self):
        n = self.images.shape[0]
        if n % 3 != 0 or n == 0:
            raise ContractError("a triplet batch holds a multiple of 3 images")
        a, b, c = self.labels[0::3], self.labels[1::3], self.labels[2::3]
        if not (a == b).all():
            raise ContractError("triplet members 1 and 2 must share a class")
        if (a == c).any():
            raise ContractError("triplet member 3 must come from another class")

    @property
    def num_triplets(self) -> int:
        return self.images.shape[0] // 3


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    triplets_per_batch: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    loss_weights: LossWeights = field(default_factory=LossWeights)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    seed: int = 0
    resample_target: int = 200
    augment: bool = False
    # learning rate multiplies by lr_decay at 60% and 85% of the epochs
    lr_decay: float = 0.1

    def __post_init__(self):
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.triplets_per_batch < 1:
            raise ContractError("triplets_per_batch must be >= 1")
        if self.learning_rate <= 0 or self.momentum < 0:
            raise ContractError("rates must be positive")

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for frac in (0.6, 0.85):
            if self.epochs > 0 and epoch >= math.floor(frac * self.epochs):
                lr *= self.lr_decay
        return lr

    def to_json_dict(self) -> dict:
        d = asdict(self)
        return d

    @staticmethod
    def from_json_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss_weights" in d and isinstance(d["loss_weights"], dict):
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        if "attention" in d and isinstance(d["attention"], dict):
            d["attention"] = AttentionConfig(**d["attention"])
        return TrainConfig(**d)


def sample_triplets(manifest: DatasetManifest, epoch_list: list[EpochEntry],
                    t: int, seed: int, step: int,
                    dtype=np.float32) -> TripletBatch:
    """Draw T triplets deterministically from (seed, step).

    Anchor classes are drawn uniformly among classes with at least two
    entries; the other class uniformly among the rest; samples uniformly
    within class (the two anchors without replacement).
    """
    by_class: dict[int, list[EpochEntry]] = {}
    for e in epoch_list:
        by_class.setdefault(e.label, []).append(e)
    if len(by_class) < 2:
        raise DataError("attention loss requires >= 2 classes")
    anchor_classes = sorted(c for c, es in by_class.items() if len(es) >= 2)
    all_classes = sorted(by_class)
    if not anchor_classes:
        raise DataError("no class has >= 2 training samples")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        (int(seed), _TRIPLET_STREAM, int(step)))))
    images = np.empty((3 * t, 1, CHIP_SIZE, CHIP_SIZE), dtype=dtype)
    labels = np.empty(3 * t, dtype=np.int64)
    for k in range(t):
        ci = anchor_classes[int(rng.integers(len(anchor_classes)))]
        others = [c for c in all_classes if c != ci]
        cj = others[int(rng.integers(len(others)))]
        ia, ib = rng.choice(len(by_class[ci]), size=2, replace=False)
        ij = int(rng.integers(len(by_class[cj])))
        for slot, entry in enumerate((by_class[ci][int(ia)],
                                      by_class[ci][int(ib)],
                                      by_class[cj][ij])):
            images[3 * k + slot] = materialize(manifest, entry, dtype=dtype)
            labels[3 * k + slot] = entry.label
    triplets = np.arange(3 * t).reshape(t, 3)
    return TripletBatch(images=images, labels=labels, triplets=triplets)


@dataclass
class OptState:
    velocities: dict[str, np.ndarray]

    @staticmethod
    def for_model(model: ModelParams) -> "OptState":
        return OptState({k: np.zeros_like(v.data)
                         for k, v in model.tensors.items()})


@dataclass
class StepResult:
    total: float
    att: float
    recg: float
    correct: int
    count: int
    weights: np.ndarray


def train_step(model: ModelParams, batch: TripletBatch, cfg: TrainConfig,
               opt: OptState, lr: float | None = None,
               step: int = 0) -> StepResult:
    """One SGD-with-momentum update from the combined loss.

    The reported total is recomputed from the reported components, so the
    identity total == lambda1 * att + lambda2 * recg holds bit-exactly.
    """
    lw = cfg.loss_weights
    if lr is None:
        lr = cfg.learning_rate
    try:
        with GradTape() as tape:
            pyr, probs, _, weights = forward_model(
                model, Tensor(batch.images), training=True)
            l_att = attention_loss(pyr.scales, batch.labels, cfg.attention)
            l_recg = recognition_loss(
                probs, one_hot(batch.labels, model.config.num_classes,
                               dtype=probs.dtype))
            loss = total_loss(l_att, l_recg, lw)
            tape.backward(loss)
    except NumericError as e:
        raise NumericError(f"step {step}: {e}") from e

    for name in model.names():
        p = model.tensors[name]
        g = p.grad
        if g is None:
            continue
        v = opt.velocities[name]
        v *= cfg.momentum
        v += g
        p.data -= (lr * v).astype(p.data.dtype)
    model.zero_grads()

    att = float(l_att.data)
    recg = float(l_recg.data)
    pred = probs.data.argmax(axis=1)
    return StepResult(
        total=lw.lambda1 * att + lw.lambda2 * recg,
        att=att, recg=recg,
        correct=int((pred == batch.labels).sum()),
        count=int(batch.labels.shape[0]),
        weights=np.asarray(weights.data, dtype=np.float64),
    )


# -- checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    """Float32 snapshot of all tensors and buffers plus a config echo."""

    config: dict
    tensors: dict[str, np.ndarray]

    @staticmethod
    def from_model(model: ModelParams, epoch: int, classes: list[str],
                   train_config: TrainConfig | None = None) -> "Checkpoint":
        cfg = {
            "version": 1,
            "epoch": int(epoch),
            "classes": list(classes),
            "model": {
                "num_classes": model.config.num_classes,
                "weight_mode": model.config.weight_mode,
                "concat_final": model.config.concat_final,
                "pyramid": {
                    "input_size": model.config.pyramid.input_size,
                    "stage_channels": list(model.config.pyramid.stage_channels),
                    "adjusted_channels": model.config.pyramid.adjusted_channels,
                },
            },
        }
        if train_config is not None:
            cfg["train"] = train_config.to_json_dict()
        tensors = {}
        for name in sorted(model.tensors):
            tensors[name] = model.tensors[name].data.astype(np.float32)
        for name in sorted(model.buffers):
            tensors["buffer:" + name] = model.buffers[name].astype(np.float32)
        return Checkpoint(cfg, tensors)

    def model_config(self) -> ModelConfig:
        m = self.config["model"]
        return ModelConfig(
            pyramid=PyramidConfig(
                input_size=m["pyramid"]["input_size"],
                stage_channels=tuple(m["pyramid"]["stage_channels"]),
                adjusted_channels=m["pyramid"]["adjusted_channels"]),
            num_classes=m["num_classes"],
            weight_mode=m["weight_mode"],
            concat_final=m["concat_final"])

    def classes(self) -> list[str]:
        return list(self.config["classes"])

    def to_model(self, dtype=np.float32) -> ModelParams:
        """Build a model from the config echo and restore every tensor."""
        model = build_model(self.model_config(), seed=0, dtype=dtype)
        self.apply_to(model)
        return model

    def apply_to(self, model: ModelParams) -> None:
        for name, t in model.tensors.items():
            if name not in self.tensors:
                raise CheckpointError(f"checkpoint is missing tensor {name!r}")
            arr = self.tensors[name]
            if arr.shape != t.data.shape:
                raise CheckpointError(
                    f"shape mismatch for tensor {name!r}: checkpoint has "
                    f"{arr.shape}, model expects {t.data.shape}")
            t.data = arr.astype(t.data.dtype)
        for name, b in model.buffers.items():
            key = "buffer:" + name
            if key not in self.tensors:
                raise CheckpointError(f"checkpoint is missing buffer {name!r}")
            arr = self.tensors[key]
            if arr.shape != b.shape:
                raise CheckpointError(
                    f"shape mismatch for buffer {name!r}: checkpoint has "
                    f"{arr.shape}, model expects {b.shape}")
            b[...] = arr.astype(b.dtype)


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    """Serialise (little-endian): magic, config JSON, directory, payload."""
    config_bytes = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    names = sorted(ckpt.tensors)
    directory = bytearray()
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        directory += struct.pack("<H", len(nb)) + nb
        directory += struct.pack("<B", arr.ndim)
        directory += struct.pack(f"<{arr.ndim}I", *arr.shape)
        directory += struct.pack("<Q", offset)
        offset += arr.nbytes
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(config_bytes)))
        fh.write(config_bytes)
        fh.write(struct.pack("<I", len(names)))
        fh.write(bytes(directory))
        for name in names:
            fh.write(np.ascontiguousarray(ckpt.tensors[name], dtype="<f4").tobytes())


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    view = memoryview(raw)
    if raw[:6] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    pos = 6

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint ({what})")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    (config_len,) = struct.unpack("<I", take(4, "config length"))
    try:
        config = json.loads(bytes(take(config_len, "config")).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: malformed config block: {e}") from e
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    records = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        (offset,) = struct.unpack("<Q", take(8, "offset"))
        records.append((name, shape, offset))
    payload = view[pos:]
    tensors = {}
    for name, shape, offset in records:
        n = int(np.prod(shape)) if shape else 1
        end = offset + 4 * n
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(payload[offset:end], dtype="<f4").reshape(shape)
        tensors[name] = arr.copy()
    return Checkpoint(config, tensors)


# -- the fit loop ----------------------------------------------------------------

@dataclass
class FitResult:
    checkpoint: Checkpoint
    epoch_rows: list[dict]
    step_rows: list[dict]
    weight_rows: list[dict]


def fit(manifest: DatasetManifest, cfg: TrainConfig, out_dir: Path | None,
        model_cfg: ModelConfig | None = None,
        dtype=np.float32) -> FitResult:
    """Train for ``cfg.epochs`` epochs and write logs plus a checkpoint.

    Every epoch the train split is rebalanced to ``cfg.resample_target``
    samples per class; the step count per epoch covers that volume in
    batches of 3T images. Fully deterministic under a fixed seed.
    """
    if model_cfg is None:
        model_cfg = ModelConfig(num_classes=manifest.num_classes)
    if model_cfg.num_classes != manifest.num_classes:
        raise DataError(
            f"model expects {model_cfg.num_classes} classes but the manifest "
            f"has {manifest.num_classes}")
    model = build_model(model_cfg, cfg.seed, dtype=dtype)
    opt = OptState.for_model(model)

    epoch_rows: list[dict] = []
    step_rows: list[dict] = []
    weight_rows: list[dict] = []
    global_step = 0
    t = cfg.triplets_per_batch
    for epoch in range(cfg.epochs):
        epoch_list = balance_resample(manifest, cfg.resample_target,
                                      seed=(cfg.seed, epoch), aug=cfg.augment)
        steps = max(1, math.ceil(len(epoch_list) / (3 * t)))
        lr = cfg.lr_at(epoch)
        att_sum = 0.0
        recg_sum = 0.0
        correct = 0
        count = 0
        for _ in range(steps):
            batch = sample_triplets(manifest, epoch_list, t, cfg.seed,
                                    global_step, dtype=dtype)
            res = train_step(model, batch, cfg, opt, lr=lr, step=global_step)
            att_sum += res.att
            recg_sum += res.recg
            correct += res.correct
            count += res.count
            step_rows.append({"epoch": epoch, "step": global_step,
                              "total_loss": res.total, "att_loss": res.att,
                              "recg_loss": res.recg})
            for row in res.weights:
                weight_rows.append({"step": global_step,
                                    "w1": row[0], "w2": row[1], "w3": row[2]})
            global_step += 1
        att_mean = att_sum / steps
        recg_mean = recg_sum / steps
        epoch_rows.append({
            "epoch": epoch,
            "total_loss": cfg.loss_weights.lambda1 * att_mean
                          + cfg.loss_weights.lambda2 * recg_mean,
            "att_loss": att_mean,
            "recg_loss": recg_mean,
            "train_acc": correct / count if count else 0.0,
        })

    ckpt = Checkpoint.from_model(model, cfg.epochs, manifest.classes, cfg)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_csv(out_dir / "train_log.csv",
                   ["epoch", "total_loss", "att_loss", "recg_loss", "train_acc"],
                   epoch_rows)
        _write_csv(out_dir / "steps.csv",
                   ["epoch", "step", "total_loss", "att_loss", "recg_loss"],
                   step_rows)
        save_checkpoint(ckpt, out_dir / "checkpoint.ckpt")
    return FitResult(ckpt, epoch_rows, step_rows, weight_rows)


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _write_csv(path: Path, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[h]) for h in header) + "\n")

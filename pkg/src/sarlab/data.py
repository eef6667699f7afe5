"""Synthetic ship-chip generation, dataset loading and class balancing.

Chips are 64x64 single-channel intensity images at 10 m per pixel. A ship is
an oriented rectangle with a tapered bow, given a class-specific brightness
profile and texture, multiplied by single-look exponential speckle, with
low-level exponential background clutter added on top. Images are stored as
binary PGM (P5, maxval 255) next to a ``manifest.csv`` with header
``path,label,split``; a ``classes.json`` echoes the generating class specs
and a ``meta.csv`` records the sampled geometry per chip.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ContractError, DataError

__all__ = [
    "SyntheticClassSpec",
    "Sample",
    "DatasetManifest",
    "EpochEntry",
    "generate_synthetic",
    "load_manifest",
    "balance_resample",
    "materialize",
    "read_pgm",
    "write_pgm",
    "load_class_specs",
    "PRESET_OVERLAP3",
    "PRESET_SIX",
    "PRESET_EASY3",
]

CHIP_SIZE = 64
PIXEL_METERS = 10.0

_PROFILES = ("uniform", "bow-bright", "stern-bright")

_GEN_STREAM = 0xDA7A
_RESAMPLE_STREAM = 0xBA1A


@dataclass(frozen=True)
class SyntheticClassSpec:
    """Geometry and appearance ranges for one synthetic ship class."""

    name: str
    length_range: tuple[float, float]  # meters
    width_range: tuple[float, float]   # meters
    brightness_profile: str = "uniform"
    texture_scale: float = 0.3

    def __post_init__(self):
        for lo, hi in (self.length_range, self.width_range):
            if not (0 < lo < hi):
                raise ContractError(
                    f"class {self.name!r}: ranges must satisfy 0 < min < max")
        if self.brightness_profile not in _PROFILES:
            raise ContractError(
                f"class {self.name!r}: unknown profile "
                f"{self.brightness_profile!r}, expected one of {_PROFILES}")


PRESET_OVERLAP3 = (
    SyntheticClassSpec("Bulk Carrier", (150, 275), (23, 38), "uniform", 0.35),
    SyntheticClassSpec("Container Ship", (100, 300), (18, 40), "bow-bright", 0.55),
    SyntheticClassSpec("Tanker", (120, 250), (18, 32), "stern-bright", 0.25),
)

PRESET_SIX = PRESET_OVERLAP3 + (
    SyntheticClassSpec("Cargo", (80, 220), (14, 30), "uniform", 0.6),
    SyntheticClassSpec("Fishing", (20, 70), (12, 25), "uniform", 0.8),
    SyntheticClassSpec("General Cargo", (90, 200), (15, 33), "stern-bright", 0.45),
)

# Disjoint size ranges and distinct profiles: a sanity-ceiling configuration.
PRESET_EASY3 = (
    SyntheticClassSpec("Small", (60, 100), (12, 20), "uniform", 0.2),
    SyntheticClassSpec("Medium", (150, 200), (22, 30), "bow-bright", 0.2),
    SyntheticClassSpec("Large", (260, 350), (32, 40), "stern-bright", 0.2),
)

SHIP_AMPLITUDE = 0.5
CLUTTER_SCALE = 0.04
CENTER_JITTER = 3.0


# -- PGM ---------------------------------------------------------------------

def write_pgm(path: Path, img: np.ndarray) -> None:
    """Write a uint8 image as binary PGM (P5, maxval 255)."""
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ContractError("write_pgm expects a 2-D uint8 array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    """Read a binary PGM (P5) image as a uint8 array."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    if not raw.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM (P5) file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as e:
        raise DataError(f"{path}: malformed PGM header") from e
    if maxval != 255:
        raise DataError(f"{path}: expected maxval 255, got {maxval}")
    data = raw[pos:pos + w * h]
    if len(data) != w * h:
        raise DataError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


# -- rendering ---------------------------------------------------------------

def ship_mask(length_px: float, width_px: float, theta: float,
              center: tuple[float, float], size: int = CHIP_SIZE) -> np.ndarray:
    """Boolean mask of an oriented rectangle with a tapered bow.

    A pixel belongs to the ship when its center lies inside the hull. The
    bow (the +u end of the long axis) tapers linearly to half width over
    min(L/4, 2W); taper widths are kept above one pixel so axis-aligned
    hulls occupy every column they span.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, cy = center
    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    t = -dx * np.sin(theta) + dy * np.cos(theta)
    half_l = length_px / 2.0
    half_w = width_px / 2.0
    taper = min(length_px / 4.0, 2.0 * width_px)
    tip_half = max(0.5 * half_w, 0.55)
    u0 = half_l - taper
    frac = np.clip((u - u0) / max(taper, 1e-9), 0.0, 1.0)
    local_half = half_w + (tip_half - half_w) * frac
    return (np.abs(u) <= half_l) & (np.abs(t) <= local_half)


def _profile_map(u: np.ndarray, length_px: float, profile: str) -> np.ndarray:
    frac = np.clip((u + length_px / 2.0) / length_px, 0.0, 1.0)
    if profile == "bow-bright":
        return 0.7 + 0.6 * frac
    if profile == "stern-bright":
        return 1.3 - 0.6 * frac
    return np.ones_like(u)


def render_chip(spec: SyntheticClassSpec, rng: np.random.Generator
                ) -> tuple[np.ndarray, dict]:
    """Render one chip; returns (uint8 image, geometry record)."""
    length_m = rng.uniform(*spec.length_range)
    width_m = rng.uniform(*spec.width_range)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    cx = CHIP_SIZE / 2.0 + rng.uniform(-CENTER_JITTER, CENTER_JITTER)
    cy = CHIP_SIZE / 2.0 + rng.uniform(-CENTER_JITTER, CENTER_JITTER)
    lpx, wpx = length_m / PIXEL_METERS, width_m / PIXEL_METERS

    mask = ship_mask(lpx, wpx, theta, (cx, cy))
    yy, xx = np.mgrid[0:CHIP_SIZE, 0:CHIP_SIZE].astype(np.float64)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    amp = SHIP_AMPLITUDE * _profile_map(u, lpx, spec.brightness_profile)
    if spec.texture_scale > 0:
        g = uniform_filter(rng.standard_normal((CHIP_SIZE, CHIP_SIZE)), size=5)
        amp = amp * np.exp(spec.texture_scale * 3.0 * g)
    reflect = np.where(mask, amp, 0.0)

    speckle = rng.exponential(1.0, (CHIP_SIZE, CHIP_SIZE))
    clutter = rng.exponential(CLUTTER_SCALE, (CHIP_SIZE, CHIP_SIZE))
    img = np.clip(reflect * speckle + clutter, 0.0, 1.0)
    geom = {"length_m": length_m, "width_m": width_m, "theta": theta,
            "cx": cx, "cy": cy}
    return (np.round(img * 255.0)).astype(np.uint8), geom


def _slug(name: str) -> str:
    return name.lower().replace(" ", "_")


def generate_synthetic(specs: list[SyntheticClassSpec] | tuple,
                       n_per_class_train: int, n_per_class_test: int,
                       seed: int, out_dir: Path) -> "DatasetManifest":
    """Render a dataset to ``out_dir`` and return its loaded manifest.

    Every chip is fully determined by (seed, split, class index, sample
    index), so two runs with the same seed produce byte-identical trees.
    """
    specs = list(specs)
    if not specs:
        raise ContractError("generate_synthetic needs at least one class spec")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ContractError("class names must be unique")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {out_dir}: {e}") from e

    rows = []
    meta_rows = []
    for split_idx, (split, count) in enumerate(
            (("train", n_per_class_train), ("test", n_per_class_test))):
        for ci, spec in enumerate(specs):
            cls_dir = out_dir / "images" / split / _slug(spec.name)
            cls_dir.mkdir(parents=True, exist_ok=True)
            for i in range(count):
                rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
                    (int(seed), _GEN_STREAM, split_idx, ci, i))))
                img, geom = render_chip(spec, rng)
                rel = f"images/{split}/{_slug(spec.name)}/{i:04d}.pgm"
                try:
                    write_pgm(out_dir / rel, img)
                except OSError as e:
                    raise DataError(f"cannot write {out_dir / rel}: {e}") from e
                rows.append((rel, spec.name, split))
                meta_rows.append((rel, spec.name, split,
                                  f"{geom['length_m']!r}", f"{geom['width_m']!r}",
                                  f"{geom['theta']!r}", f"{geom['cx']!r}",
                                  f"{geom['cy']!r}"))

    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "split"])
        w.writerows(rows)
    with open(out_dir / "meta.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "split", "length_m", "width_m",
                    "theta", "cx", "cy"])
        w.writerows(meta_rows)
    save_class_specs(out_dir / "classes.json", specs, seed=seed,
                     n_train=n_per_class_train, n_test=n_per_class_test)
    return load_manifest(out_dir / "manifest.csv")


def save_class_specs(path: Path, specs: list[SyntheticClassSpec], **extra) -> None:
    doc = {"classes": [
        {"name": s.name, "length_range": list(s.length_range),
         "width_range": list(s.width_range),
         "brightness_profile": s.brightness_profile,
         "texture_scale": s.texture_scale}
        for s in specs]}
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_class_specs(path: Path) -> list[SyntheticClassSpec]:
    """Parse a class-spec JSON file (the schema written by generation)."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot parse class specs {path}: {e}") from e
    try:
        return [SyntheticClassSpec(
            name=c["name"],
            length_range=tuple(c["length_range"]),
            width_range=tuple(c["width_range"]),
            brightness_profile=c.get("brightness_profile", "uniform"),
            texture_scale=float(c.get("texture_scale", 0.3)),
        ) for c in doc["classes"]]
    except (KeyError, TypeError) as e:
        raise DataError(f"{path}: malformed class spec: {e}") from e


# -- manifests ---------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    """One labelled chip."""

    image: np.ndarray  # [1, 64, 64] float in [0, 1]
    label: int
    id: str


@dataclass
class ManifestEntry:
    path: str
    label: str
    split: str


class DatasetManifest:
    """Entries of (path, label, split) with lazy, cached image access."""

    def __init__(self, root: Path, entries: list[ManifestEntry],
                 classes: list[str]):
        self.root = Path(root)
        self.entries = entries
        self.classes = classes
        self.label_to_index = {name: i for i, name in enumerate(classes)}
        self._cache: dict[str, np.ndarray] = {}

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def split_entries(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def load_u8(self, entry: ManifestEntry) -> np.ndarray:
        img = self._cache.get(entry.path)
        if img is None:
            img = read_pgm(self.root / entry.path)
            if img.shape != (CHIP_SIZE, CHIP_SIZE):
                raise DataError(
                    f"{entry.path}: expected {CHIP_SIZE}x{CHIP_SIZE} chip, "
                    f"got {img.shape}")
            self._cache[entry.path] = img
        return img

    def load_sample(self, entry: ManifestEntry, dtype=np.float64) -> Sample:
        img = (self.load_u8(entry).astype(dtype) / 255.0)[None, :, :]
        return Sample(image=img, label=self.label_to_index[entry.label],
                      id=entry.path)


def load_manifest(path: Path, classes: list[str] | None = None) -> DatasetManifest:
    """Load and validate a ``path,label,split`` manifest CSV.

    When ``classes`` is omitted the class set is the sorted set of labels
    found in the file; otherwise every label must belong to the given set.
    Every referenced image file must exist.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    entries: list[ManifestEntry] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty manifest") from None
        if [h.strip() for h in header] != ["path", "label", "split"]:
            raise DataError(
                f"{path}: expected header 'path,label,split', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            rel, label, split = (f.strip() for f in row)
            if split not in ("train", "test"):
                raise DataError(
                    f"{path}:{lineno}: split must be 'train' or 'test', got {split!r}")
            if classes is not None and label not in classes:
                raise DataError(f"{path}:{lineno}: unknown label {label!r}")
            if not (root / rel).is_file():
                raise DataError(f"{path}:{lineno}: missing image file {rel!r}")
            entries.append(ManifestEntry(rel, label, split))
    if not entries:
        raise DataError(f"{path}: no samples")
    if classes is None:
        classes = sorted({e.label for e in entries})
    return DatasetManifest(root, entries, list(classes))


# -- balancing and augmentation ------------------------------------------------

@dataclass(frozen=True)
class EpochEntry:
    """One draw from the training split plus its augmentation parameters."""

    entry_index: int  # index into the manifest's train entries
    label: int
    flip: bool = False
    dx: int = 0
    dy: int = 0


def balance_resample(manifest: DatasetManifest, target_per_class: int,
                     seed, aug: bool = False) -> list[EpochEntry]:
    """Uniform with-replacement resampling to a flat class histogram.

    Each class contributes exactly ``target_per_class`` draws. With ``aug``
    on, every draw gets a random horizontal flip and an integer translation
    within +-4 px (zero filled at the borders).
    """
    train = manifest.split_entries("train")
    by_class: dict[str, list[int]] = {c: [] for c in manifest.classes}
    for i, e in enumerate(train):
        by_class[e.label].append(i)
    if isinstance(seed, (tuple, list)):
        entropy = (_RESAMPLE_STREAM,) + tuple(int(s) for s in seed)
    else:
        entropy = (_RESAMPLE_STREAM, int(seed))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
    out: list[EpochEntry] = []
    for cls in manifest.classes:
        idxs = by_class[cls]
        if not idxs:
            raise DataError(f"class {cls!r} has no training samples")
        draws = rng.choice(len(idxs), size=target_per_class, replace=True)
        label = manifest.label_to_index[cls]
        for d in draws:
            if aug:
                flip = bool(rng.integers(0, 2))
                dx = int(rng.integers(-4, 5))
                dy = int(rng.integers(-4, 5))
                out.append(EpochEntry(idxs[int(d)], label, flip, dx, dy))
            else:
                out.append(EpochEntry(idxs[int(d)], label))
    return out


def materialize(manifest: DatasetManifest, entry: EpochEntry,
                dtype=np.float64) -> np.ndarray:
    """Load one epoch entry as a [1, 64, 64] float image with augmentation."""
    train = manifest.split_entries("train")
    img = manifest.load_u8(train[entry.entry_index]).astype(dtype) / 255.0
    if entry.flip:
        img = img[:, ::-1]
    if entry.dx or entry.dy:
        shifted = np.zeros_like(img)
        h, w = img.shape
        sy0, sy1 = max(0, entry.dy), min(h, h + entry.dy)
        sx0, sx1 = max(0, entry.dx), min(w, w + entry.dx)
        shifted[sy0:sy1, sx0:sx1] = img[sy0 - entry.dy:sy1 - entry.dy,
                                        sx0 - entry.dx:sx1 - entry.dx]
        img = shifted
    return img[None, :, :]

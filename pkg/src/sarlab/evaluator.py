"""Confusion-matrix metrics and fixed-width report rendering.

Reports mirror the usual recognition-table layout: one row per class of
per-class recall against columns of per-class training counts
{20, 30, 40, 60, 80, 100}, an Average row holding overall accuracy, a
macro-recall row, and a single summary line of macro recall / precision /
F1 / accuracy. All percentages round half-up to two decimals.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from .data import DatasetManifest
from .errors import DataError
from .model import ModelParams, forward_model
from .tensor import Tensor
from .trainer import Checkpoint

__all__ = [
    "EvalReport",
    "evaluate",
    "metrics",
    "render_report",
    "render_summary",
    "report_csv",
    "confusion_csv",
    "TABLE_COUNTS",
]

TABLE_COUNTS = (20, 30, 40, 60, 80, 100)

LAYOUT_ROWS = {
    "3class": ("Bulk Carrier", "Container Ship", "Tanker"),
    "6class": ("Bulk Carrier", "Container Ship", "Tanker",
               "Cargo", "Fishing", "General Cargo"),
}


@dataclass
class EvalReport:
    class_names: list[str]
    support: list[int]
    per_class_recall: list[float]
    per_class_precision: list[float]
    macro_recall: float
    macro_precision: float
    macro_f1: float
    accuracy: float
    zero_prediction_classes: list[str]


def evaluate(model: ModelParams | Checkpoint, manifest: DatasetManifest,
             split: str = "test", batch_size: int = 64,
             workers: int = 1) -> np.ndarray:
    """Confusion matrix (rows true, cols predicted) over one manifest split."""
    if isinstance(model, Checkpoint):
        if model.classes() != manifest.classes:
            raise DataError(
                f"checkpoint classes {model.classes()} do not match manifest "
                f"classes {manifest.classes}")
        model = model.to_model()
    if model.config.num_classes != manifest.num_classes:
        raise DataError(
            f"model expects {model.config.num_classes} classes but the "
            f"manifest has {manifest.num_classes}")
    entries = manifest.split_entries(split)
    if not entries:
        raise DataError(f"manifest has no {split!r} samples")
    k = manifest.num_classes
    dtype = next(iter(model.tensors.values())).dtype

    def tally(chunk) -> np.ndarray:
        cm = np.zeros((k, k), dtype=np.int64)
        for i in range(0, len(chunk), batch_size):
            part = chunk[i:i + batch_size]
            images = np.stack([manifest.load_sample(e, dtype=dtype).image
                               for e in part])
            labels = np.array([manifest.label_to_index[e.label] for e in part])
            _, probs, _, _ = forward_model(model, Tensor(images), training=False)
            pred = probs.data.argmax(axis=1)
            np.add.at(cm, (labels, pred), 1)
        return cm

    if workers <= 1:
        return tally(entries)
    chunks = [entries[i::workers] for i in range(workers)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        mats = list(pool.map(tally, chunks))
    return np.sum(mats, axis=0)


def metrics(cm: np.ndarray, class_names: list[str]) -> EvalReport:
    """Per-class recall/precision plus macro aggregates from a count matrix.

    Precision of a never-predicted class is reported as 0 and the class is
    flagged. F1 is the harmonic mean of macro precision and macro recall.
    """
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise DataError("confusion matrix must be square")
    if cm.shape[0] != len(class_names):
        raise DataError("class names must match the matrix size")
    total = int(cm.sum())
    if total == 0:
        raise DataError("empty confusion matrix")
    row = cm.sum(axis=1)
    col = cm.sum(axis=0)
    diag = np.diag(cm).astype(np.float64)
    recall = np.divide(diag, row, out=np.zeros_like(diag), where=row > 0)
    precision = np.divide(diag, col, out=np.zeros_like(diag), where=col > 0)
    macro_r = float(recall.mean())
    macro_p = float(precision.mean())
    f1 = (2 * macro_p * macro_r / (macro_p + macro_r)
          if macro_p + macro_r > 0 else 0.0)
    return EvalReport(
        class_names=list(class_names),
        support=[int(r) for r in row],
        per_class_recall=[float(r) for r in recall],
        per_class_precision=[float(p) for p in precision],
        macro_recall=macro_r,
        macro_precision=macro_p,
        macro_f1=float(f1),
        accuracy=float(np.trace(cm) / total),
        zero_prediction_classes=[class_names[i] for i in range(len(class_names))
                                 if col[i] == 0],
    )


def fmt_percent(x: float) -> str:
    q = Decimal(repr(x * 100.0)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return f"{q}%"


def _consistent_classes(reports: dict[int, EvalReport]) -> list[str]:
    names = None
    for r in reports.values():
        if names is None:
            names = r.class_names
        elif r.class_names != names:
            raise DataError("reports disagree on the class set")
    if names is None:
        raise DataError("no reports to render")
    return names


def render_report(reports: dict[int, EvalReport],
                  layout: str | None = None) -> str:
    """Fixed-width table of per-class recall by training count.

    Rows follow the named layout order when given (``3class``/``6class``),
    else the reports' own class order. Canonical counts missing from
    ``reports`` are omitted and listed in a footer notice.
    """
    names = _consistent_classes(reports)
    if layout is not None:
        if layout not in LAYOUT_ROWS:
            raise DataError(f"unknown layout {layout!r}")
        rows = list(LAYOUT_ROWS[layout])
        if sorted(rows) != sorted(names):
            raise DataError(
                f"layout {layout!r} expects classes {sorted(LAYOUT_ROWS[layout])}, "
                f"reports have {sorted(names)}")
    else:
        rows = list(names)
    counts = sorted(reports)
    missing = [c for c in TABLE_COUNTS if c not in reports]

    label_w = max(max(len(r) for r in rows), len("Macro recall")) + 1
    col_w = 9
    lines = []
    header_title = "Training Number in Each Class"
    lines.append("Class".ljust(label_w) + "| " + header_title)
    lines.append(" " * label_w + "|" + "".join(str(c).rjust(col_w) for c in counts))
    sep = "-" * label_w + "+" + "-" * (col_w * len(counts))
    lines.append(sep)
    for row_name in rows:
        idx = names.index(row_name)
        cells = "".join(
            fmt_percent(reports[c].per_class_recall[idx]).rjust(col_w)
            for c in counts)
        lines.append(row_name.ljust(label_w) + "|" + cells)
    lines.append(sep)
    lines.append("Average".ljust(label_w) + "|" + "".join(
        fmt_percent(reports[c].accuracy).rjust(col_w) for c in counts))
    lines.append("Macro recall".ljust(label_w) + "|" + "".join(
        fmt_percent(reports[c].macro_recall).rjust(col_w) for c in counts))
    if missing:
        lines.append("note: no report for training counts "
                     + ", ".join(str(c) for c in missing))
    return "\n".join(lines) + "\n"


def render_summary(report: EvalReport) -> str:
    """One-line recall / precision / F1 / accuracy summary."""
    line = (f"Recall {fmt_percent(report.macro_recall)}  "
            f"Precision {fmt_percent(report.macro_precision)}  "
            f"F1 {fmt_percent(report.macro_f1)}  "
            f"Acc {fmt_percent(report.accuracy)}")
    if report.zero_prediction_classes:
        line += ("  [never predicted: "
                 + ", ".join(report.zero_prediction_classes) + "]")
    return line + "\n"


def report_csv(reports: dict[int, EvalReport]) -> str:
    names = _consistent_classes(reports)
    counts = sorted(reports)
    lines = ["class," + ",".join(f"count_{c}" for c in counts)]
    for i, name in enumerate(names):
        cells = [fmt_percent(reports[c].per_class_recall[i])[:-1] for c in counts]
        lines.append(name + "," + ",".join(cells))
    lines.append("Average," + ",".join(
        fmt_percent(reports[c].accuracy)[:-1] for c in counts))
    return "\n".join(lines) + "\n"


def confusion_csv(cm: np.ndarray, class_names: list[str]) -> str:
    lines = ["true\\pred," + ",".join(class_names)]
    for i, name in enumerate(class_names):
        lines.append(name + "," + ",".join(str(int(v)) for v in cm[i]))
    return "\n".join(lines) + "\n"

"""Paired ablation runs: a full model and a reduced variant share seeds."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .classifier import LossWeights
from .data import DatasetManifest
from .errors import CliUsageError
from .evaluator import EvalReport, evaluate, metrics
from .model import ModelConfig
from .trainer import FitResult, TrainConfig, fit

__all__ = ["ABLATION_MODES", "parse_mode", "apply_mode", "run_ablation",
           "AblationResult"]

ABLATION_MODES = ("full", "no-attention", "uniform-weights", "no-final-concat")


def parse_mode(mode: str) -> tuple[str, ...]:
    """Split a possibly comma-combined mode string and validate it."""
    parts = tuple(p.strip() for p in mode.split(",") if p.strip())
    if not parts:
        raise CliUsageError("empty ablation mode")
    for p in parts:
        if p not in ABLATION_MODES:
            raise CliUsageError(
                f"unknown ablation mode {p!r}; valid: {', '.join(ABLATION_MODES)}")
    if len(parts) > 1 and "full" in parts:
        raise CliUsageError("'full' cannot be combined with other modes")
    return parts


def apply_mode(parts: tuple[str, ...], train_cfg: TrainConfig,
               model_cfg: ModelConfig) -> tuple[TrainConfig, ModelConfig]:
    for p in parts:
        if p == "no-attention":
            train_cfg = replace(train_cfg, loss_weights=LossWeights(
                0.0, train_cfg.loss_weights.lambda2))
        elif p == "uniform-weights":
            model_cfg = replace(model_cfg, weight_mode="uniform")
        elif p == "no-final-concat":
            model_cfg = replace(model_cfg, concat_final=False)
    return train_cfg, model_cfg


@dataclass
class AblationResult:
    mode: str
    seeds: list[int]
    acc_full: list[float]
    acc_mode: list[float]
    report_full: EvalReport
    report_mode: EvalReport
    last_fit_mode: FitResult

    def csv(self) -> str:
        lines = ["mode,seed,acc_full,acc_mode"]
        for s, af, am in zip(self.seeds, self.acc_full, self.acc_mode):
            lines.append(f"{self.mode},{s},{af!r},{am!r}")
        lines.append(f"{self.mode},mean,{float(np.mean(self.acc_full))!r},"
                     f"{float(np.mean(self.acc_mode))!r}")
        lines.append(f"{self.mode},std,{float(np.std(self.acc_full))!r},"
                     f"{float(np.std(self.acc_mode))!r}")
        return "\n".join(lines) + "\n"


def run_ablation(manifest: DatasetManifest, train_cfg: TrainConfig,
                 model_cfg: ModelConfig, mode: str,
                 seeds: list[int], workers: int = 1) -> AblationResult:
    """Train and evaluate the full model and the ablated variant per seed.

    Both runs of a seed use identical configuration apart from the ablated
    pieces. Reports are built from confusion matrices summed over seeds.
    """
    parts = parse_mode(mode)
    ab_train, ab_model = apply_mode(parts, train_cfg, model_cfg)
    k = manifest.num_classes
    cm_full = np.zeros((k, k), dtype=np.int64)
    cm_mode = np.zeros((k, k), dtype=np.int64)
    acc_full, acc_mode = [], []
    last_fit = None
    for seed in seeds:
        res_full = fit(manifest, replace(train_cfg, seed=seed), None, model_cfg)
        cf = evaluate(res_full.checkpoint, manifest, workers=workers)
        cm_full += cf
        acc_full.append(float(np.trace(cf) / cf.sum()))
        if parts == ("full",):
            res_mode, cm, acc = res_full, cf, acc_full[-1]
        else:
            res_mode = fit(manifest, replace(ab_train, seed=seed), None, ab_model)
            cm = evaluate(res_mode.checkpoint, manifest, workers=workers)
            acc = float(np.trace(cm) / cm.sum())
        cm_mode += cm
        acc_mode.append(acc)
        last_fit = res_mode
    return AblationResult(
        mode=mode, seeds=list(seeds), acc_full=acc_full, acc_mode=acc_mode,
        report_full=metrics(cm_full, manifest.classes),
        report_mode=metrics(cm_mode, manifest.classes),
        last_fit_mode=last_fit)

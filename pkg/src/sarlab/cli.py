"""Command-line interface to the laboratory.

One executable with subcommands: gen-data, train, eval, diagnose,
grad-check and ablate. Results go to files and stdout, diagnostics to
stderr. Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric
error. Every run prints its resolved configuration to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import run_ablation
from .attention import AttentionConfig, principal_gap, principal_vectors, similarity_matrix
from .classifier import LossWeights
from .data import (PRESET_OVERLAP3, PRESET_SIX, generate_synthetic,
                   load_class_specs, load_manifest)
from .errors import CliUsageError, ContractError, DataError, NumericError, SarlabError, ShapeError
from .evaluator import confusion_csv, evaluate, fmt_percent, metrics, render_summary
from .gradcheck import run_all
from .model import ModelConfig, forward_model
from .tensor import Tensor, as_tensor
from .trainer import TrainConfig, fit, load_checkpoint

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliUsageError(f"{message}\n{self.format_usage()}")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _print_resolved(command: str, resolved: dict, out_dir: Path | None) -> None:
    doc = {"command": command, **resolved}
    text = json.dumps(doc, indent=2, sort_keys=True, default=str)
    _log("resolved configuration:")
    _log(text)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(text + "\n")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path, help="JSON config; flags override it")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--triplets", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--lambda1", type=float, default=None)
    p.add_argument("--lambda2", type=float, default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--power-iterations", type=int, default=None)
    p.add_argument("--resample-target", type=int, default=None)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--workers", type=int, default=1)


_TRAIN_DEFAULTS = {
    "seed": 0, "epochs": 30, "triplets": 8, "lr": 0.01, "momentum": 0.9,
    "lambda1": 0.5, "lambda2": 1.0, "margin": 0.5, "power_iterations": 20,
    "resample_target": 200, "augment": False,
}

_FILE_KEYS = {
    "seed": "seed", "epochs": "epochs", "triplets_per_batch": "triplets",
    "learning_rate": "lr", "momentum": "momentum", "lambda1": "lambda1",
    "lambda2": "lambda2", "margin": "margin",
    "power_iterations": "power_iterations",
    "resample_target": "resample_target", "augment": "augment",
}


def _resolve_train_config(args) -> tuple[TrainConfig, dict]:
    resolved = dict(_TRAIN_DEFAULTS)
    if args.config is not None:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot parse config {args.config}: {e}") from e
        if not isinstance(doc, dict):
            raise DataError(f"{args.config}: config must be a JSON object")
        flat = dict(doc)
        for sub in ("loss_weights", "attention"):
            if isinstance(flat.get(sub), dict):
                flat.update(flat.pop(sub))
        for file_key, res_key in _FILE_KEYS.items():
            if file_key in flat:
                resolved[res_key] = flat[file_key]
    for key in _TRAIN_DEFAULTS:
        v = getattr(args, key, None)
        if v is not None:
            resolved[key] = v
    cfg = TrainConfig(
        epochs=int(resolved["epochs"]),
        triplets_per_batch=int(resolved["triplets"]),
        learning_rate=float(resolved["lr"]),
        momentum=float(resolved["momentum"]),
        loss_weights=LossWeights(float(resolved["lambda1"]),
                                 float(resolved["lambda2"])),
        attention=AttentionConfig(float(resolved["margin"]),
                                  int(resolved["power_iterations"])),
        seed=int(resolved["seed"]),
        resample_target=int(resolved["resample_target"]),
        augment=bool(resolved["augment"]),
    )
    return cfg, resolved


def build_parser() -> _Parser:
    parser = _Parser(prog="sarlab", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic chip dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, choices=(3, 6), default=3)
    p.add_argument("--spec-file", type=Path,
                   help="JSON class specs; overrides --classes")
    p.add_argument("--n-train", type=int, default=100)
    p.add_argument("--n-test", type=int, default=60)

    p = sub.add_parser("train", help="train a model on a manifest")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("diagnose",
                       help="dump scale weights and similarity matrices")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--limit", type=int, default=64,
                   help="samples used for similarity matrices")
    p.add_argument("--power-iterations", type=int, default=20)

    p = sub.add_parser("grad-check",
                       help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=10, help="number of seeds")

    p = sub.add_parser("ablate", help="paired full-vs-ablated runs")
    _add_train_flags(p)
    p.add_argument("--mode", required=True,
                   help="full | no-attention | uniform-weights | "
                        "no-final-concat (comma-combinable)")
    p.add_argument("--seeds", type=int, default=5,
                   help="number of seeds, starting at --seed")
    return parser


# -- commands -----------------------------------------------------------------

def _cmd_gen_data(args) -> int:
    if args.spec_file is not None:
        specs = load_class_specs(args.spec_file)
    else:
        specs = list(PRESET_OVERLAP3 if args.classes == 3 else PRESET_SIX)
    _print_resolved("gen-data", {
        "out": args.out, "seed": args.seed,
        "classes": [s.name for s in specs],
        "n_train": args.n_train, "n_test": args.n_test,
    }, args.out)
    manifest = generate_synthetic(specs, args.n_train, args.n_test,
                                  args.seed, args.out)
    print(f"wrote {len(manifest.entries)} chips for "
          f"{manifest.num_classes} classes to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg, resolved = _resolve_train_config(args)
    manifest = load_manifest(args.manifest)
    resolved.update({"manifest": args.manifest, "out": args.out,
                     "classes": manifest.classes})
    _print_resolved("train", resolved, args.out)
    result = fit(manifest, cfg, args.out)
    if result.epoch_rows:
        last = result.epoch_rows[-1]
        print(f"epoch {last['epoch']}: total {last['total_loss']:.4f} "
              f"att {last['att_loss']:.4f} recg {last['recg_loss']:.4f} "
              f"train-acc {last['train_acc']:.3f}")
    print(f"checkpoint written to {args.out / 'checkpoint.ckpt'}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    _print_resolved("eval", {
        "checkpoint": args.checkpoint, "manifest": args.manifest,
        "out": args.out, "split": args.split, "workers": args.workers,
    }, args.out)
    cm = evaluate(ckpt, manifest, split=args.split, workers=args.workers)
    report = metrics(cm, manifest.classes)
    (args.out / "confusion.csv").write_text(confusion_csv(cm, manifest.classes))
    lines = [render_summary(report).rstrip("\n")]
    for name, r in zip(report.class_names, report.per_class_recall):
        lines.append(f"{name}: recall {fmt_percent(r)}")
    text = "\n".join(lines) + "\n"
    (args.out / "metrics.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def _cmd_diagnose(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    _print_resolved("diagnose", {
        "checkpoint": args.checkpoint, "manifest": args.manifest,
        "out": args.out, "split": args.split, "limit": args.limit,
        "power_iterations": args.power_iterations,
    }, args.out)
    model = ckpt.to_model()
    entries = manifest.split_entries(args.split)[:args.limit]
    if not entries:
        raise DataError(f"manifest has no {args.split!r} samples")
    dtype = next(iter(model.tensors.values())).dtype
    images = np.stack([manifest.load_sample(e, dtype=dtype).image
                       for e in entries])
    labels = np.array([manifest.label_to_index[e.label] for e in entries])
    ids = [e.path for e in entries]
    pyr, probs, _, weights = forward_model(model, Tensor(images), training=False)

    wlines = ["id,w1,w2,w3,predicted,true"]
    pred = probs.data.argmax(axis=1)
    for i, sid in enumerate(ids):
        w1, w2, w3 = (repr(float(v)) for v in weights.data[i])
        wlines.append(f"{sid},{w1},{w2},{w3},"
                      f"{manifest.classes[pred[i]]},{manifest.classes[labels[i]]}")
    (args.out / "weights.csv").write_text("\n".join(wlines) + "\n")

    sims_dir = args.out / "sims"
    sims_dir.mkdir(parents=True, exist_ok=True)
    scale_maps = [s.data for s in pyr.scales]
    for k, arr in enumerate(scale_maps, start=1):
        n, c, h, w = arr.shape
        fps, _ = principal_vectors(as_tensor(arr.reshape(n * c, h, w)),
                                   args.power_iterations)
        fp = fps.data.reshape(n, c, w)
        for ch in range(c):
            sims = similarity_matrix(fp[:, ch])
            lines = ["id," + ",".join(ids)]
            for i, sid in enumerate(ids):
                lines.append(sid + "," + ",".join(repr(float(v))
                                                  for v in sims[i]))
            (sims_dir / f"scale{k}_ch{ch:02d}.csv").write_text(
                "\n".join(lines) + "\n")

    gap = principal_gap(scale_maps, labels, iters=args.power_iterations)
    print(f"principal-vector cosine gap (intra - inter): {gap:.4f}")
    print(f"wrote weights.csv and {sims_dir}")
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    seeds = [args.seed + i for i in range(args.seeds)]
    _print_resolved("grad-check", {"seeds": seeds}, None)
    report = run_all(seeds)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def _cmd_ablate(args) -> int:
    cfg, resolved = _resolve_train_config(args)
    manifest = load_manifest(args.manifest)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    resolved.update({"manifest": args.manifest, "out": args.out,
                     "mode": args.mode, "seeds": seeds})
    _print_resolved("ablate", resolved, args.out)
    model_cfg = ModelConfig(num_classes=manifest.num_classes)
    result = run_ablation(manifest, cfg, model_cfg, args.mode, seeds,
                          workers=args.workers)
    (args.out / "ablation.csv").write_text(result.csv())
    (args.out / "report_full.txt").write_text(render_summary(result.report_full))
    safe_mode = args.mode.replace(",", "+")
    (args.out / f"report_{safe_mode}.txt").write_text(
        render_summary(result.report_mode))
    wlines = ["step,w1,w2,w3"]
    for row in result.last_fit_mode.weight_rows:
        wlines.append(f"{row['step']},{row['w1']!r},{row['w2']!r},{row['w3']!r}")
    (args.out / f"weights_{safe_mode}.csv").write_text("\n".join(wlines) + "\n")
    print(f"full    : acc mean {np.mean(result.acc_full):.4f} "
          f"std {np.std(result.acc_full):.4f}")
    print(f"{args.mode}: acc mean {np.mean(result.acc_mode):.4f} "
          f"std {np.std(result.acc_mode):.4f}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "diagnose": _cmd_diagnose,
    "grad-check": _cmd_grad_check,
    "ablate": _cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        out = getattr(args, "out", None)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](args)
    except CliUsageError as e:
        _log(f"error: {e}")
        return EXIT_USAGE
    except (DataError, ContractError, ShapeError) as e:
        _log(f"data error: {e}")
        return EXIT_DATA
    except NumericError as e:
        _log(f"numeric error: {e}")
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

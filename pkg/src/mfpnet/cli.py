"""``mfpnet`` command-line entry point.

Every command takes the shared flags (--manifest, --config, --out, --seed,
--patch-size, --classes, --folds, --augment, --threads). Configuration
precedence is flag > config file > default, and the resolved configuration is
written to ``<out>/resolved_config.json``. Failures print one ``error: ...``
line on stderr and exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from html import escape
from pathlib import Path

import numpy as np

from . import __version__
from .augment import expand_dataset, parse_plan, plan_names
from .cgan import CGAN, synthesize_expressions, train_cgan
from .dataeval.experiment import (
    EXPERIMENT_MATRIX, ExperimentConfig, FaceData, _resize, audit_provenance, cross_evaluate,
    expression_classes, fine_tune, gan_pairs, load_face_data, run_experiment, train_fold,
)
from .dataeval.manifest import Manifest, SampleRecord, load_manifest, save_manifest
from .dataeval.metrics import ConfusionMatrix
from .dataeval.synth import SynthSpec, synth_dataset
from .facegeom import LandmarkSet, write_image, write_pts
from .model import MFPModel, shape_plan

log = logging.getLogger("mfpnet")


class UsageError(Exception):
    """Invalid input detected before any side effect."""


# --- configuration -----------------------------------------------------------------

def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return data


def resolve_config(args) -> ExperimentConfig:
    """Defaults, then the config file, then explicit flags."""
    try:
        cfg = ExperimentConfig.from_json(_read_config(args.config))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config {args.config}: {exc}") from None
    model = cfg.model
    if args.patch_size is not None:
        model = replace(model, patch_size=args.patch_size)
    if args.classes is not None:
        model = replace(model, num_classes=args.classes)
    updates = {"model": model}
    for flag, key in (("seed", "seed"), ("folds", "folds"), ("augment", "augment"), ("epochs", "epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            updates[key] = value
    return replace(cfg, **updates)


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"{args.command} needs {', '.join(missing)}")


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _write_resolved(out: Path, args, extra: dict | None = None) -> None:
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    _write_json(out / "resolved_config.json", {"command": args.command, "flags": flags,
                                               "version": __version__, **(extra or {})})


def _face_data(args, cfg: ExperimentConfig) -> tuple[Manifest, FaceData]:
    manifest = load_manifest(args.manifest)
    data = load_face_data(manifest, cfg.model.patch_size, cfg.labeling, cfg.align, cfg.margin)
    if len(data) == 0:
        raise UsageError(f"manifest {args.manifest} has no labelled samples")
    return manifest, data


# --- commands ----------------------------------------------------------------------

def cmd_shape_plan(args) -> None:
    cfg = resolve_config(args)
    rows = shape_plan(cfg.model)
    width = max(len(name) for name, _ in rows)
    text = [f"{'layer':<{width}}  {'shape':<16} {'size':>10}"]
    for name, shape in rows:
        text.append(f"{name:<{width}}  {'×'.join(map(str, shape)):<16} {int(np.prod(shape)):>10}")
    csv_lines = ["layer,shape,size"] + [f"{n},{'x'.join(map(str, s))},{int(np.prod(s))}" for n, s in rows]
    print("\n".join(csv_lines if args.format == "csv" else text))
    if args.out:
        out = _out(args)
        (out / "shape_plan.txt").write_text("\n".join(text) + "\n")
        (out / "shape_plan.csv").write_text("\n".join(csv_lines) + "\n")
        _write_resolved(out, args, {"model": cfg.model.__dict__})


def cmd_synth_data(args) -> None:
    _require(args, "out")
    spec = SynthSpec(subjects=args.subjects, classes=args.classes or 8, per=args.per, noise=args.noise,
                     style_seed=args.style_seed, shift=args.shift)
    if spec.subjects < 1 or spec.per < 1 or spec.classes < 2 or not 0 <= spec.shift <= 1 or spec.noise < 0:
        raise UsageError("need subjects >= 1, per >= 1, classes >= 2, noise >= 0 and shift in [0, 1]")
    out = _out(args)
    path = synth_dataset(spec, out, seed=args.seed or 0)
    n = len(json.loads(path.read_text())["samples"])
    _write_resolved(out, args)
    print(f"wrote {n} samples to {path}")


def cmd_extract_patches(args) -> None:
    _require(args, "manifest", "out")
    cfg = resolve_config(args)
    manifest = load_manifest(args.manifest)
    out = _out(args)
    data = load_face_data(manifest, cfg.model.patch_size, cfg.labeling, cfg.align, cfg.margin,
                          cache=out / "patches.npz")
    _write_resolved(out, args, {"experiment": cfg.to_json()})
    print(f"extracted {len(data)} patch sets of {cfg.model.patch_size}×{cfg.model.patch_size} to "
          f"{out / 'patches.npz'}")


def cmd_augment(args) -> None:
    _require(args, "manifest", "out")
    cfg = resolve_config(args)
    plan = parse_plan(args.plan.split(",")) if args.plan else parse_plan(cfg.tf_plan)
    _, data = _face_data(args, cfg)
    x, y = expand_dataset(data.patches, data.labels, plan, seed=cfg.seed, zca_eps=cfg.zca_eps)
    out = _out(args)
    np.savez_compressed(out / "augmented.npz", patches=x, labels=y, classes=np.array(data.classes))
    _write_resolved(out, args, {"plan": plan_names(plan), "experiment": cfg.to_json()})
    print(f"expanded {len(data)} samples to {len(y)} with plan {plan_names(plan)}")


def cmd_gan_train(args) -> None:
    _require(args, "manifest", "out")
    cfg = resolve_config(args)
    if args.steps is not None:
        cfg = replace(cfg, gan=replace(cfg.gan, steps=args.steps))
    _, data = _face_data(args, cfg)
    src, tgt, lab, _ = gan_pairs(data)
    if len(src) == 0:
        raise UsageError("manifest has no (neutral, expression) pairs from the same subject")
    s = cfg.gan_image_size
    gcfg = replace(cfg.gan, num_labels=len(expression_classes(data.classes)), seed=cfg.seed)
    gan = train_cgan(_resize(data.aligned[src], (s, s)), _resize(data.aligned[tgt], (s, s)), lab, gcfg)
    out = _out(args)
    gan.save(out)
    keys = list(gan.history[0])
    lines = [",".join(keys)] + [",".join(f"{h[k]:.8g}" for k in keys) for h in gan.history]
    (out / "gan_history.csv").write_text("\n".join(lines) + "\n")
    _write_resolved(out, args, {"experiment": cfg.to_json(), "gan_subjects": sorted(set(data.subjects[src]))})
    print(f"trained cGAN on {len(src)} pairs for {gcfg.steps} steps; final d_loss "
          f"{gan.history[-1]['d_loss']:.4f}, g_mse {gan.history[-1]['g_mse']:.4f}")


def cmd_gan_generate(args) -> None:
    _require(args, "manifest", "out", "gan")
    cfg = resolve_config(args)
    gan = CGAN.load(args.gan)
    _, data = _face_data(args, cfg)
    expr = expression_classes(data.classes)
    if gan.G.num_labels != len(expr):
        raise UsageError(f"generator has {gan.G.num_labels} labels but the manifest has {len(expr)} expressions")
    _, _, _, sources = gan_pairs(data)
    out = _out(args)
    (out / "images").mkdir(exist_ok=True)
    (out / "landmarks").mkdir(exist_ok=True)
    records = []
    for n, i in enumerate(sources):
        subject = str(data.subjects[i])
        small = _resize(data.aligned[i], (gan.size, gan.size))
        for k, img in synthesize_expressions(gan.G, small, z_seed=(cfg.seed * 1_000_003 + n) % 2**32):
            label = data.classes[expr[k]]
            stem = f"{subject}_cgan_{label}"
            write_image(out / "images" / f"{stem}.pgm", _resize(img, data.aligned.shape[1:]))
            write_pts(out / "landmarks" / f"{stem}.pts", LandmarkSet(data.landmarks[i]))
            records.append(SampleRecord(f"images/{stem}.pgm", f"landmarks/{stem}.pts", subject,
                                        f"cgan_{label}", 0, label, label, "cgan"))
    save_manifest(out / "cgan_manifest.json", Manifest(tuple(data.classes), records, out))
    _write_resolved(out, args, {"experiment": cfg.to_json()})
    print(f"generated {len(records)} images from {len(sources)} neutral faces")


def cmd_train(args) -> None:
    _require(args, "manifest", "out")
    cfg = resolve_config(args)
    manifest, data = _face_data(args, cfg)
    if cfg.model.num_classes != len(manifest.classes):
        cfg = replace(cfg, model=replace(cfg.model, num_classes=len(manifest.classes)))
    model, entry = train_fold(data, cfg, fold=0)
    out = _out(args)
    model.save(out / "model.ckpt")
    _write_json(out / "train_log.json", entry)
    _write_resolved(out, args, {"experiment": cfg.to_json()})
    print(f"trained on {entry['counts']['total']} samples ({entry['counts']['original']} original); "
          f"final loss {entry['final_loss']:.4f}")


def cmd_eval(args) -> None:
    _require(args, "manifest", "out")
    cfg = resolve_config(args)
    modes = [cfg.augment]
    if args.experiment == "all":
        modes = list(EXPERIMENT_MATRIX.values())
    elif args.experiment is not None:
        modes = [EXPERIMENT_MATRIX[int(args.experiment)]]
    _, data = _face_data(args, cfg)
    out = _out(args)
    summary = {}
    for mode in modes:
        run_cfg = replace(cfg, augment=mode)
        target = out if len(modes) == 1 else out / f"experiment{_row(mode)}"
        result = run_experiment(run_cfg, data, target)
        problems = audit_provenance(result.provenance)
        if problems:
            raise RuntimeError("provenance audit failed: " + "; ".join(problems))
        summary[f"experiment{_row(mode)}"] = {"augment": mode, "mean_accuracy": result.mean_accuracy,
                                             "pooled_accuracy": result.pooled_accuracy,
                                             "fold_accuracies": result.fold_accuracies}
        print(f"{mode:>5}: mean accuracy {result.mean_accuracy:.4f} over {len(result.fold_accuracies)} folds")
    _write_json(out / "summary.json", summary)
    _write_resolved(out, args, {"experiment": cfg.to_json()})


def _row(mode: str) -> int:
    return {v: k for k, v in EXPERIMENT_MATRIX.items()}[mode]


def _load_model(args) -> MFPModel:
    path = Path(args.model)
    if not path.is_file() or not Path(str(path) + ".config.json").is_file():
        raise UsageError(f"model checkpoint {path} (and {path}.config.json) not found")
    return MFPModel.load(path)


def cmd_cross_eval(args) -> None:
    _require(args, "manifest", "out", "model")
    model = _load_model(args)
    cfg = resolve_config(args)
    cfg = replace(cfg, model=model.config)
    _, data = _face_data(args, cfg)
    cm, acc = cross_evaluate(model, data)
    out = _out(args)
    cm.to_csv(out / "confusion.csv")
    _write_json(out / "cross_eval.json", {"accuracy": acc, "samples": cm.total})
    _write_resolved(out, args)
    print(f"cross-dataset accuracy {acc:.4f} on {cm.total} samples")


def cmd_fine_tune(args) -> None:
    _require(args, "manifest", "out", "model")
    model = _load_model(args)
    cfg = resolve_config(args)
    cfg = replace(cfg, model=model.config)
    if not 0 < args.fraction < 1:
        raise UsageError(f"--fraction must be in (0, 1), got {args.fraction}")
    _, data = _face_data(args, cfg)
    epochs = args.epochs if args.epochs is not None else cfg.fine_tune_epochs
    model, info = fine_tune(model, data, args.fraction, epochs, seed=cfg.seed, lr=cfg.lr,
                            batch_size=cfg.batch_size)
    out = _out(args)
    model.save(out / "model.ckpt")
    _write_json(out / "fine_tune.json", info)
    _write_resolved(out, args)
    print(f"accuracy {info['pre_accuracy']:.4f} -> {info['post_accuracy']:.4f} "
          f"({len(info['tune_subjects'])} tune / {len(info['test_subjects'])} test subjects)")


def confusion_svg(cm: ConfusionMatrix, title: str = "confusion matrix (row %)") -> str:
    """Heatmap of row percentages with the value printed in every cell."""
    pct = cm.row_percentages()
    k, cell, left, top = len(cm.classes), 56, 110, 70
    width, height = left + k * cell + 20, top + k * cell + 40
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="11">',
             f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
             f'<text x="{left + k * cell / 2:.0f}" y="{height - 8}" text-anchor="middle">predicted</text>']
    for j, name in enumerate(cm.classes):
        parts.append(f'<text x="{left + j * cell + cell / 2:.0f}" y="{top - 8}" text-anchor="middle">'
                     f'{escape(name)}</text>')
    for i, name in enumerate(cm.classes):
        y = top + i * cell
        parts.append(f'<text x="{left - 6}" y="{y + cell / 2 + 4:.0f}" text-anchor="end">{escape(name)}</text>')
        for j in range(k):
            v = pct[i, j]
            shade = int(round(255 - 2.0 * v))
            colour = f"rgb({shade},{shade + (255 - shade) // 3},255)"
            ink = "#fff" if v > 60 else "#000"
            x = left + j * cell
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{colour}" stroke="#888"/>')
            parts.append(f'<text class="cell" data-row="{i}" data-col="{j}" x="{x + cell / 2:.0f}" '
                         f'y="{y + cell / 2 + 4:.0f}" text-anchor="middle" fill="{ink}">{v:.1f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot(args) -> None:
    _require(args, "confusion")
    try:
        cm = ConfusionMatrix.from_csv(args.confusion)
    except FileNotFoundError:
        raise UsageError(f"confusion CSV not found: {args.confusion}") from None
    target = Path(args.out) / "confusion.svg" if args.out else Path(args.confusion).with_suffix(".svg")
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(confusion_svg(cm, args.title))
    if args.out:
        _write_resolved(Path(args.out), args)
    print(f"wrote {target}")


# --- parser ------------------------------------------------------------------------

def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", help="dataset manifest (JSON)")
    common.add_argument("--config", help="experiment config file (JSON)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="experiment seed")
    common.add_argument("--patch-size", type=_positive, help="patch side P")
    common.add_argument("--classes", type=_positive, help="number of classes K")
    common.add_argument("--folds", type=_positive, help="cross-validation folds")
    common.add_argument("--augment", choices=["none", "cgan", "tf", "both"])
    common.add_argument("--threads", type=_positive, default=1,
                        help="worker cap (the numeric core runs single-threaded)")

    parser = argparse.ArgumentParser(prog="mfpnet", description="Multi-patch facial expression CNN toolkit")
    parser.add_argument("--version", action="version", version=f"mfpnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    p = add("shape-plan", cmd_shape_plan, "print per-layer tensor shapes")
    p.add_argument("--format", choices=["text", "csv"], default="text")
    p = add("synth-data", cmd_synth_data, "write a procedural face dataset")
    p.add_argument("--subjects", type=int, default=16)
    p.add_argument("--per", type=int, default=4, help="images per (subject, class)")
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--shift", type=float, default=0.0, help="appearance shift toward --style-seed")
    p.add_argument("--style-seed", type=int, default=0)
    add("extract-patches", cmd_extract_patches, "align faces and cache their seven patches")
    p = add("augment", cmd_augment, "expand patch sets with transformations")
    p.add_argument("--plan", help="comma-separated names: rotate90,rotate180,translate,shift,zca")
    p = add("gan-train", cmd_gan_train, "train the expression cGAN")
    p.add_argument("--steps", type=_positive)
    p = add("gan-generate", cmd_gan_generate, "synthesize expressions for every neutral face")
    p.add_argument("--gan", help="directory written by gan-train")
    p = add("train", cmd_train, "train one model on the whole manifest")
    p.add_argument("--epochs", type=int)
    p = add("eval", cmd_eval, "subject-independent k-fold evaluation")
    p.add_argument("--epochs", type=int)
    p.add_argument("--experiment", choices=["1", "2", "3", "4", "all"],
                   help="experiment-matrix row (1 none, 2 cgan, 3 tf, 4 both) or all")
    p = add("cross-eval", cmd_cross_eval, "score a trained model on another dataset")
    p.add_argument("--model", help="model checkpoint")
    p = add("fine-tune", cmd_fine_tune, "fine-tune on part of a dataset, test on the rest")
    p.add_argument("--model", help="model checkpoint")
    p.add_argument("--fraction", type=float, default=0.8)
    p.add_argument("--epochs", type=int)
    p = add("plot", cmd_plot, "render a confusion CSV as an SVG heatmap")
    p.add_argument("--confusion", help="confusion matrix CSV")
    p.add_argument("--title", default="confusion matrix (row %)")
    return parser


def main(argv=None) -> int:
    level = os.environ.get("MFPNET_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

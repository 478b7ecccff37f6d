"""Subject-independent experiment runs: load faces, augment training folds, train, score.

Augmentation modes mirror the four-row experiment matrix: ``none``, ``cgan``
(generated whole faces), ``tf`` (patch transformations) and ``both``. Every
augmentation step (cGAN training, ZCA fitting, TF expansion) only ever sees
the training subjects of the current fold; the provenance log records which
subjects fed each step so that :func:`audit_provenance` can check it.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from ..augment import DEFAULT_ZCA_EPS, FULL_PLAN, expand_dataset, parse_plan, plan_names
from ..cgan import CGANConfig, synthesize_expressions, train_cgan
from ..facegeom import (
    DEFAULT_MARGIN, AlignSpec, LandmarkSet, align_face, extract_patches, read_image, read_landmarks,
)
from ..model import MFPModel, ModelConfig, fit
from .folds import make_subject_folds, subject_split
from .labeling import FromFramePolicy, PrefixPolicy, label_manifest_samples
from .manifest import NEUTRAL, Manifest
from .metrics import ConfusionMatrix, evaluate

log = logging.getLogger("mfpnet.experiment")

AUGMENT_MODES = ("none", "cgan", "tf", "both")
EXPERIMENT_MATRIX = {1: "none", 2: "cgan", 3: "tf", 4: "both"}


@dataclass(frozen=True)
class ExperimentConfig:
    augment: str = "none"
    model: ModelConfig = ModelConfig()
    folds: int = 10
    seed: int = 0
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    labeling: dict | None = field(default_factory=lambda: {"policy": "prefix", "neutral_prefix": 7,
                                                           "expression_suffix": 3})
    tf_plan: tuple = tuple(plan_names(FULL_PLAN))
    zca_eps: float = DEFAULT_ZCA_EPS
    gan: CGANConfig = CGANConfig(steps=300)
    gan_image_size: int = 32
    align: AlignSpec = AlignSpec()
    margin: float = DEFAULT_MARGIN
    fine_tune_fraction: float | None = None
    fine_tune_epochs: int = 10

    def __post_init__(self):
        if self.augment not in AUGMENT_MODES:
            raise ValueError(f"augment must be one of {AUGMENT_MODES}, got {self.augment!r}")
        if self.folds < 2:
            raise ValueError("need at least 2 folds")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        parse_plan(self.tf_plan)
        label_policy(self.labeling)

    def to_json(self) -> dict:
        out = asdict(self)
        out["tf_plan"] = list(self.tf_plan)
        out["align"]["size"] = list(self.align.size)
        return out

    @classmethod
    def from_json(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        if "model" in data:
            data["model"] = ModelConfig(**data["model"])
        if "gan" in data:
            data["gan"] = CGANConfig(**data["gan"])
        if "align" in data:
            a = dict(data["align"])
            if "size" in a:
                a["size"] = tuple(a["size"])
            data["align"] = AlignSpec(**a)
        if "tf_plan" in data:
            data["tf_plan"] = tuple(data["tf_plan"])
        return cls(**data)


def label_policy(spec: dict | None):
    if spec is None:
        return None
    spec = dict(spec)
    kind = spec.pop("policy", None)
    if kind == "prefix":
        return PrefixPolicy(**spec)
    if kind == "from_frame":
        return FromFramePolicy(**spec)
    raise ValueError(f"labeling policy must be 'prefix' or 'from_frame', got {kind!r}")


def sub_seed(seed: int, *names) -> int:
    """Stable named sub-seed derived from the experiment seed."""
    text = ":".join([str(seed), *map(str, names)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")


# --- face data -------------------------------------------------------------------

@dataclass
class FaceData:
    """Aligned faces, their landmarks and patch sets, one row per labelled sample."""

    classes: tuple[str, ...]
    subjects: np.ndarray    # (N,) str
    sequences: np.ndarray   # (N,) str
    frames: np.ndarray      # (N,) int
    labels: np.ndarray      # (N,) int
    aligned: np.ndarray     # N×H×W
    landmarks: np.ndarray   # N×68×2 in aligned coordinates
    patches: np.ndarray     # N×7×P×P

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "FaceData":
        idx = np.asarray(idx)
        return FaceData(self.classes, self.subjects[idx], self.sequences[idx], self.frames[idx],
                        self.labels[idx], self.aligned[idx], self.landmarks[idx], self.patches[idx])

    def subject_mask(self, subjects) -> np.ndarray:
        return np.isin(self.subjects, sorted(subjects))

    def save(self, path) -> None:
        np.savez_compressed(path, classes=np.array(self.classes), subjects=self.subjects,
                            sequences=self.sequences, frames=self.frames, labels=self.labels,
                            aligned=self.aligned, landmarks=self.landmarks, patches=self.patches)

    @classmethod
    def load(cls, path) -> "FaceData":
        with np.load(path) as d:
            return cls(tuple(d["classes"].tolist()), d["subjects"], d["sequences"], d["frames"],
                       d["labels"], d["aligned"], d["landmarks"], d["patches"])


def load_face_data(manifest: Manifest, patch_size: int, labeling: dict | None = None,
                   align: AlignSpec = AlignSpec(), margin: float = DEFAULT_MARGIN,
                   cache=None) -> FaceData:
    """Resolve frame labels, align every face and cut its seven patches.

    With ``cache`` (an .npz path) the result is reused when the manifest and
    geometry settings match the cached fingerprint.
    """
    records = label_manifest_samples(manifest.samples, label_policy(labeling))
    records = sorted(records, key=lambda r: r.key)
    fingerprint = hashlib.sha256(json.dumps({
        "samples": [[r.image, r.landmarks, *r.key, r.resolved_label] for r in records],
        "root": str(manifest.root), "classes": list(manifest.classes), "p": patch_size,
        "align": [align.eye_distance, align.eye_height, list(align.size)], "margin": margin,
    }).encode()).hexdigest()
    if cache is not None:
        cache = Path(cache)
        meta = cache.with_suffix(".json")
        if cache.is_file() and meta.is_file() and json.loads(meta.read_text()).get("fingerprint") == fingerprint:
            return FaceData.load(cache)
    aligned, lms, patches = [], [], []
    for r in records:
        img = read_image(manifest.path(r.image))
        a, lm, _ = align_face(img, read_landmarks(manifest.path(r.landmarks)), align)
        aligned.append(a)
        lms.append(lm.points)
        patches.append(extract_patches(a, lm, patch_size, margin).patches)
    h, w = align.size
    data = FaceData(
        tuple(manifest.classes),
        np.array([r.subject for r in records], dtype=str),
        np.array([r.sequence for r in records], dtype=str),
        np.array([r.frame for r in records], dtype=np.int64),
        np.array([manifest.class_index(r.resolved_label) for r in records], dtype=np.int64),
        np.array(aligned).reshape(-1, h, w),
        np.array(lms).reshape(-1, 68, 2),
        np.array(patches).reshape(-1, 7, patch_size, patch_size))
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        data.save(cache)
        cache.with_suffix(".json").write_text(json.dumps({"fingerprint": fingerprint}) + "\n")
    return data


# --- cGAN augmentation -------------------------------------------------------------

def expression_classes(classes: Sequence[str]) -> list[int]:
    """Class indices the generator is conditioned on (everything except neutral)."""
    return [i for i, c in enumerate(classes) if c != NEUTRAL]


def _resize(images: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = images.shape[-2:]
    if (h, w) == tuple(size):
        return images.copy()
    factors = (1,) * (images.ndim - 2) + (size[0] / h, size[1] / w)
    return np.clip(ndimage.zoom(images, factors, order=1, grid_mode=True, mode="nearest"), 0.0, 1.0)


def gan_pairs(data: FaceData) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[int]]:
    """(neutral source index, expression target index, generator label) for each expression sample.

    A target is paired with a neutral frame of its own sequence when there is one,
    otherwise with the subject's first neutral frame.
    """
    neutral = data.classes.index(NEUTRAL) if NEUTRAL in data.classes else None
    if neutral is None:
        raise ValueError("cGAN augmentation needs a 'neutral' class")
    expr = expression_classes(data.classes)
    by_seq, by_subject = {}, {}
    for i in np.argsort(data.frames, kind="stable"):
        if data.labels[i] == neutral:
            by_seq.setdefault((data.subjects[i], data.sequences[i]), int(i))
            by_subject.setdefault(data.subjects[i], int(i))
    src, tgt, lab = [], [], []
    for i in range(len(data)):
        if data.labels[i] == neutral:
            continue
        j = by_seq.get((data.subjects[i], data.sequences[i]), by_subject.get(data.subjects[i]))
        if j is None:
            continue
        src.append(j)
        tgt.append(i)
        lab.append(expr.index(int(data.labels[i])))
    return np.array(src, dtype=np.int64), np.array(tgt, dtype=np.int64), np.array(lab, dtype=np.int64), \
        sorted(by_subject.values())


def cgan_augment(train: FaceData, config: ExperimentConfig, seed: int, patch_size: int):
    """Train a cGAN on the training faces and synthesize every expression for each neutral source.

    Returns (patches, labels, gan_subjects, gan) where generated faces reuse the
    source face's aligned landmarks for patch extraction.
    """
    src, tgt, lab, sources = gan_pairs(train)
    if len(src) == 0:
        raise ValueError("no (neutral, expression) pairs in the training subjects")
    expr = expression_classes(train.classes)
    s = config.gan_image_size
    gcfg = replace(config.gan, num_labels=len(expr), seed=seed)
    gan = train_cgan(_resize(train.aligned[src], (s, s)), _resize(train.aligned[tgt], (s, s)), lab, gcfg)
    patches, labels = [], []
    for n, i in enumerate(sources):
        small = _resize(train.aligned[i], (s, s))
        for k, img in synthesize_expressions(gan.G, small, z_seed=sub_seed(seed, "z", n)):
            face = _resize(img, train.aligned.shape[1:])
            patches.append(extract_patches(face, LandmarkSet(train.landmarks[i]), patch_size,
                                           config.margin).patches)
            labels.append(expr[k])
    gan_subjects = sorted(set(train.subjects[src]) | set(train.subjects[tgt]))
    return np.array(patches), np.array(labels, dtype=np.int64), gan_subjects, gan


# --- experiment ------------------------------------------------------------------

@dataclass
class ExperimentResult:
    config: ExperimentConfig
    fold_accuracies: list[float]
    fold_confusions: list[ConfusionMatrix]
    confusion: ConfusionMatrix
    provenance: dict

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def pooled_accuracy(self) -> float:
        return self.confusion.accuracy


def _digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def train_fold(train: FaceData, config: ExperimentConfig, fold: int):
    """Augment the training faces as configured and fit a fresh model. Returns (model, log entry)."""
    seed = config.seed
    x, y = train.patches, train.labels
    train_subjects = sorted(set(train.subjects))
    entry = {"train_subjects": train_subjects, "zca_fit_subjects": [], "gan_fit_subjects": [],
             "counts": {"original": int(len(y)), "cgan": 0, "tf": 0}}
    p = config.model.patch_size
    if config.augment in ("cgan", "both"):
        gx, gy, gan_subjects, _ = cgan_augment(train, config, sub_seed(seed, "gan", fold), p)
        x, y = np.concatenate([x, gx]), np.concatenate([y, gy])
        entry["gan_fit_subjects"] = gan_subjects
        entry["counts"]["cgan"] = int(len(gy))
    if config.augment in ("tf", "both"):
        plan = parse_plan(config.tf_plan)
        n_before = len(y)
        x, y = expand_dataset(x, y, plan, seed=sub_seed(seed, "augment", fold), zca_eps=config.zca_eps)
        entry["counts"]["tf"] = int(len(y) - n_before)
        if any(type(t).__name__ == "ZCAWhiten" for t in plan):
            entry["zca_fit_subjects"] = train_subjects
    entry["counts"]["total"] = int(len(y))
    model = MFPModel(replace(config.model, num_classes=len(train.classes), seed=sub_seed(seed, "init", fold)))
    history = fit(model, x, y, epochs=config.epochs, batch_size=config.batch_size, lr=config.lr,
                  seed=sub_seed(seed, "dropout", fold))
    entry["final_loss"] = history[-1]["loss"] if history else None
    return model, entry


def run_experiment(config: ExperimentConfig, data: FaceData | Manifest, out_dir=None,
                   folds: Sequence[int] | None = None) -> ExperimentResult:
    """k-fold subject-independent run. Writes metrics, confusions and provenance to ``out_dir``.

    ``folds`` restricts which folds are executed (all by default).
    """
    if isinstance(data, Manifest):
        data = load_face_data(data, config.model.patch_size, config.labeling, config.align, config.margin)
    if len(data) == 0:
        raise ValueError("no labelled samples to run an experiment on")
    seeds = {name: sub_seed(config.seed, name) for name in ("folds", "init", "dropout", "augment", "gan")}
    plan = make_subject_folds(data.subjects.tolist(), config.folds, seeds["folds"])
    accs, cms, entries = [], [], []
    for fold in (range(plan.k) if folds is None else folds):
        try:
            test_mask = data.subject_mask(plan.test_subjects(fold))
            train, test = data.take(np.nonzero(~test_mask)[0]), data.take(np.nonzero(test_mask)[0])
            model, entry = train_fold(train, config, fold)
            cm, acc = evaluate(model.predict_classes, test.patches, test.labels, data.classes)
        except Exception as exc:
            raise RuntimeError(f"fold {fold} failed: {exc}") from exc
        entry.update({"fold": fold, "test_subjects": sorted(plan.test_subjects(fold)),
                      "test_count": int(len(test)), "test_digest": _digest(test.patches),
                      "accuracy": acc})
        log.info("fold %d: accuracy %.4f (%d train, %d test)", fold, acc, entry["counts"]["total"], len(test))
        accs.append(acc)
        cms.append(cm)
        entries.append(entry)
    total = cms[0]
    for cm in cms[1:]:
        total = total + cm
    provenance = {"config": config.to_json(), "seeds": {"experiment": config.seed, **seeds},
                  "fold_plan": plan.to_json(), "folds": entries,
                  "classes": list(data.classes), "samples": int(len(data))}
    result = ExperimentResult(config, accs, cms, total, provenance)
    if out_dir is not None:
        write_experiment(result, out_dir)
    return result


def write_experiment(result: ExperimentResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["fold,accuracy,train_count,test_count"]
    for e in result.provenance["folds"]:
        lines.append(f"{e['fold']},{e['accuracy']:.6f},{e['counts']['total']},{e['test_count']}")
    lines.append(f"mean,{result.mean_accuracy:.6f},,")
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")
    for e, cm in zip(result.provenance["folds"], result.fold_confusions):
        cm.to_csv(out / f"confusion_fold{e['fold']}.csv")
    result.confusion.to_csv(out / "confusion_aggregate.csv")
    (out / "provenance.json").write_text(json.dumps(result.provenance, indent=1) + "\n")
    (out / "config.json").write_text(json.dumps(result.config.to_json(), indent=1) + "\n")


def audit_provenance(provenance: dict) -> list[str]:
    """Every way a test subject leaked into training, ZCA fitting or cGAN training; empty if clean."""
    problems = []
    folds = [set(f) for f in provenance["fold_plan"]["folds"]]
    everyone = set().union(*folds) if folds else set()
    if sum(len(f) for f in folds) != len(everyone):
        problems.append("fold plan assigns some subject to more than one fold")
    for e in provenance["folds"]:
        test = set(e["test_subjects"])
        if test != folds[e["fold"]]:
            problems.append(f"fold {e['fold']}: logged test subjects differ from the fold plan")
        for key in ("train_subjects", "zca_fit_subjects", "gan_fit_subjects"):
            leaked = test & set(e[key])
            if leaked:
                problems.append(f"fold {e['fold']}: test subjects {sorted(leaked)} appear in {key}")
    return problems


def run_matrix(data: FaceData | Manifest, base: ExperimentConfig, out_dir=None,
               experiments: Sequence[int] = tuple(EXPERIMENT_MATRIX)) -> dict[int, ExperimentResult]:
    """Run the four augmentation settings with otherwise identical configuration."""
    if isinstance(data, Manifest):
        data = load_face_data(data, base.model.patch_size, base.labeling, base.align, base.margin)
    results = {}
    for n in experiments:
        cfg = replace(base, augment=EXPERIMENT_MATRIX[n])
        results[n] = run_experiment(cfg, data, None if out_dir is None else Path(out_dir) / f"experiment{n}")
    return results


# --- cross-dataset and fine-tuning ------------------------------------------------

def _check_classes(model: MFPModel, data: FaceData) -> None:
    if model.config.num_classes != len(data.classes):
        raise ValueError(f"model predicts {model.config.num_classes} classes but the data has "
                         f"{len(data.classes)}: {list(data.classes)}")


def cross_evaluate(model: MFPModel, data: FaceData) -> tuple[ConfusionMatrix, float]:
    """Score a trained model on another dataset with the same class list."""
    _check_classes(model, data)
    return evaluate(model.predict_classes, data.patches, data.labels, data.classes)


def fine_tune(model: MFPModel, data: FaceData, fraction: float = 0.8, epochs: int = 10, seed: int = 0,
              lr: float = 1e-3, batch_size: int = 32) -> tuple[MFPModel, dict]:
    """Continue training on ``fraction`` of the subjects and test on the rest (in place)."""
    _check_classes(model, data)
    tune_subjects, test_subjects = subject_split(data.subjects.tolist(), fraction, sub_seed(seed, "split"))
    if set(tune_subjects) & set(test_subjects):
        raise ValueError("fine-tune split is not subject-disjoint")
    tune = data.take(np.nonzero(data.subject_mask(tune_subjects))[0])
    test = data.take(np.nonzero(data.subject_mask(test_subjects))[0])
    _, pre = evaluate(model.predict_classes, test.patches, test.labels, data.classes)
    history = fit(model, tune.patches, tune.labels, epochs=epochs, batch_size=batch_size, lr=lr,
                  seed=sub_seed(seed, "fine-tune")) if epochs > 0 else []
    cm, post = evaluate(model.predict_classes, test.patches, test.labels, data.classes)
    return model, {"pre_accuracy": pre, "post_accuracy": post, "delta": post - pre,
                   "tune_subjects": tune_subjects, "test_subjects": test_subjects,
                   "tune_count": int(len(tune)), "test_count": int(len(test)), "epochs": epochs,
                   "history": history, "confusion": cm.counts.tolist()}

"""Seven-branch patch CNN with dense aggregation.

Each branch is three stages of (5×5 valid conv, 2×2 max-pool, ReLU) with 6, 16
and 120 channels. Branch outputs are flattened, concatenated in patch order and
classified by dense(ReLU) -> dropout -> dense(softmax).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .facegeom import PatchSet
from .numcore import Parameter, Tape, Tensor

CHANNELS = (6, 16, 120)
KERNEL = 5
N_PATCHES = 7


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 36
    num_classes: int = 8
    dense_width: int = 256
    dropout: float = 0.5
    sub_dropout: float = 0.0
    seed: int = 0


def shape_plan(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Exact tensor shape after every layer; raises ConfigError at the first impossible stage."""
    p = config.patch_size
    rows: list[tuple[str, tuple[int, ...]]] = [("input", (1, p, p))]
    side, c_in = p, 1
    for n, c in enumerate(CHANNELS, start=1):
        if side < KERNEL:
            raise ConfigError(
                f"patch size {p}: stage C{n} conv needs at least {KERNEL}×{KERNEL} input, got {side}×{side}")
        side -= KERNEL - 1
        rows.append((f"C{n} conv", (c, side, side)))
        if side < 2:
            raise ConfigError(
                f"patch size {p}: stage C{n} pool needs at least 2×2 input, got {side}×{side}")
        side //= 2
        rows.append((f"C{n} pool", (c, side, side)))
        c_in = c
    feat = c_in * side * side
    rows.append(("branch features", (feat,)))
    rows.append(("concat", (N_PATCHES * feat,)))
    rows.append(("dense1 relu", (config.dense_width,)))
    rows.append(("dense2 softmax", (config.num_classes,)))
    return rows


def feature_length(config: ModelConfig) -> int:
    return shape_plan(config)[-4][1][0]


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class SubNetwork:
    def __init__(self, rng: np.random.Generator, prefix: str = "sub"):
        self.convs: list[tuple[Parameter, Parameter]] = []
        c_in = 1
        for n, c in enumerate(CHANNELS, start=1):
            w = glorot(rng, (c, c_in, KERNEL, KERNEL), c_in * KERNEL ** 2, c * KERNEL ** 2)
            self.convs.append((Parameter(w, f"{prefix}.c{n}.w"), Parameter(np.zeros(c), f"{prefix}.c{n}.b")))
            c_in = c

    @property
    def params(self) -> list[Parameter]:
        return [p for pair in self.convs for p in pair]

    def parameter_counts(self) -> dict[str, int]:
        return {f"C{n}": w.size + b.size for n, (w, b) in enumerate(self.convs, start=1)}

    def stage_outputs(self, x) -> list[Tensor]:
        """Outputs after each (conv, pool, relu) stage for input N×1×P×P."""
        outs = []
        for w, b in self.convs:
            x = nc.relu(nc.maxpool2x2(nc.conv2d_valid(x, w, b)))
            outs.append(x)
        return outs

    def __call__(self, x) -> Tensor:
        return nc.flatten(self.stage_outputs(x)[-1])


class MFPModel:
    def __init__(self, config: ModelConfig = ModelConfig()):
        self.config = config
        self.plan = shape_plan(config)
        feat = feature_length(config)
        rng = np.random.default_rng(config.seed)
        self.branches = [SubNetwork(rng, f"sub{i}") for i in range(N_PATCHES)]
        w1, k = config.dense_width, config.num_classes
        self.dense1 = (Parameter(glorot(rng, (w1, N_PATCHES * feat), N_PATCHES * feat, w1), "dense1.w"),
                       Parameter(np.zeros(w1), "dense1.b"))
        self.dense2 = (Parameter(glorot(rng, (k, w1), w1, k), "dense2.w"),
                       Parameter(np.zeros(k), "dense2.b"))

    @property
    def params(self) -> list[Parameter]:
        out = [p for b in self.branches for p in b.params]
        return out + list(self.dense1) + list(self.dense2)

    def _as_batch(self, patches) -> tuple[np.ndarray, bool]:
        arr = patches.patches if isinstance(patches, PatchSet) else np.asarray(patches, dtype=np.float64)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        p = self.config.patch_size
        if arr.ndim != 4 or arr.shape[1:] != (N_PATCHES, p, p):
            raise nc.ShapeError(f"expected patches of shape (N, 7, {p}, {p}), got {np.shape(patches)}")
        return arr, single

    def logits(self, patches, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        x, single = self._as_batch(patches)
        feats = []
        for i, branch in enumerate(self.branches):
            f = branch(x[:, i:i + 1])
            feats.append(nc.dropout(f, self.config.sub_dropout, rng, training))
        h = nc.relu(nc.dense(nc.concat(feats, axis=1), *self.dense1))
        h = nc.dropout(h, self.config.dropout, rng, training)
        out = nc.dense(h, *self.dense2)
        return nc.reshape(out, (self.config.num_classes,)) if single else out

    def forward(self, patches, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Class probabilities: (K,) for one PatchSet, (N, K) for a batch."""
        return nc.softmax(self.logits(patches, training, rng))

    __call__ = forward

    def predict_proba(self, patches, batch_size: int = 64) -> np.ndarray:
        x, single = self._as_batch(patches)
        out = np.concatenate([self.forward(x[i:i + batch_size]).data
                              for i in range(0, len(x), batch_size)]) if len(x) else np.zeros((0, self.config.num_classes))
        return out[0] if single else out

    def predict_classes(self, patches) -> np.ndarray:
        return np.argmax(self.predict_proba(patches), axis=-1)

    def save(self, path) -> None:
        """Checkpoint plus ``<path>.config.json`` holding the ModelConfig."""
        nc.save_checkpoint(path, self.params)
        Path(str(path) + ".config.json").write_text(json.dumps(asdict(self.config), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "MFPModel":
        config = ModelConfig(**json.loads(Path(str(path) + ".config.json").read_text()))
        model = cls(config)
        nc.restore(model.params, nc.load_checkpoint(path))
        return model


def predict(model: MFPModel, patches) -> tuple[int, np.ndarray]:
    """Arg-max class (lowest index on ties) and the probability vector."""
    probs = model.forward(patches, training=False).data
    return int(np.argmax(probs)), probs


def train_step(model: MFPModel, patches, labels: Sequence[int], optimizer: nc.RMSProp,
               rng: np.random.Generator | None = None) -> float:
    """One RMSProp step on the batch's mean cross-entropy; returns the pre-step loss."""
    labels = np.asarray(labels, dtype=np.int64)
    x, _ = model._as_batch(patches)
    if labels.size == 0 or labels.size != len(x):
        raise ValueError(f"need one label per sample, got {labels.size} labels for {len(x)} samples")
    if np.any(labels < 0) or np.any(labels >= model.config.num_classes):
        raise ValueError(f"labels must lie in [0, {model.config.num_classes})")
    optimizer.zero_grad()
    with Tape() as tape:
        loss = nc.cross_entropy(model.forward(x, training=True, rng=rng), labels)
    tape.backward(loss)
    optimizer.step()
    return float(loss.data)


def fit(model: MFPModel, patches: np.ndarray, labels: np.ndarray, *, epochs: int,
        batch_size: int = 32, lr: float = 1e-3, seed: int = 0,
        optimizer: nc.RMSProp | None = None, stop_at_accuracy: float | None = None,
        log=None) -> list[dict]:
    """Shuffled mini-batch training. Returns per-epoch mean loss (and train accuracy
    when ``stop_at_accuracy`` is set, which also ends training once reached)."""
    rng = np.random.default_rng(seed)
    opt = optimizer or nc.RMSProp(model.params, lr=lr)
    labels = np.asarray(labels, dtype=np.int64)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(labels))
        losses = []
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            losses.append(train_step(model, patches[idx], labels[idx], opt, rng) * len(idx))
        entry = {"epoch": epoch + 1, "loss": float(np.sum(losses) / len(labels))}
        if stop_at_accuracy is not None:
            entry["train_accuracy"] = float(np.mean(model.predict_classes(patches) == labels))
        history.append(entry)
        if log:
            log(entry)
        if stop_at_accuracy is not None and entry["train_accuracy"] >= stop_at_accuracy:
            break
    return history

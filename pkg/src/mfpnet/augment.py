"""Label-preserving patch transformations and training-set expansion.

Five transformations: quarter turn, half turn, zero-fill translation, circular
shift and ZCA whitening. Expansion keeps every original sample and appends one
transformed copy per sample for each transformation in the plan.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

DEFAULT_ZCA_EPS = 1e-2


@dataclass(frozen=True)
class Rotate90:
    """Counterclockwise quarter turn."""


@dataclass(frozen=True)
class Rotate180:
    pass


@dataclass(frozen=True)
class Translate:
    """Move content by (dx, dy) pixels (x right, y down); vacated pixels become 0.
    ``None`` offsets are drawn per sample during expansion."""

    dx: int | None = None
    dy: int | None = None


@dataclass(frozen=True)
class CircularShift:
    """Like Translate but content leaving one edge re-enters at the other."""

    dx: int | None = None
    dy: int | None = None


@dataclass(frozen=True)
class ZCAWhiten:
    pass


Transform = Union[Rotate90, Rotate180, Translate, CircularShift, ZCAWhiten]

TF_NAMES = {"rotate90": Rotate90, "rotate180": Rotate180, "translate": Translate,
            "shift": CircularShift, "zca": ZCAWhiten}
FULL_PLAN = (Rotate90(), Rotate180(), Translate(), CircularShift(), ZCAWhiten())


@dataclass(frozen=True)
class ZCAStatistics:
    mean: np.ndarray      # (D,)
    matrix: np.ndarray    # (D, D), symmetric
    eps: float

    @property
    def dim(self) -> int:
        return self.mean.size


def parse_plan(items: Sequence) -> tuple[Transform, ...]:
    """Build a plan from names or ``{"name": ..., "dx": .., "dy": ..}`` entries."""
    plan = []
    for item in items:
        if isinstance(item, str):
            name, params = item, {}
        elif isinstance(item, dict):
            params = dict(item)
            name = params.pop("name", None)
        else:
            raise ValueError(f"cannot read transformation {item!r}")
        if name not in TF_NAMES:
            raise ValueError(f"unknown transformation {name!r}; choose from {sorted(TF_NAMES)}")
        try:
            plan.append(TF_NAMES[name](**params))
        except TypeError as exc:
            raise ValueError(f"bad parameters for {name!r}: {params}") from exc
    return tuple(plan)


def plan_names(plan: Sequence[Transform]) -> list:
    inverse = {cls: name for name, cls in TF_NAMES.items()}
    out = []
    for tf in plan:
        name = inverse[type(tf)]
        if isinstance(tf, (Translate, CircularShift)) and (tf.dx is not None or tf.dy is not None):
            out.append({"name": name, "dx": tf.dx, "dy": tf.dy})
        else:
            out.append(name)
    return out


def translate(patch: np.ndarray, dx: int, dy: int) -> np.ndarray:
    h, w = patch.shape[-2:]
    out = np.zeros_like(patch)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src_y = slice(max(-dy, 0), h - max(dy, 0))
    src_x = slice(max(-dx, 0), w - max(dx, 0))
    dst_y = slice(max(dy, 0), h - max(-dy, 0))
    dst_x = slice(max(dx, 0), w - max(-dx, 0))
    out[..., dst_y, dst_x] = patch[..., src_y, src_x]
    return out


def fit_zca(patches: np.ndarray, eps: float = DEFAULT_ZCA_EPS) -> ZCAStatistics:
    """Mean and whitening matrix U diag(1/sqrt(lambda + eps)) U^T of flattened patches.

    The covariance is the population covariance (divides by the sample count).
    """
    x = np.asarray(patches, dtype=np.float64)
    x = x.reshape(len(x), -1)
    if len(x) < 2:
        raise ValueError(f"ZCA needs at least 2 patches, got {len(x)}")
    if eps <= 0:
        raise ValueError("ZCA eps must be positive")
    mean = x.mean(axis=0)
    centred = x - mean
    cov = centred.T @ centred / len(x)
    lam, u = np.linalg.eigh(cov)
    lam = np.clip(lam, 0.0, None)
    w = (u / np.sqrt(lam + eps)) @ u.T
    return ZCAStatistics(mean, (w + w.T) / 2.0, eps)


def zca_transform(patches: np.ndarray, stats: ZCAStatistics) -> np.ndarray:
    """Whitened patches before renormalization; accepts one patch or a stack."""
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] * x.shape[-1] != stats.dim:
        raise ValueError(f"ZCA statistics of dimension {stats.dim} do not fit patches of shape {x.shape}")
    flat = x.reshape(-1, stats.dim)
    return ((flat - stats.mean) @ stats.matrix).reshape(x.shape)


def minmax(patches: np.ndarray) -> np.ndarray:
    """Rescale each patch to [0, 1]; constant patches become all zeros."""
    lo = patches.min(axis=(-2, -1), keepdims=True)
    span = patches.max(axis=(-2, -1), keepdims=True) - lo
    return np.where(span > 0, (patches - lo) / np.where(span > 0, span, 1.0), 0.0)


def apply_tf(patch: np.ndarray, tf: Transform, stats: ZCAStatistics | None = None) -> np.ndarray:
    """Apply one transformation to a P×P patch (or any stack of them)."""
    patch = np.asarray(patch, dtype=np.float64)
    if isinstance(tf, Rotate90):
        return np.rot90(patch, 1, axes=(-2, -1)).copy()
    if isinstance(tf, Rotate180):
        return np.rot90(patch, 2, axes=(-2, -1)).copy()
    if isinstance(tf, (Translate, CircularShift)):
        if tf.dx is None or tf.dy is None:
            raise ValueError(f"{type(tf).__name__} needs explicit offsets here")
        if isinstance(tf, Translate):
            return translate(patch, tf.dx, tf.dy)
        return np.roll(patch, (tf.dy, tf.dx), axis=(-2, -1))
    if isinstance(tf, ZCAWhiten):
        if stats is None:
            raise ValueError("ZCA whitening requires fitted statistics")
        return minmax(zca_transform(patch, stats))
    raise TypeError(f"not a transformation: {tf!r}")


def fit_region_zca(samples: np.ndarray, eps: float = DEFAULT_ZCA_EPS) -> list[ZCAStatistics]:
    """One ZCA fit per patch position of an N×7×P×P training array."""
    return [fit_zca(samples[:, r], eps) for r in range(samples.shape[1])]


def expand_dataset(samples: np.ndarray, labels: Sequence[int], plan: Sequence[Transform],
                   seed: int = 0, zca: Sequence[ZCAStatistics] | None = None,
                   zca_eps: float = DEFAULT_ZCA_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Originals followed by one block per transformation, labels carried over.

    ``samples`` is N×R×P×P (R patches per face). Unset translation/shift offsets are
    drawn uniformly from [-P//8, P//8] per sample and axis. ZCA statistics are
    fitted on ``samples`` when not supplied, so pass only training data.
    """
    plan = tuple(plan)
    if not plan:
        raise ValueError("augmentation plan is empty")
    x = np.asarray(samples, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 4 or len(x) != len(y):
        raise ValueError(f"expected N×R×P×P samples with N labels, got {x.shape} and {y.shape}")
    rng = np.random.default_rng(seed)
    p = x.shape[-1]
    reach = p // 8
    if any(isinstance(tf, ZCAWhiten) for tf in plan) and zca is None:
        zca = fit_region_zca(x, zca_eps)
    blocks = [x.copy()]
    for tf in plan:
        if isinstance(tf, (Translate, CircularShift)):
            offsets = rng.integers(-reach, reach + 1, size=(len(x), 2))
            out = np.empty_like(x)
            for n, (dx, dy) in enumerate(offsets):
                dx = tf.dx if tf.dx is not None else int(dx)
                dy = tf.dy if tf.dy is not None else int(dy)
                out[n] = apply_tf(x[n], type(tf)(dx, dy))
        elif isinstance(tf, ZCAWhiten):
            out = np.stack([apply_tf(x[:, r], tf, zca[r]) for r in range(x.shape[1])], axis=1)
        else:
            out = apply_tf(x, tf)
        blocks.append(out)
    return np.concatenate(blocks), np.tile(y, len(plan) + 1)

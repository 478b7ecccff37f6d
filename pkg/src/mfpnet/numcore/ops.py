"""Differentiable operations.

Every op takes Tensors (or array-likes), returns a new Tensor and, when a tape
is active and an input requires gradients, records a closure that maps the
output gradient to input gradients. Image tensors are ``C×H×W`` or batched
``N×C×H×W``; both layouts are accepted wherever a spatial op is defined.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, record

PROB_FLOOR = 1e-12

# Activation-pattern probes: while a list is installed here, piecewise ops append
# their branch selection so finite-difference checks can detect kink crossings.
_PROBES: list[list[np.ndarray]] = []


def _probe(pattern: np.ndarray) -> None:
    if _PROBES:
        _PROBES[-1].append(pattern)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise / reductions -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape),
                             _unbroadcast(g * a.data, b.shape)))


def square(x) -> Tensor:
    x = as_tensor(x)
    return record(x.data ** 2, (x,), lambda g: (2.0 * x.data * g,))


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return record(out, (x,), lambda g: (g / x.data,))


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return record(np.asarray(x.data.sum()), (x,),
                  lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    return record(np.asarray(x.data.mean()), (x,),
                  lambda g: (np.full(x.shape, float(g) / n),))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where the clamp is engaged."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    _probe(inside)
    return record(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def flatten(x) -> Tensor:
    """Flatten everything but the leading batch axis of a 4-D tensor."""
    x = as_tensor(x)
    if x.ndim == 4:
        return reshape(x, (x.shape[0], -1))
    return reshape(x, (-1,))


def concat(xs, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(np.concatenate([x.data for x in xs], axis=axis), xs, bwd)


# --- activations --------------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    _probe(mask)
    return record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)
    _probe(factor > 0.5 * (1.0 + slope))
    return record(x.data * factor, (x,), lambda g: (g * factor,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)
    return record(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record(p, (x,), bwd)


# --- dense / loss ---------------------------------------------------------------

def dense(x, weights, bias) -> Tensor:
    """Affine map ``W x + b`` for ``x`` of shape (N,) or (B, N)."""
    x, w, b = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if w.ndim != 2 or x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(
            f"dense: input {x.shape}, weights {w.shape}, bias {b.shape} are incompatible")
    out = x.data @ w.data.T + b.data

    def bwd(g):
        gx = g @ w.data
        if x.ndim == 1:
            gw = np.outer(g, x.data)
            gb = g
        else:
            gw = g.T @ x.data
            gb = g.sum(axis=0)
        return gx, gw, gb

    return record(out, (x, w, b), bwd)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate); identity at inference."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"dropout rate must be in [0, 1], got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rate == 1.0:
        mask = np.zeros(x.shape)
    else:
        if rng is None:
            raise ValueError("training-mode dropout needs a seeded rng")
        mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return record(x.data * mask, (x,), lambda g: (g * mask,))


def cross_entropy(probabilities, target) -> Tensor:
    """``-log p[target]`` with p clamped below at 1e-12.

    Batched input (B, K) with a sequence of B targets yields the batch mean.
    """
    p = as_tensor(probabilities)
    k = p.shape[-1]
    targets = np.atleast_1d(np.asarray(target))
    if targets.dtype.kind not in "iu":
        raise ValueError(f"class targets must be integers, got {targets.dtype}")
    if np.any(targets < 0) or np.any(targets >= k):
        raise ValueError(f"target class out of range [0, {k}): {targets.tolist()}")
    probs = p.data.reshape(-1, k)
    if probs.shape[0] != targets.size:
        raise ShapeError(f"{probs.shape[0]} probability rows for {targets.size} targets")
    rows = np.arange(targets.size)
    picked = probs[rows, targets]
    clamped = np.maximum(picked, PROB_FLOOR)
    loss = -np.log(clamped).mean()

    def bwd(g):
        gp = np.zeros_like(probs)
        live = picked >= PROB_FLOOR
        gp[rows, targets] = np.where(live, -1.0 / clamped, 0.0) * float(g) / targets.size
        return (gp.reshape(p.shape),)

    return record(np.asarray(loss), (p,), bwd)


def mse(a, b) -> Tensor:
    """Mean squared difference over all elements."""
    d = sub(a, b)
    return mean(square(d))


# --- convolution and pooling --------------------------------------------------

def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected C×H×W or N×C×H×W, got shape {x.shape}")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """N×C×H×W -> N×(C·k·k)×(Ho·Wo) patch matrix (channel-major, then kernel row/col)."""
    xp = _pad(x, pad)
    n, c, h, w = xp.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    cols = np.empty((n, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int,
                  cols: np.ndarray | None = None) -> np.ndarray:
    # x: N×C×H×W, w: O×C×k×k -> N×O×Ho×Wo
    k = w.shape[-1]
    ho = (x.shape[2] + 2 * pad - k) // stride + 1
    wo = (x.shape[3] + 2 * pad - k) // stride + 1
    if cols is None:
        cols = _im2col(x, k, stride, pad)
    out = np.matmul(w.reshape(w.shape[0], -1), cols)  # N×O×(Ho·Wo)
    return out.reshape(x.shape[0], w.shape[0], ho, wo)


def _conv_grad_input(g: np.ndarray, w: np.ndarray, x_shape, stride: int, pad: int) -> np.ndarray:
    # col2im: gradient columns W^T g, scattered back over the k×k offsets
    n, c, h, wd = x_shape
    o, _, k, _ = w.shape
    ho, wo = g.shape[2], g.shape[3]
    gcols = np.matmul(w.reshape(o, -1).T, g.reshape(n, o, ho * wo)).reshape(n, c, k, k, ho, wo)
    gx = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for i in range(k):
        for j in range(k):
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return gx


def _conv_grad_weight(g: np.ndarray, x: np.ndarray, k: int, stride: int, pad: int,
                      cols: np.ndarray | None = None) -> np.ndarray:
    n, o, ho, wo = g.shape
    if cols is None:
        cols = _im2col(x, k, stride, pad)
    full_ho = (x.shape[2] + 2 * pad - k) // stride + 1
    full_wo = (x.shape[3] + 2 * pad - k) // stride + 1
    if (ho, wo) != (full_ho, full_wo):
        cols = cols.reshape(n, -1, full_ho, full_wo)[:, :, :ho, :wo].reshape(n, -1, ho * wo)
    gw = np.matmul(g.reshape(n, o, ho * wo), cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(o, x.shape[1], k, k)


def conv2d(x, kernels, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with square ``kernels`` (O×C×k×k) plus bias."""
    x, w, b = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    xd, squeeze = _batched(x.data)
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"kernels must be O×C×k×k, got {w.shape}")
    if xd.shape[1] != w.shape[1]:
        raise ShapeError(
            f"input shape {x.shape} has {xd.shape[1]} channels but kernels {w.shape} expect {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match kernels {w.shape}")
    k = w.shape[-1]
    if xd.shape[2] + 2 * padding < k or xd.shape[3] + 2 * padding < k:
        raise ShapeError(f"input shape {x.shape} is smaller than the {k}×{k} kernel")
    cols = _im2col(xd, k, stride, padding)
    out = _conv_forward(xd, w.data, stride, padding, cols) + b.data[None, :, None, None]

    def bwd(g):
        g4 = g[None] if squeeze else g
        gx = None
        if x.requires_grad:
            gx = _conv_grad_input(g4, w.data, xd.shape, stride, padding)
            gx = gx[0] if squeeze else gx
        gw = _conv_grad_weight(g4, xd, k, stride, padding, cols)
        gb = g4.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return record(out[0] if squeeze else out, (x, w, b), bwd)


def conv2d_valid(x, kernels, bias) -> Tensor:
    """Stride-1 unpadded 5×5 convolution; output is (H−4)×(W−4)."""
    w = as_tensor(kernels)
    if w.ndim != 4 or w.shape[2:] != (5, 5):
        raise ShapeError(f"conv2d_valid expects O×C×5×5 kernels, got {w.shape}")
    return conv2d(x, w, bias, stride=1, padding=0)


def conv_transpose2d(x, kernels, bias, stride: int = 2, padding: int = 1,
                     output_size: tuple[int, int] | None = None) -> Tensor:
    """Adjoint of :func:`conv2d`; kernels are laid out C_in×C_out×k×k.

    ``output_size`` picks among the spatial sizes that map back to ``x`` under
    the forward convolution; default is the smallest.
    """
    x, w, b = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    xd, squeeze = _batched(x.data)
    if w.ndim != 4 or xd.shape[1] != w.shape[0]:
        raise ShapeError(f"input shape {x.shape} incompatible with kernels {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"bias shape {b.shape} does not match kernels {w.shape}")
    k = w.shape[-1]
    h, wd = xd.shape[2], xd.shape[3]
    if output_size is None:
        output_size = ((h - 1) * stride - 2 * padding + k, (wd - 1) * stride - 2 * padding + k)
    oh, ow = output_size
    if (oh + 2 * padding - k) // stride + 1 != h or (ow + 2 * padding - k) // stride + 1 != wd:
        raise ShapeError(f"output size {output_size} is not reachable from input {x.shape}")
    out_shape = (xd.shape[0], w.shape[1], oh, ow)
    out = _conv_grad_input(xd, w.data, out_shape, stride, padding) + b.data[None, :, None, None]

    def bwd(g):
        g4 = g[None] if squeeze else g
        gx = _conv_forward(g4, w.data, stride, padding)[:, :, :h, :wd]
        gw = _conv_grad_weight(xd, g4, k, stride, padding)
        gb = g4.sum(axis=(0, 2, 3))
        return (gx[0] if squeeze else gx), gw, gb

    return record(out[0] if squeeze else out, (x, w, b), bwd)


def maxpool2x2(x) -> Tensor:
    """Non-overlapping 2×2 max pooling; a trailing odd row/column is dropped."""
    x = as_tensor(x)
    xd, squeeze = _batched(x.data)
    n, c, h, w = xd.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2x2 needs spatial dims >= 2, got shape {x.shape}")
    h2, w2 = h // 2, w // 2
    blocks = xd[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = blocks.argmax(axis=-1)
    _probe(idx)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        g4 = g[None] if squeeze else g
        gb = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(gb, idx[..., None], g4[..., None], axis=-1)
        gb = gb.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        gx = np.zeros((n, c, h, w))
        gx[:, :, :2 * h2, :2 * w2] = gb
        return (gx[0] if squeeze else gx,)

    return record(out[0] if squeeze else out, (x,), bwd)

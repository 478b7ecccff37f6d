"""Central finite-difference gradient checking.

The numeric side only ever calls the forward function; it shares nothing with
the tape's backward closures.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Parameter, Tape, Tensor, backward


class KinkCrossing(RuntimeError):
    """A finite-difference probe moved a ReLU/max-pool/clamp across a kink."""


@contextmanager
def _capture():
    buf: list[np.ndarray] = []
    ops._PROBES.append(buf)
    try:
        yield buf
    finally:
        ops._PROBES.remove(buf)


def _signature(patterns: list[np.ndarray]) -> tuple:
    return tuple(p.tobytes() for p in patterns)


def _evaluate(fn: Callable[[], Tensor]) -> tuple[float, tuple]:
    with _capture() as buf:
        value = float(fn().data.reshape(-1)[0])
    return value, _signature(buf)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|a|, max|n|), with a 1e-10 floor on the scale."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-10)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Parameter], *,
                    step: float = 1e-5, max_entries: int | None = None,
                    rng: np.random.Generator | None = None) -> dict[str, float]:
    """Compare tape gradients with central differences for every parameter.

    ``loss_fn`` must be a pure function of the parameters' current values. With
    ``max_entries`` set, at most that many entries per parameter are probed
    (chosen by ``rng``). Raises KinkCrossing if a probe at distance ``step``
    changes any activation pattern, which also covers every point closer than
    ``step`` to a kink; callers resample the point in that case.

    Returns the relative error per parameter name.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    backward(tape, loss)
    _, base_sig = _evaluate(loss_fn)

    rng = rng or np.random.default_rng(0)
    errors: dict[str, float] = {}
    for p in params:
        flat = p.data.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        analytic = p.grad.reshape(-1)[idx]
        numeric = np.empty(idx.size)
        for n, i in enumerate(idx):
            orig = flat[i]
            values = {}
            for delta in (step, -step):
                data = p.data.copy()
                data.reshape(-1)[i] = orig + delta
                saved, p.data = p.data, data
                try:
                    values[delta], sig = _evaluate(loss_fn)
                finally:
                    p.data = saved
                if sig != base_sig:
                    raise KinkCrossing(f"{p.name}[{i}] crosses a kink within {abs(delta):g}")
            numeric[n] = (values[step] - values[-step]) / (2.0 * step)
        errors[p.name] = relative_error(analytic, numeric)
    return errors

"""Per-frame labels for onset-to-peak expression sequences."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import groupby
from typing import Iterable, Union

from .manifest import NEUTRAL, SampleRecord


@dataclass(frozen=True)
class PrefixPolicy:
    """First ``neutral_prefix`` frames neutral, last ``expression_suffix`` frames
    carry the sequence label, frames in between are dropped."""

    neutral_prefix: int = 7
    expression_suffix: int = 3


@dataclass(frozen=True)
class FromFramePolicy:
    """Frames before ``first_expression_frame`` are neutral, the rest carry the label."""

    first_expression_frame: int = 3


LabelPolicy = Union[PrefixPolicy, FromFramePolicy]


def label_sequence_frames(records: Iterable[SampleRecord], policy: LabelPolicy,
                          neutral: str = NEUTRAL) -> list[SampleRecord]:
    """Resolve frame labels for the frames of one sequence."""
    recs = sorted(records, key=lambda r: r.frame)
    if not recs:
        return []
    seq = recs[0].sequence
    if isinstance(policy, PrefixPolicy):
        n, s = policy.neutral_prefix, policy.expression_suffix
        if len(recs) < n + s:
            raise ValueError(f"sequence {seq!r} has {len(recs)} frames, prefix policy needs {n + s}")
        head = [r.with_label(neutral) for r in recs[:n]]
        tail = [r.with_label(r.label) for r in recs[len(recs) - s:]]
        return head + tail
    f = policy.first_expression_frame
    return [r.with_label(neutral if k < f else r.label) for k, r in enumerate(recs)]


def label_manifest_samples(samples: list[SampleRecord], policy: LabelPolicy | None,
                           neutral: str = NEUTRAL) -> list[SampleRecord]:
    """Apply ``policy`` to every sequence lacking frame labels; labelled sequences pass through."""
    if policy is None:
        return list(samples)
    out: list[SampleRecord] = []
    keyed = sorted(samples, key=lambda r: (r.subject, r.sequence, r.frame))
    for _, grp in groupby(keyed, key=lambda r: (r.subject, r.sequence)):
        grp = list(grp)
        if all(r.frame_label is not None for r in grp):
            out.extend(grp)
        else:
            out.extend(label_sequence_frames(grp, policy, neutral))
    return out

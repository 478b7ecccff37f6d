"""JSON dataset manifests.

Schema::

    {"classes": ["neutral", ...],
     "samples": [{"image": "...", "landmarks": "...", "subject": "S005",
                  "sequence": "001", "frame": 0, "label": "happy",
                  "frame_label": "neutral" | null, "provenance": "real"}]}

Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

DEFAULT_CLASSES = ("neutral", "anger", "contempt", "disgust", "fear", "happy", "sadness", "surprise")
NEUTRAL = "neutral"


class ManifestError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class SampleRecord:
    image: str
    landmarks: str
    subject: str
    sequence: str
    frame: int
    label: str
    frame_label: Optional[str] = None
    provenance: str = "real"

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.subject, self.sequence, self.frame)

    @property
    def resolved_label(self) -> str:
        return self.frame_label if self.frame_label is not None else self.label

    def with_label(self, frame_label: str) -> "SampleRecord":
        return replace(self, frame_label=frame_label)


@dataclass
class Manifest:
    classes: tuple[str, ...]
    samples: list[SampleRecord] = field(default_factory=list)
    root: Path = Path(".")

    def class_index(self, name: str) -> int:
        return self.classes.index(name)

    def subjects(self) -> list[str]:
        return sorted({s.subject for s in self.samples})

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def to_json(self) -> dict:
        return {"classes": list(self.classes), "samples": [asdict(s) for s in self.samples]}


def save_manifest(path, manifest: Manifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=1) + "\n")


_REQUIRED = ("image", "landmarks", "subject", "sequence", "frame", "label")


def parse_manifest(data: dict, root: Path = Path("."), check_files: bool = True) -> Manifest:
    problems: list[str] = []
    if not isinstance(data, dict) or "classes" not in data or "samples" not in data:
        raise ManifestError(["manifest must be an object with 'classes' and 'samples'"])
    classes = tuple(str(c) for c in data["classes"])
    if len(set(classes)) != len(classes) or not classes:
        problems.append(f"class list must be non-empty and unique: {list(classes)}")
    allowed = set(classes)
    seen: set[tuple] = set()
    samples = []
    for n, raw in enumerate(data["samples"]):
        missing = [k for k in _REQUIRED if k not in raw]
        if missing:
            problems.append(f"sample {n}: missing fields {missing}")
            continue
        rec = SampleRecord(
            image=str(raw["image"]), landmarks=str(raw["landmarks"]), subject=str(raw["subject"]),
            sequence=str(raw["sequence"]), frame=int(raw["frame"]), label=str(raw["label"]),
            frame_label=raw.get("frame_label"), provenance=str(raw.get("provenance", "real")))
        if rec.key in seen:
            problems.append(f"duplicate (subject, sequence, frame) key {rec.key}")
        seen.add(rec.key)
        for lab in (rec.label, rec.frame_label):
            if lab is not None and lab not in allowed:
                problems.append(f"sample {n}: unknown label {lab!r}; allowed labels: {sorted(allowed)}")
        if check_files:
            for attr in ("image", "landmarks"):
                p = Path(getattr(rec, attr))
                p = p if p.is_absolute() else root / p
                if not p.is_file():
                    problems.append(f"sample {n}: missing {attr} file {p}")
        samples.append(rec)
    if problems:
        raise ManifestError(problems)
    return Manifest(classes, samples, root)


def load_manifest(path, check_files: bool = True) -> Manifest:
    """Parse and validate a manifest; all problems are reported in one ManifestError."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError([f"manifest not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ManifestError([f"{path}: invalid JSON ({exc})"]) from None
    return parse_manifest(data, path.parent, check_files)

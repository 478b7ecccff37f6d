"""Procedural faces for desk-scale runs.

Each class deforms a 68-point template deterministically and assigns every
facial region its own stroke intensity; subjects add a random similarity
transform, per-point jitter and skin tone; each image adds pixel and landmark
noise. With low noise the classes are separable by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..facegeom import REGIONS, LandmarkSet, write_image, write_pts
from .manifest import DEFAULT_CLASSES, Manifest, SampleRecord, save_manifest

REGION_NAMES = tuple(REGIONS)


def template_landmarks() -> np.ndarray:
    """Neutral 68-point face on a 64×64 canvas, eyes level at y=26."""
    pts = np.zeros((68, 2))
    t = np.linspace(0.0, math.pi, 17)
    pts[0:17] = np.stack([32 - 22 * np.cos(t), 26 + 32 * np.sin(t)], axis=1)
    bx = np.linspace(0, 1, 5)
    arch = 2.0 * np.sin(bx * math.pi)
    pts[17:22] = np.stack([14 + 14 * bx, 19 - arch], axis=1)
    pts[22:27] = np.stack([36 + 14 * bx, 19 - arch[::-1]], axis=1)
    pts[27:31] = np.stack([np.full(4, 32.0), np.linspace(25, 36, 4)], axis=1)
    pts[31:36] = np.stack([np.linspace(27, 37, 5), 39 - np.array([0, 1, 1.5, 1, 0])], axis=1)
    e = np.linspace(0, 2 * math.pi, 7)[:-1]
    pts[36:42] = np.stack([21 - 5 * np.cos(e), 26 - 2 * np.sin(e)], axis=1)
    pts[42:48] = np.stack([43 - 5 * np.cos(e), 26 - 2 * np.sin(e)], axis=1)
    m = np.linspace(0, 2 * math.pi, 13)[:-1]
    pts[48:60] = np.stack([32 - 9 * np.cos(m), 48 - 3 * np.sin(m)], axis=1)
    mi = np.linspace(0, 2 * math.pi, 9)[:-1]
    pts[60:68] = np.stack([32 - 5 * np.cos(mi), 48 - 1.5 * np.sin(mi)], axis=1)
    return pts


@dataclass(frozen=True)
class SynthSpec:
    subjects: int = 16
    classes: int = 8
    per: int = 4
    noise: float = 0.02
    canvas: int = 80
    style_seed: int = 0
    shift: float = 0.0  # domain shift in [0, 1]: blend toward style_seed's appearance


def class_names(k: int) -> tuple[str, ...]:
    if k == len(DEFAULT_CLASSES):
        return DEFAULT_CLASSES
    return ("neutral",) + tuple(f"expr{i}" for i in range(1, k))


def _appearance_table(k: int, seed: int) -> np.ndarray:
    """Per class and region: stroke darkness (column 0) and regional shading (column 1)."""
    rng = np.random.default_rng(10_007 + seed)
    amp = np.stack([rng.uniform(0.15, 0.75, size=(k, len(REGION_NAMES))),
                    rng.uniform(-0.25, 0.25, size=(k, len(REGION_NAMES)))], axis=-1)
    amp[0, :, 0] = 0.4
    amp[0, :, 1] = 0.0
    return amp


def _class_geometry(c: int) -> np.ndarray:
    """Per-landmark displacement (68×2) for class index ``c``; zero for neutral."""
    if c == 0:
        return np.zeros((68, 2))
    rng = np.random.default_rng(20_011 + c)
    disp = np.zeros((68, 2))
    base = template_landmarks()
    for name, idx in REGIONS.items():
        sl = slice(idx.start, idx.stop)
        centre = base[sl].mean(axis=0)
        scale = rng.uniform(0.8, 1.25, size=2)
        shift = rng.uniform(-2.0, 2.0, size=2)
        disp[sl] = (base[sl] - centre) * (scale - 1.0) + shift
        disp[sl] += rng.uniform(-1.5, 1.5, size=(idx.stop - idx.start, 2))
    return disp


def _polylines(pts: np.ndarray) -> list[np.ndarray]:
    closed = {"right_eye", "left_eye"}
    lines = []
    for name, idx in REGIONS.items():
        seg = pts[idx.start:idx.stop]
        if name == "mouth":
            lines += [np.vstack([seg[:12], seg[:1]]), np.vstack([seg[12:], seg[12:13]])]
        elif name in closed:
            lines.append(np.vstack([seg, seg[:1]]))
        elif name == "nose":
            lines += [seg[:4], seg[4:]]
        else:
            lines.append(seg)
    return lines


_LINE_REGION = ["jaw", "right_eyebrow", "left_eyebrow", "nose", "nose", "right_eye", "left_eye",
                "mouth", "mouth"]


def render_face(pts: np.ndarray, amplitudes: dict[str, float], skin: float, size: int,
                gradient: float = 0.0, shading: dict[str, float] | None = None) -> np.ndarray:
    """Gaussian-stroke rendering of the landmark polylines on an elliptic face.

    ``shading`` adds a soft elliptic tone over each region's landmark box.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    centre = pts[27:36].mean(axis=0)
    face = ((xx - centre[0]) / 26.0) ** 2 + ((yy - centre[1] + 4) / 34.0) ** 2 <= 1.0
    img = np.where(face, skin, 0.12) + gradient * (xx / size - 0.5)
    for region, tone in (shading or {}).items():
        if region == "jaw":
            continue
        seg = pts[REGIONS[region].start:REGIONS[region].stop]
        c = seg.mean(axis=0)
        half = np.maximum((seg.max(axis=0) - seg.min(axis=0)) / 2.0 + 2.0, 2.0)
        img = img + tone * np.exp(-0.5 * (((xx - c[0]) / half[0]) ** 2 + ((yy - c[1]) / half[1]) ** 2))
    ink = np.zeros_like(img)
    for line, region in zip(_polylines(pts), _LINE_REGION):
        samples = []
        for a, b in zip(line[:-1], line[1:]):
            n = max(2, int(np.ceil(np.hypot(*(b - a)) / 0.7)))
            samples.append(a + (b - a) * np.linspace(0, 1, n, endpoint=False)[:, None])
        samples.append(line[-1:])
        s = np.vstack(samples)
        for x, y in s:
            x0, x1 = max(int(x) - 4, 0), min(int(x) + 5, size)
            y0, y1 = max(int(y) - 4, 0), min(int(y) + 5, size)
            if x0 >= x1 or y0 >= y1:
                continue
            g = np.exp(-((xx[y0:y1, x0:x1] - x) ** 2 + (yy[y0:y1, x0:x1] - y) ** 2) / (2 * 1.1 ** 2))
            ink[y0:y1, x0:x1] = np.maximum(ink[y0:y1, x0:x1], amplitudes[region] * g)
    return np.clip(img - ink, 0.0, 1.0)


def generate_arrays(spec: SynthSpec, seed: int):
    """Yield ``(subject, class_index, frame, image, landmarks)`` in a fixed order."""
    names = class_names(spec.classes)
    amp0 = _appearance_table(spec.classes, 0)
    amp = (1.0 - spec.shift) * amp0 + spec.shift * _appearance_table(spec.classes, spec.style_seed)
    geometry = [_class_geometry(c) for c in range(len(names))]
    rng = np.random.default_rng(seed)
    base = template_landmarks() + (spec.canvas - 64) / 2.0
    for s in range(spec.subjects):
        angle = rng.uniform(-0.1, 0.1)
        scale = rng.uniform(0.92, 1.08)
        offset = rng.uniform(-3, 3, size=2)
        identity = rng.normal(scale=0.7, size=(68, 2))
        skin = 0.62 + rng.uniform(-0.08, 0.08)
        gain = rng.uniform(0.85, 1.15)
        c_, s_ = math.cos(angle), math.sin(angle)
        rot = np.array([[c_, -s_], [s_, c_]]) * scale
        pivot = np.full(2, spec.canvas / 2.0)
        for c in range(len(names)):
            shape = base + geometry[c] + identity
            shape = (shape - pivot) @ rot.T + pivot + offset
            amps = {r: float(amp[c, i, 0] * gain) for i, r in enumerate(REGION_NAMES)}
            tones = {r: float(amp[c, i, 1] * gain) for i, r in enumerate(REGION_NAMES)}
            for f in range(spec.per):
                lm = shape + rng.normal(scale=5.0 * spec.noise, size=shape.shape) if spec.noise else shape
                img = render_face(lm, amps, skin, spec.canvas, 0.3 * spec.shift, tones)
                if spec.noise:
                    img = np.clip(img + rng.normal(scale=spec.noise, size=img.shape), 0.0, 1.0)
                yield f"S{s:03d}", c, f, img, lm


def synth_dataset(spec: SynthSpec, out_dir, seed: int = 0) -> Path:
    """Write images (PGM), landmarks (.pts) and ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "landmarks").mkdir(parents=True, exist_ok=True)
    names = class_names(spec.classes)
    samples = []
    for subject, c, f, img, lm in generate_arrays(spec, seed):
        stem = f"{subject}_{names[c]}_{f:02d}"
        write_image(out / "images" / f"{stem}.pgm", img)
        write_pts(out / "landmarks" / f"{stem}.pts", LandmarkSet(lm))
        samples.append(SampleRecord(
            image=f"images/{stem}.pgm", landmarks=f"landmarks/{stem}.pts", subject=subject,
            sequence=f"{subject}_{names[c]}", frame=f, label=names[c], frame_label=names[c],
            provenance="synthetic"))
    manifest = Manifest(names, samples, out)
    save_manifest(out / "manifest.json", manifest)
    (out / "synth_spec.json").write_text(
        json.dumps({**asdict(spec), "seed": seed}, indent=1) + "\n")
    return out / "manifest.json"

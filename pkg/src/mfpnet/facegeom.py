"""Eye-based face alignment and seven-region patch extraction.

Landmarks follow the iBUG 68-point ordering. Images are 2-D float arrays in
[0, 1] indexed ``[row, col]``; a landmark ``(x, y)`` sits at column ``x``, row
``y``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

# iBUG index ranges (inclusive start, exclusive end). "Right" is the subject's
# right, which appears on the left of a frontal image.
REGIONS: dict[str, range] = {
    "jaw": range(0, 17),
    "right_eyebrow": range(17, 22),
    "left_eyebrow": range(22, 27),
    "nose": range(27, 36),
    "right_eye": range(36, 42),
    "left_eye": range(42, 48),
    "mouth": range(48, 68),
}

PATCH_ORDER = ("left_eye", "right_eye", "left_eyebrow", "right_eyebrow", "nose", "mouth", "jaw")

DEFAULT_MARGIN = 0.25
DEFAULT_PATCH_SIZE = 36


class GeometryError(ValueError):
    """Landmark geometry that cannot be aligned (e.g. coincident eyes)."""


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray  # 68×2, columns (x, y)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (68, 2):
            raise ValueError(f"expected 68 (x, y) landmarks, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def region(self, name: str) -> np.ndarray:
        return self.points[REGIONS[name].start:REGIONS[name].stop]

    def eye_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Centroids of the (right, left) eye landmark groups."""
        return self.region("right_eye").mean(axis=0), self.region("left_eye").mean(axis=0)

    def translated(self, dx: float, dy: float) -> "LandmarkSet":
        return LandmarkSet(self.points + np.array([dx, dy]))


def check_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 1:
        raise ValueError(f"face image must be a non-empty 2-D array, got shape {img.shape}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValueError("face image intensities must lie in [0, 1]")
    return img


@dataclass(frozen=True)
class AlignmentTransform:
    """Similarity map ``p' = scale * R(rotation) p + (dx, dy)``."""

    rotation: float
    scale: float
    dx: float
    dy: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix().T + np.array([self.dx, self.dy])

    def invert(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64) - np.array([self.dx, self.dy])
        return pts @ np.linalg.inv(self.matrix()).T


@dataclass(frozen=True)
class AlignSpec:
    """Target geometry: eye centres at ``(W/2 ∓ D/2, eye_height)`` in an H×W output."""

    eye_distance: float = 24.0
    eye_height: float = 26.0
    size: tuple[int, int] = (64, 64)


def alignment_transform(landmarks: LandmarkSet, spec: AlignSpec) -> AlignmentTransform:
    right, left = landmarks.eye_centers()
    vec = left - right
    dist = float(np.hypot(*vec))
    if dist < 1e-9:
        raise GeometryError("eye centres coincide; alignment is undefined")
    rotation = -math.atan2(vec[1], vec[0])
    scale = spec.eye_distance / dist
    mid = (left + right) / 2.0
    partial = AlignmentTransform(rotation, scale, 0.0, 0.0)
    target = np.array([spec.size[1] / 2.0, spec.eye_height])
    shift = target - partial.apply(mid[None])[0]
    return AlignmentTransform(rotation, scale, float(shift[0]), float(shift[1]))


def sample_bilinear(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear samples at (x, y) positions; zero outside the image."""
    coords = np.stack([np.asarray(ys, dtype=np.float64), np.asarray(xs, dtype=np.float64)])
    return ndimage.map_coordinates(image, coords, order=1, mode="grid-constant", cval=0.0)


def align_face(image: np.ndarray, landmarks: LandmarkSet, spec: AlignSpec = AlignSpec()):
    """Rotate, scale and translate so the eyes sit level at the target positions.

    Returns ``(aligned_image, aligned_landmarks, transform)``.
    """
    img = check_image(image)
    tf = alignment_transform(landmarks, spec)
    h, w = spec.size
    rows, cols = np.mgrid[0:h, 0:w]
    grid = np.stack([cols.ravel(), rows.ravel()], axis=1).astype(np.float64)
    src = tf.invert(grid)
    out = sample_bilinear(img, src[:, 0], src[:, 1]).reshape(h, w)
    return np.clip(out, 0.0, 1.0), LandmarkSet(tf.apply(landmarks.points)), tf


@dataclass(frozen=True)
class PatchSet:
    """Seven P×P patches in PATCH_ORDER."""

    patches: np.ndarray  # 7×P×P

    def __post_init__(self):
        arr = np.asarray(self.patches, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != 7 or arr.shape[1] != arr.shape[2]:
            raise ValueError(f"a PatchSet is 7×P×P, got shape {arr.shape}")
        object.__setattr__(self, "patches", arr)

    @property
    def size(self) -> int:
        return self.patches.shape[1]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.patches[PATCH_ORDER.index(name)]

    def save(self, path) -> None:
        np.savez(path, patches=self.patches, order=np.array(PATCH_ORDER))

    @classmethod
    def load(cls, path) -> "PatchSet":
        with np.load(path) as data:
            if tuple(data["order"].tolist()) != PATCH_ORDER:
                raise ValueError(f"{path}: unexpected patch order {data['order'].tolist()}")
            return cls(data["patches"])


def region_box(points: np.ndarray, margin: float) -> tuple[float, float, float, float]:
    x0, y0 = points.min(axis=0)
    x1, y1 = points.max(axis=0)
    mx, my = margin * (x1 - x0), margin * (y1 - y0)
    return x0 - mx, y0 - my, x1 + mx, y1 + my


def extract_patches(aligned: np.ndarray, landmarks: LandmarkSet,
                    patch_size: int = DEFAULT_PATCH_SIZE,
                    margin: float = DEFAULT_MARGIN) -> PatchSet:
    """Crop each region's margin-expanded landmark box and resample it to P×P.

    The P sample positions span the box edges inclusively, so with margin 0 a
    landmark group covering exactly P×P integer pixels reproduces the raw crop.
    """
    img = check_image(aligned)
    out = np.empty((7, patch_size, patch_size))
    for k, name in enumerate(PATCH_ORDER):
        x0, y0, x1, y1 = region_box(landmarks.region(name), margin)
        xs = np.linspace(x0, x1, patch_size)
        ys = np.linspace(y0, y1, patch_size)
        gx, gy = np.meshgrid(xs, ys)
        out[k] = sample_bilinear(img, gx.ravel(), gy.ravel()).reshape(patch_size, patch_size)
    return PatchSet(np.clip(out, 0.0, 1.0))


def patches_for(image: np.ndarray, landmarks: LandmarkSet, spec: AlignSpec = AlignSpec(),
                patch_size: int = DEFAULT_PATCH_SIZE, margin: float = DEFAULT_MARGIN) -> PatchSet:
    aligned, lms, _ = align_face(image, landmarks, spec)
    return extract_patches(aligned, lms, patch_size, margin)


# --- file formats -------------------------------------------------------------

def read_pts(path) -> LandmarkSet:
    """iBUG ``.pts``: header lines, then 68 ``x y`` lines between ``{`` and ``}``."""
    lines = Path(path).read_text().splitlines()
    try:
        start = next(i for i, ln in enumerate(lines) if ln.strip() == "{")
        end = next(i for i, ln in enumerate(lines) if ln.strip() == "}")
    except StopIteration:
        raise ValueError(f"{path}: missing '{{' / '}}' delimiters") from None
    pts = [tuple(float(v) for v in ln.split()) for ln in lines[start + 1:end] if ln.strip()]
    return LandmarkSet(np.array(pts))


def write_pts(path, landmarks: LandmarkSet) -> None:
    body = "\n".join(f"{x:.6f} {y:.6f}" for x, y in landmarks.points)
    Path(path).write_text(f"version: 1\nn_points: 68\n{{\n{body}\n}}\n")


def read_landmark_csv(path) -> LandmarkSet:
    """One row of 136 numbers ``x0, y0, x1, y1, ...``; a non-numeric header row is skipped."""
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            try:
                values = [float(v) for v in row]
            except ValueError:
                continue
            if len(values) != 136:
                raise ValueError(f"{path}: expected 136 columns, got {len(values)}")
            return LandmarkSet(np.array(values).reshape(68, 2))
    raise ValueError(f"{path}: no numeric landmark row")


def read_landmarks(path) -> LandmarkSet:
    return read_landmark_csv(path) if str(path).lower().endswith(".csv") else read_pts(path)


def read_image(path) -> np.ndarray:
    """8-bit grayscale PGM/PNG (colour is converted to luminance) scaled to [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def write_image(path, image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)

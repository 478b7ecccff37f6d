import math

import numpy as np
import pytest

from mfpnet import facegeom as fg
from mfpnet.dataeval.synth import template_landmarks


def with_eyes(right, left, base=None):
    pts = template_landmarks() if base is None else base.copy()
    pts[36:42] = np.asarray(right) + (pts[36:42] - pts[36:42].mean(axis=0))
    pts[42:48] = np.asarray(left) + (pts[42:48] - pts[42:48].mean(axis=0))
    return fg.LandmarkSet(pts)


def test_landmark_set_validation():
    with pytest.raises(ValueError):
        fg.LandmarkSet(np.zeros((67, 2)))
    bad = np.zeros((68, 2))
    bad[3, 1] = np.nan
    with pytest.raises(ValueError):
        fg.LandmarkSet(bad)


def test_already_aligned_eyes():
    lm = with_eyes((30, 40), (70, 40))
    tf = fg.alignment_transform(lm, fg.AlignSpec(eye_distance=40, eye_height=40, size=(100, 100)))
    assert abs(tf.rotation) < 1e-12
    assert math.isclose(tf.scale, 1.0)


def test_vertical_eyes_rotate_quarter_turn():
    lm = with_eyes((50, 30), (50, 70))
    tf = fg.alignment_transform(lm, fg.AlignSpec(eye_distance=40))
    assert math.isclose(abs(tf.rotation), math.pi / 2)


def test_scale_is_distance_ratio():
    lm = with_eyes((40, 40), (60, 40))
    tf = fg.alignment_transform(lm, fg.AlignSpec(eye_distance=40))
    assert math.isclose(tf.scale, 2.0)


def test_coincident_eyes_rejected():
    lm = with_eyes((40, 40), (40, 40))
    with pytest.raises(fg.GeometryError):
        fg.align_face(np.zeros((80, 80)), lm)


@pytest.mark.parametrize("angle", [-0.6, -0.1, 0.0, 0.35, 1.2])
def test_aligned_eyes_hit_targets(angle):
    rng = np.random.default_rng(3)
    base = template_landmarks() + 8.0
    c, s = math.cos(angle), math.sin(angle)
    rot = (base - 40) @ np.array([[c, -s], [s, c]]).T * 1.3 + 40
    lm = fg.LandmarkSet(rot)
    spec = fg.AlignSpec(eye_distance=24, eye_height=26, size=(64, 64))
    img = rng.uniform(size=(80, 80))
    aligned, lms, tf = fg.align_face(img, lm, spec)
    assert aligned.shape == (64, 64)
    right, left = lms.eye_centers()
    assert np.allclose(right, [32 - 12, 26], atol=0.5)
    assert np.allclose(left, [32 + 12, 26], atol=0.5)
    # applying the transform to the original eye centres reproduces the targets
    r0, l0 = lm.eye_centers()
    np.testing.assert_allclose(tf.apply(np.stack([r0, l0])), [[20, 26], [44, 26]], atol=0.5)


def test_alignment_resampling_zero_fill():
    lm = fg.LandmarkSet(template_landmarks())
    spec = fg.AlignSpec(eye_distance=6, eye_height=10, size=(64, 64))
    aligned, _, _ = fg.align_face(np.ones((64, 64)), lm, spec)
    # strong shrink leaves a border that falls outside the source
    assert aligned[0, 0] == 0.0 and aligned[-1, -1] == 0.0
    assert aligned[10, 32] == pytest.approx(1.0)


def test_extract_returns_seven_square_patches():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(64, 64))
    ps = fg.extract_patches(img, fg.LandmarkSet(template_landmarks()), patch_size=20)
    assert ps.patches.shape == (7, 20, 20)
    assert np.all((ps.patches >= 0) & (ps.patches <= 1))


def test_group_outside_image_gives_zero_patch():
    pts = template_landmarks()
    pts[48:68] += 500.0
    ps = fg.extract_patches(np.ones((64, 64)), fg.LandmarkSet(pts), patch_size=12)
    assert np.all(ps["mouth"] == 0.0)
    assert np.any(ps["nose"] > 0.0)


def test_zero_margin_exact_span_is_raw_crop():
    P = 9
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(40, 40))
    pts = template_landmarks()
    eye = pts[42:48]
    eye[:] = [[20, 12], [20 + P - 1, 12], [24, 12 + P - 1], [22, 15], [25, 14], [21, 18]]
    ps = fg.extract_patches(img, fg.LandmarkSet(pts), patch_size=P, margin=0.0)
    np.testing.assert_allclose(ps["left_eye"], img[12:12 + P, 20:20 + P], atol=1e-12)


def test_integer_translation_consistency():
    rng = np.random.default_rng(2)
    img = np.zeros((96, 96))
    img[10:86, 10:86] = rng.uniform(size=(76, 76))
    lm = fg.LandmarkSet(template_landmarks() + 14.0)
    a = fg.extract_patches(img, lm, patch_size=16)
    shifted = np.zeros_like(img)
    shifted[3:, 5:] = img[:-3, :-5]
    b = fg.extract_patches(shifted, lm.translated(5, 3), patch_size=16)
    np.testing.assert_allclose(a.patches, b.patches, atol=1e-12)


def test_extract_is_deterministic():
    img = np.random.default_rng(4).uniform(size=(64, 64))
    lm = fg.LandmarkSet(template_landmarks())
    assert np.array_equal(fg.extract_patches(img, lm).patches, fg.extract_patches(img, lm).patches)


def test_patchset_round_trip(tmp_path):
    ps = fg.PatchSet(np.random.default_rng(5).uniform(size=(7, 36, 36)))
    ps.save(tmp_path / "p.npz")
    back = fg.PatchSet.load(tmp_path / "p.npz")
    assert back.patches.tobytes() == ps.patches.tobytes()


def test_patch_order_is_fixed():
    assert fg.PATCH_ORDER == ("left_eye", "right_eye", "left_eyebrow", "right_eyebrow",
                              "nose", "mouth", "jaw")


def test_pts_and_csv_round_trip(tmp_path):
    lm = fg.LandmarkSet(template_landmarks() + 0.25)
    fg.write_pts(tmp_path / "a.pts", lm)
    np.testing.assert_allclose(fg.read_landmarks(tmp_path / "a.pts").points, lm.points, atol=1e-6)
    header = ",".join(f"{a}{i}" for i in range(68) for a in "xy")
    row = ",".join(f"{v:.6f}" for v in lm.points.ravel())
    (tmp_path / "a.csv").write_text(header + "\n" + row + "\n")
    np.testing.assert_allclose(fg.read_landmarks(tmp_path / "a.csv").points, lm.points, atol=1e-6)


def test_image_io(tmp_path):
    img = np.linspace(0, 1, 64 * 48).reshape(48, 64)
    for name in ("x.pgm", "x.png"):
        fg.write_image(tmp_path / name, img)
        back = fg.read_image(tmp_path / name)
        assert back.shape == (48, 64)
        np.testing.assert_allclose(back, img, atol=0.5 / 255 + 1e-12)

import math

import numpy as np
import pytest

from mfpnet import numcore as nc
from mfpnet.cgan import (
    CGAN, CGANConfig, GANBatch, PerceptualDistance, build_cgan, discriminator_loss, generator_loss,
    synthesize_expressions, toy_dataset, train_cgan,
)
from mfpnet.numcore import Tensor

TINY = CGANConfig(base_channels=2, noise_dim=3, num_labels=3, seed=5)


def const_d(value):
    return lambda x, y, labels: Tensor(np.full(len(labels), value))


def _batch(n=4, size=8, k=3, seed=0):
    src, tgt, lab = toy_dataset(n, size, k, seed)
    z = np.random.default_rng(seed).normal(size=(n, 3))
    return GANBatch(src, tgt, z, lab)


def test_half_discriminator_spot_values():
    batch = _batch()
    g = build_cgan(8, TINY).G
    d_value = discriminator_loss(batch, g, const_d(0.5))
    assert abs(float(d_value.data) - 2 * math.log(0.5)) < 1e-9
    losses = generator_loss(batch, g, const_d(0.5), CGANConfig(alpha=0, beta=0, num_labels=3))
    assert abs(float(losses.ad.data) + math.log(0.5)) < 1e-9
    assert float(losses.total.data) == float(losses.ad.data)


def test_discriminator_supremum_limit():
    batch = _batch()
    g = build_cgan(8, TINY).G

    def perfect(x, y, labels):
        is_real = np.array([np.array_equal(np.asarray(y.data if isinstance(y, Tensor) else y)[i], batch.y[i])
                            for i in range(len(labels))])
        return Tensor(np.where(is_real, 1.0, 0.0))

    value = float(discriminator_loss(batch, g, perfect).data)
    assert -1e-6 < value <= 0.0


def test_perfect_generator_has_zero_mse():
    batch = _batch()
    exact = lambda x, labels, z: Tensor(batch.y.copy())  # noqa: E731
    losses = generator_loss(batch, exact, const_d(0.7), TINY, None)
    assert float(losses.mse.data) == 0.0
    assert float(losses.pep.data) == 0.0


def test_losses_match_straight_line_evaluation():
    batch = _batch(seed=2)
    gan = build_cgan(8, TINY)
    pep = PerceptualDistance(8)
    cfg = CGANConfig(alpha=3.0, beta=2.0, num_labels=3)
    losses = generator_loss(batch, gan.G, gan.D, cfg, pep).values()
    with nc.no_tape():
        fake = gan.G(batch.x, batch.labels, batch.z).data
        p_fake = np.clip(gan.D(batch.x, fake, batch.labels).data, 1e-7, 1 - 1e-7)
        p_real = np.clip(gan.D(batch.x, batch.y, batch.labels).data, 1e-7, 1 - 1e-7)
        f_fake, f_real = pep.features(fake).data, pep.features(batch.y).data
    ad = -np.mean(np.log(p_fake))
    mse = np.mean((fake - batch.y) ** 2)
    perceptual = np.mean((f_fake - f_real) ** 2)
    assert abs(losses["ad"] - ad) < 1e-10
    assert abs(losses["mse"] - mse) < 1e-10
    assert abs(losses["pep"] - perceptual) < 1e-10
    assert abs(losses["total"] - (ad + 3.0 * mse + 2.0 * perceptual)) < 1e-10
    d_value = float(discriminator_loss(batch, gan.G, gan.D).data)
    assert abs(d_value - np.mean(np.log(p_real) + np.log(1 - p_fake))) < 1e-10


def test_losses_finite_under_extreme_parameters():
    batch = _batch()
    gan = build_cgan(8, TINY)
    for p in gan.D.params:
        p.data = p.data * 1e3
    assert np.isfinite(float(discriminator_loss(batch, gan.G, gan.D).data))
    assert np.isfinite(generator_loss(batch, gan.G, gan.D, TINY, None).values()["total"])


def test_shape_mismatch_rejected():
    with pytest.raises(nc.ShapeError):
        GANBatch(np.zeros((2, 8, 8)), np.zeros((2, 8, 9)), np.zeros((2, 3)), [0, 1])
    batch = _batch()
    wrong = lambda x, labels, z: Tensor(np.zeros((4, 6, 6)))  # noqa: E731
    with pytest.raises(nc.ShapeError):
        generator_loss(batch, wrong, const_d(0.5), TINY)


@pytest.mark.parametrize("size", [8, 16, 20, 24, 32])
def test_generator_preserves_shape(size):
    gan = build_cgan(size, TINY)
    x = np.random.default_rng(0).uniform(size=(2, size, size))
    out = gan.G(x, np.array([0, 2]), np.zeros((2, 3))).data
    assert out.shape == (2, size, size)
    assert np.all((out > 0) & (out < 1))
    p = gan.D(x, out, np.array([0, 2])).data
    assert p.shape == (2,) and np.all((p > 0) & (p < 1))


def test_perceptual_depth_follows_image_size():
    assert PerceptualDistance(8).depth == 1
    assert PerceptualDistance(14).depth == 1
    assert PerceptualDistance(16).depth == 2


def _resampled(build, attempts=10):
    for seed in range(attempts):
        try:
            return build(seed)
        except nc.KinkCrossing:
            continue
    raise AssertionError("no kink-free sample point found")


def test_generator_loss_gradients():
    def build(seed):
        gan = build_cgan(8, CGANConfig(base_channels=2, noise_dim=3, num_labels=3, seed=seed))
        batch = _batch(seed=seed)
        pep = PerceptualDistance(8)
        loss = lambda: generator_loss(batch, gan.G, gan.D, TINY, pep).total  # noqa: E731
        return nc.check_gradients(loss, gan.G.params, max_entries=6, rng=np.random.default_rng(seed))

    errors = _resampled(build)
    assert max(errors.values()) < 1e-4, errors


def test_discriminator_loss_gradients():
    def build(seed):
        gan = build_cgan(8, CGANConfig(base_channels=2, noise_dim=3, num_labels=3, seed=seed))
        batch = _batch(seed=seed)
        loss = lambda: discriminator_loss(batch, gan.G, gan.D)  # noqa: E731
        return nc.check_gradients(loss, gan.D.params, max_entries=6, rng=np.random.default_rng(seed))

    errors = _resampled(build)
    assert max(errors.values()) < 1e-4, errors


def test_training_reproducible_and_zero_lr_frozen():
    src, tgt, lab = toy_dataset(12, 8, 3, 1)
    cfg = CGANConfig(base_channels=2, noise_dim=3, num_labels=3, steps=4, batch_size=4, seed=2)
    a = train_cgan(src, tgt, lab, cfg)
    b = train_cgan(src, tgt, lab, cfg)
    assert a.history == b.history
    frozen = CGANConfig(base_channels=2, noise_dim=3, num_labels=3, steps=3, batch_size=4, seed=2,
                        lr_g=0.0, lr_d=0.0)
    fresh = build_cgan(8, frozen)
    trained = train_cgan(src, tgt, lab, frozen)
    for p, q in zip(fresh.G.params + fresh.D.params, trained.G.params + trained.D.params):
        assert np.array_equal(p.data, q.data)


def test_lambda_zero_freezes_generator():
    src, tgt, lab = toy_dataset(8, 8, 3, 1)
    cfg = CGANConfig(lam=0.0, base_channels=2, noise_dim=3, num_labels=3, steps=3, batch_size=4)
    fresh = build_cgan(8, cfg)
    trained = train_cgan(src, tgt, lab, cfg)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(fresh.G.params, trained.G.params))
    assert not all(np.array_equal(p.data, q.data) for p, q in zip(fresh.D.params, trained.D.params))


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty"):
        train_cgan(np.zeros((0, 8, 8)), np.zeros((0, 8, 8)), [], TINY)


def test_synthesize_seven_expressions():
    gan = build_cgan(16, CGANConfig(base_channels=2, noise_dim=3))
    neutral = np.random.default_rng(0).uniform(size=(16, 16))
    out = synthesize_expressions(gan.G, neutral, z_seed=4)
    assert [k for k, _ in out] == list(range(7))
    assert all(img.shape == (16, 16) and img.min() >= 0 and img.max() <= 1 for _, img in out)
    again = synthesize_expressions(gan.G, neutral, z_seed=4)
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(out, again))


def test_checkpoint_round_trip(tmp_path):
    gan = build_cgan(8, TINY)
    gan.save(tmp_path)
    back = CGAN.load(tmp_path)
    assert back.config == TINY and back.size == 8
    for p, q in zip(gan.G.params + gan.D.params, back.G.params + back.D.params):
        assert p.name == q.name and np.array_equal(p.data, q.data)

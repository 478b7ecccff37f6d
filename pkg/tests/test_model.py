import numpy as np
import pytest
from scipy.signal import correlate

from mfpnet import numcore as nc
from mfpnet.facegeom import PatchSet
from mfpnet.model import (
    ConfigError, MFPModel, ModelConfig, SubNetwork, feature_length, fit, predict, shape_plan,
    train_step,
)


def reference_forward(model: MFPModel, patches: np.ndarray) -> np.ndarray:
    """Straight-line numpy evaluation of one sample (7×P×P), no tape involved."""
    feats = []
    for branch, patch in zip(model.branches, patches):
        x = patch[None]
        for w, b in branch.convs:
            w, b = w.data, b.data
            conv = np.stack([sum(correlate(x[c], w[o, c], mode="valid") for c in range(x.shape[0])) + b[o]
                             for o in range(w.shape[0])])
            h, wd = conv.shape[1] // 2, conv.shape[2] // 2
            pooled = conv[:, :2 * h, :2 * wd].reshape(conv.shape[0], h, 2, wd, 2).max(axis=(2, 4))
            x = np.maximum(pooled, 0.0)
        feats.append(x.ravel())
    z = np.concatenate(feats)
    h1 = np.maximum(model.dense1[0].data @ z + model.dense1[1].data, 0.0)
    logits = model.dense2[0].data @ h1 + model.dense2[1].data
    e = np.exp(logits - logits.max())
    return e / e.sum()


def set_output_bias(model: MFPModel, bias) -> None:
    model.dense2[0].data = np.zeros_like(model.dense2[0].data)
    model.dense2[1].data = np.asarray(bias, dtype=np.float64)


# --- shape plan ---

def test_shape_plan_at_276():
    plan = dict(shape_plan(ModelConfig(patch_size=276)))
    assert plan["C1 conv"] == (6, 272, 272)
    assert plan["C3 pool"] == (120, 31, 31)
    assert plan["branch features"] == (115320,)
    assert plan["concat"] == (807240,)


def test_shape_plan_68():
    cfg = ModelConfig(patch_size=68)
    sides = [s[-1] for name, s in shape_plan(cfg) if "C" in name]
    assert sides == [64, 32, 28, 14, 10, 5]
    assert feature_length(cfg) == 3000
    assert dict(shape_plan(cfg))["concat"] == (21000,)


def test_shape_plan_19_rejected():
    with pytest.raises(ConfigError, match="C3 conv"):
        shape_plan(ModelConfig(patch_size=19))


@pytest.mark.parametrize("p, stage", [(20, "C3 conv"), (24, "C3 conv"), (30, "C3 conv"),
                                      (34, "C3 pool"), (13, "C2 conv")])
def test_shape_plan_names_failing_stage(p, stage):
    with pytest.raises(ConfigError, match=stage):
        shape_plan(ModelConfig(patch_size=p))


def test_smallest_valid_patch_is_36():
    assert feature_length(ModelConfig(patch_size=36)) == 120
    with pytest.raises(ConfigError):
        shape_plan(ModelConfig(patch_size=35))


def test_model_construction_rejects_bad_patch_size():
    with pytest.raises(ConfigError):
        MFPModel(ModelConfig(patch_size=20, num_classes=2))


# --- architecture ---

def test_subnetwork_parameter_counts():
    sub = SubNetwork(np.random.default_rng(0))
    assert sub.parameter_counts() == {"C1": 156, "C2": 2416, "C3": 48120}
    assert [w.shape for w, _ in sub.convs] == [(6, 1, 5, 5), (16, 6, 5, 5), (120, 16, 5, 5)]


def test_branches_have_independent_parameters():
    model = MFPModel(ModelConfig(dense_width=16))
    names = [p.name for p in model.params]
    assert len(names) == len(set(names)) == 7 * 6 + 4
    assert not np.array_equal(model.branches[0].convs[0][0].data, model.branches[1].convs[0][0].data)
    assert model.dense1[0].shape == (16, 7 * 120)


# --- forward ---

@pytest.fixture(scope="module")
def small_model():
    return MFPModel(ModelConfig(patch_size=36, num_classes=8, dense_width=32, seed=3))


@pytest.fixture(scope="module")
def sample():
    return np.random.default_rng(5).uniform(size=(7, 36, 36))


def test_forward_is_a_distribution(small_model, sample):
    p = small_model.forward(sample).data
    assert p.shape == (8,)
    assert np.all(p > 0)
    assert abs(p.sum() - 1.0) < 1e-12


def test_forward_deterministic(small_model, sample):
    a = small_model.forward(sample).data
    b = small_model.forward(sample).data
    assert np.array_equal(a, b)


def test_forward_matches_reference(small_model, sample):
    np.testing.assert_allclose(small_model.forward(sample).data, reference_forward(small_model, sample),
                               rtol=0, atol=1e-10)


def test_forward_accepts_patchset_and_batches(small_model, sample):
    single = small_model.forward(PatchSet(sample)).data
    batch = small_model.forward(np.stack([sample, sample * 0.5])).data
    assert batch.shape == (2, 8)
    np.testing.assert_allclose(batch[0], single, atol=1e-12)


def test_forward_rejects_wrong_patch_size(small_model):
    with pytest.raises(nc.ShapeError, match="36"):
        small_model.forward(np.zeros((7, 40, 40)))
    with pytest.raises(nc.ShapeError):
        small_model.forward(np.zeros((6, 36, 36)))


def test_training_forward_uses_dropout(small_model, sample):
    a = small_model.forward(sample, training=True, rng=np.random.default_rng(0)).data
    b = small_model.forward(sample, training=True, rng=np.random.default_rng(0)).data
    assert np.array_equal(a, b)
    assert not np.allclose(a, small_model.forward(sample).data)


# --- train_step ---

def test_train_step_loss_decreases():
    # RMSProp's first updates are sign-like over ~150k weights, so a small step keeps descent monotone
    model = MFPModel(ModelConfig(patch_size=36, num_classes=3, dense_width=16, dropout=0.0, seed=1))
    rng = np.random.default_rng(9)
    x = rng.uniform(size=(6, 7, 36, 36))
    y = np.array([0, 1, 2, 0, 1, 2])
    opt = nc.RMSProp(model.params, lr=5e-5)
    losses = [train_step(model, x, y, opt) for _ in range(11)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_train_step_zero_lr_changes_nothing(sample):
    model = MFPModel(ModelConfig(dense_width=16, seed=2))
    before = [p.data.copy() for p in model.params]
    opt = nc.RMSProp(model.params, lr=0.0)
    losses = [train_step(model, sample[None], [3], opt, np.random.default_rng(0)) for _ in range(3)]
    assert losses[0] == losses[1] == losses[2]
    assert all(np.array_equal(a, p.data) for a, p in zip(before, model.params))


def test_train_step_confident_sample_has_zero_loss_and_gradient(sample):
    model = MFPModel(ModelConfig(dense_width=16, seed=2, dropout=0.0))
    bias = np.zeros(8)
    bias[4] = 1000.0
    set_output_bias(model, bias)
    opt = nc.RMSProp(model.params)
    before = [p.data.copy() for p in model.params]
    assert train_step(model, sample[None], [4], opt) == 0.0
    assert all(np.all(p.grad == 0) for p in model.params)
    assert all(np.array_equal(a, p.data) for a, p in zip(before, model.params))


def test_train_step_rejects_bad_labels_before_update(sample):
    model = MFPModel(ModelConfig(dense_width=16))
    before = [p.data.copy() for p in model.params]
    opt = nc.RMSProp(model.params)
    with pytest.raises(ValueError, match="labels"):
        train_step(model, sample[None], [8], opt)
    with pytest.raises(ValueError):
        train_step(model, sample[None], [0, 1], opt)
    assert all(np.array_equal(a, p.data) for a, p in zip(before, model.params))


def test_fit_is_deterministic():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(8, 7, 36, 36))
    y = np.arange(8) % 2
    runs = []
    for _ in range(2):
        model = MFPModel(ModelConfig(num_classes=2, dense_width=8, seed=4))
        runs.append(fit(model, x, y, epochs=2, batch_size=4, seed=6))
    assert runs[0] == runs[1]


# --- predict ---

def test_predict_argmax(sample):
    model = MFPModel(ModelConfig(num_classes=3, dense_width=8))
    set_output_bias(model, np.log([0.1, 0.7, 0.2]))
    cls, probs = predict(model, sample)
    assert cls == 1
    np.testing.assert_allclose(probs, [0.1, 0.7, 0.2], atol=1e-12)


def test_predict_tie_goes_to_lowest_index(sample):
    model = MFPModel(ModelConfig(dense_width=8))
    bias = np.zeros(8)
    bias[[2, 5]] = 3.0
    set_output_bias(model, bias)
    assert predict(model, sample)[0] == 2


def test_predict_invariant_under_increasing_affine_logit_map(small_model, sample):
    model = MFPModel(small_model.config)
    nc.restore(model.params, {p.name: p.data for p in small_model.params})
    base = predict(model, sample)[0]
    model.dense2[0].data = model.dense2[0].data * 3.7
    model.dense2[1].data = model.dense2[1].data * 3.7 - 11.0
    assert predict(model, sample)[0] == base


# --- persistence ---

def test_model_checkpoint_round_trip(tmp_path, small_model, sample):
    path = tmp_path / "model.ckpt"
    small_model.save(path)
    loaded = MFPModel.load(path)
    assert loaded.config == small_model.config
    assert np.array_equal(loaded.forward(sample).data, small_model.forward(sample).data)


# --- gradients ---

def _resampled(build, attempts=10):
    for seed in range(attempts):
        try:
            return build(seed)
        except nc.KinkCrossing:
            continue
    raise AssertionError("no kink-free sample point found")


def test_subnetwork_gradients_match_finite_differences():
    def build(seed):
        rng = np.random.default_rng(40 + seed)
        sub = SubNetwork(rng)
        x = rng.uniform(size=(1, 1, 36, 36))
        target = rng.normal(size=120)
        loss = lambda: nc.sum_(nc.mul(sub(x), target))  # noqa: E731
        return nc.check_gradients(loss, sub.params, max_entries=12, rng=rng)

    errors = _resampled(build)
    assert max(errors.values()) < 1e-4, errors


def test_end_to_end_gradients_match_finite_differences():
    def build(seed):
        model = MFPModel(ModelConfig(patch_size=36, num_classes=2, dense_width=8, seed=seed))
        rng = np.random.default_rng(70 + seed)
        x = rng.uniform(size=(2, 7, 36, 36))
        y = np.array([0, 1])
        loss = lambda: nc.cross_entropy(model.forward(x), y)  # noqa: E731
        return nc.check_gradients(loss, model.params, max_entries=4, rng=rng)

    errors = _resampled(build)
    assert len(errors) == 7 * 6 + 4
    assert max(errors.values()) < 1e-4, errors

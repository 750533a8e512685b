import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import smooth_images
from deformable import latent as L
from deformable import net
from deformable import support as S
from deformable import warp as W
from deformable.data import InsufficientDataError, LabeledDataset


def small_model(classes=3, seed=0):
    m = net.init_model("4c5-p2-6c5-p2-16f", (1, 28, 28), classes, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    w = {k: (v + 0.05 * rng.standard_normal(v.shape) if k.endswith(".b") else v) for k, v in m.weights.items()}
    return net.ModelParams(m.layers, m.input_shape, w, m.heads, m.seed)


def unit_images(rng, n):
    x = smooth_images(rng, n)
    x -= x.min(axis=(1, 2, 3), keepdims=True)
    return x / x.max(axis=(1, 2, 3), keepdims=True)


def masks_of(value, classes=3):
    return S.SupportMask(np.full((classes, 28, 28), value, dtype=np.float32), 0.25)


ES4 = L.LatentSearchConfig(W.ROTATION, "es", L.rotation_set(4))


# templates ------------------------------------------------------------------


def test_single_example_template_is_aligned_example():
    model = small_model()
    x = unit_images(np.random.default_rng(0), 3)
    ds = LabeledDataset(x, [0, 1, 2])
    t = S.build_templates(model, ds, ES4)
    z, _ = L.label_latents(model, x, ds.labels, ES4)
    for j in range(3):
        assert t.counts[j] == 1
        assert np.array_equal(t.means[j], np.clip(W.warp(x[j], W.ROTATION, z[j]), 0, 1))


def test_identity_latents_give_plain_mean():
    model = small_model()
    rng = np.random.default_rng(1)
    x = unit_images(rng, 9)
    y = np.arange(9) % 3
    t = S.build_templates(model, LabeledDataset(x, y), L.identity_config())
    for j in range(3):
        assert np.allclose(t.means[j], x[y == j].mean(axis=0), atol=1e-12)
    assert t.counts.tolist() == [3, 3, 3]


def test_template_needs_every_class():
    with pytest.raises(InsufficientDataError):
        S.class_means(np.zeros((2, 1, 4, 4)), [0, 0], 2)


def test_sharpness_examples():
    assert S.sharpness(np.zeros((5, 5))) == 0.0
    crisp = np.zeros((6, 6))
    crisp[1:4, 2:5] = 1.0
    assert S.sharpness(crisp) == 1.0
    assert S.sharpness(np.full((4, 4), 0.5)) == 0.0
    # blurring a crisp shape lowers it
    blurred = crisp.copy()
    blurred[1:4, 2:5] = 0.6
    assert S.sharpness(blurred) < S.sharpness(crisp)


# masks ----------------------------------------------------------------------------


def test_mask_tau_zero_is_dilated_support():
    t = np.zeros((7, 7))
    t[3, 3] = 0.01
    m = S.make_mask(t, 0.0)
    expect = np.zeros((7, 7))
    expect[2:5, 2:5] = 1
    assert np.array_equal(m, expect)


def test_mask_uniform_template_all_ones():
    assert np.array_equal(S.make_mask(np.full((5, 6), 0.4), 0.7), np.ones((5, 6)))


def test_mask_tau_one_keeps_maxima():
    t = np.full((9, 9), 0.5)
    t[1, 1] = t[6, 6] = 0.9
    m = S.make_mask(t, 1.0)
    expect = np.zeros((9, 9))
    expect[0:3, 0:3] = 1
    expect[5:8, 5:8] = 1
    assert np.array_equal(m, expect)


def test_mask_is_binary_and_validated():
    t = np.random.default_rng(2).random((3, 1, 10, 10))
    masks = S.make_masks(S.ClassTemplate(t, np.ones(3, dtype=np.int64)), 0.5)
    assert set(np.unique(masks.masks)) <= {0.0, 1.0}
    assert masks.masks.shape == (3, 10, 10) and masks.tau == 0.5
    with pytest.raises(ValueError):
        S.make_mask(t[0], 1.5)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2**31 - 1))
def test_mask_monotone_in_tau(tau, seed):
    t = np.random.default_rng(seed).random((8, 8))
    lo = S.make_mask(t, tau * 0.5)
    hi = S.make_mask(t, tau)
    assert np.all(hi <= lo)


# declutter ------------------------------------------------------------------------


def test_declutter_all_ones_is_warp_and_all_zeros_is_blank():
    x = unit_images(np.random.default_rng(3), 1)[0]
    z = [0.7]
    assert np.array_equal(S.declutter(x, z, np.ones((28, 28))), W.warp(x, W.ROTATION, z))
    assert not S.declutter(x, z, np.zeros((28, 28))).any()


def test_declutter_idempotent_in_mask():
    rng = np.random.default_rng(4)
    x = unit_images(rng, 1)[0]
    mask = (rng.random((28, 28)) > 0.5).astype(np.float32)
    once = S.declutter(x, [0.3], mask)
    assert np.array_equal(once * mask, once)


# classification --------------------------------------------------------------------


def test_stack_channels_are_declutter_outputs():
    model = small_model()
    rng = np.random.default_rng(5)
    x = unit_images(rng, 2)
    masks = S.SupportMask((rng.random((3, 28, 28)) > 0.3).astype(np.float32), 0.25)
    stack = S.build_class_stack(model, x, masks, ES4)
    assert stack.shape == (2, 3, 28, 28)
    res = L.per_class_latents(model, x, ES4)
    for i in range(2):
        for j in range(3):
            assert np.array_equal(stack[i, j], S.declutter(x[i], res.z[i, j], masks.masks[j])[0])
    assert np.array_equal(S.build_class_stack(model, x[0], masks, ES4), stack[0])


def test_zero_image_zero_stack():
    model = small_model()
    stack = S.build_class_stack(model, np.zeros((1, 28, 28)), masks_of(1.0), ES4)
    assert stack.shape == (3, 28, 28) and not stack.any()


def test_all_ones_masks_equal_classify():
    model = small_model()
    x = unit_images(np.random.default_rng(6), 6)
    pred, _, _ = L.classify(model, x, ES4)
    assert np.array_equal(S.classify_masked(model, x, masks_of(1.0), ES4), pred)


def test_identity_latents_all_ones_is_plain_cnn():
    model = small_model()
    x = unit_images(np.random.default_rng(7), 6)
    got = S.classify_masked(model, x, masks_of(1.0), L.identity_config())
    assert np.array_equal(got, net.predict(model, x))


def test_single_class_is_class_zero():
    model = small_model(classes=1)
    x = unit_images(np.random.default_rng(8), 4)
    assert S.classify_masked(model, x, masks_of(1.0, 1), ES4).tolist() == [0, 0, 0, 0]


def test_mask_count_checked():
    with pytest.raises(ValueError):
        S.classify_masked(small_model(), np.zeros((1, 1, 28, 28)), masks_of(1.0, 2), ES4)


def test_stack_classifier_zero_epochs_and_channels():
    rng = np.random.default_rng(9)
    stacks = rng.random((6, 3, 12, 12))
    labels = np.arange(6) % 3
    cfg = net.TrainConfig(epochs=0, seed=2)
    model = S.train_stack_classifier(stacks, labels, "4c3-p2-8f", cfg)
    init = net.init_model("4c3-p2-8f", (3, 12, 12), 3, seed=2)
    for k, v in init.named_arrays().items():
        assert np.array_equal(model.named_arrays()[k], v)
    with pytest.raises(net.ShapeError):
        S.train_stack_classifier(stacks[:, :2], labels, "4c3-p2-8f", cfg)


def test_stacked_classifier_learns_channel_pattern():
    # class j lights up channel j; the stack model should pick that up quickly
    rng = np.random.default_rng(10)
    n = 60
    labels = np.arange(n) % 3
    stacks = 0.1 * rng.random((n, 3, 8, 8))
    stacks[np.arange(n), labels] += 0.8
    cfg = net.TrainConfig(epochs=15, batch_size=10, seed=1)
    model = S.train_stack_classifier(stacks, labels, "4c3-p2-8f", cfg)
    assert np.mean(net.predict(model, stacks) == labels) == 1.0


def test_export_pgms(tmp_path):
    t = S.ClassTemplate(np.full((2, 1, 4, 4), 0.5), np.array([1, 1]))
    paths = S.export_pgms(tmp_path, t, S.make_masks(t))
    assert [p.name for p in paths] == ["template_0.pgm", "template_1.pgm", "mask_0.pgm", "mask_1.pgm"]


def test_precomputed_latents_give_same_answers():
    model = small_model()
    rng = np.random.default_rng(11)
    x = unit_images(rng, 5)
    masks = S.SupportMask((rng.random((3, 28, 28)) > 0.4).astype(np.float32), 0.25)
    res = L.per_class_latents(model, x, ES4)
    assert np.array_equal(S.classify_masked(model, x, masks, ES4, batch=2, latents=res),
                          S.classify_masked(model, x, masks, ES4))
    assert np.array_equal(S.build_class_stack(model, x, masks, ES4, batch=2, latents=res),
                          S.build_class_stack(model, x, masks, ES4))

import numpy as np
import pytest

from conftest import relative_error, smooth_images
from deformable import latent as L
from deformable import net
from deformable import warp as W

FAMILIES = [W.ROTATION, W.TRANSCALE, W.AFFINE, W.TPS]


def small_model(classes=3, seed=0, shape=(1, 28, 28)):
    m = net.init_model("4c5-p2-6c5-p2-16f", shape, classes, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    w = {k: (v + 0.05 * rng.standard_normal(v.shape) if k.endswith(".b") else v) for k, v in m.weights.items()}
    return net.ModelParams(m.layers, m.input_shape, w, m.heads, m.seed)


def matched_filter(templates):
    """Features are the raw pixels; class j scores its template's correlation."""
    t = np.asarray(templates, dtype=np.float64).reshape(len(templates), -1)
    d = t.shape[1]
    side = int(np.sqrt(d))
    layers = net.parse_spec(f"{d}l")
    weights = {"l0.w": np.eye(d), "l0.b": np.zeros(d)}
    heads = np.concatenate([t, np.zeros((len(t), 1))], axis=1)
    return net.ModelParams(layers, (1, side, side), weights, heads)


def test_score_at_identity_equals_plain_score():
    model = small_model()
    x = smooth_images(np.random.default_rng(0), 1)[0]
    feats, _ = net.features_forward(model, x[None])
    plain = net.class_scores(model, feats)[0]
    for fam in FAMILIES:
        for j in range(3):
            s, _ = L.score_with_z(model, x, j, W.identity_params(fam), fam, need_grad=False)
            assert s == plain[j]


@pytest.mark.parametrize("family", FAMILIES, ids=lambda f: f.kind)
def test_score_gradient_matches_fd(family):
    rng = np.random.default_rng(1)
    model = small_model()
    x = smooth_images(rng, 1)[0]
    z = W.identity_params(family) + 0.05 * rng.standard_normal(family.n_params)
    if family.kind == "rotation":
        z = np.array([0.4])
    s, g = L.score_with_z(model, x, 1, z, family)
    h = 1e-5
    num = np.array([(L.score_with_z(model, x, 1, z + h * e, family, False)[0]
                     - L.score_with_z(model, x, 1, z - h * e, family, False)[0]) / (2 * h)
                    for e in np.eye(len(z))])
    assert relative_error(g, num) < 1e-3


def test_zero_image_score_independent_of_z():
    model = small_model()
    x = np.zeros((1, 28, 28))
    s0, _ = L.score_with_z(model, x, 0, [0.0], need_grad=False)
    for a in (0.3, 1.0, 3.0):
        assert L.score_with_z(model, x, 0, [a], need_grad=False)[0] == s0


def test_es_identity_set_is_plain_score():
    model = small_model()
    x = smooth_images(np.random.default_rng(2), 1)[0]
    cfg = L.identity_config(W.ROTATION)
    z, s = L.optimize_es(model, x, 2, cfg)
    assert z[0] == 0.0
    assert s == L.score_with_z(model, x, 2, [0.0], need_grad=False)[0]


def test_es_monotone_in_set():
    model = small_model()
    x = smooth_images(np.random.default_rng(3), 1)[0]
    small = L.LatentSearchConfig(W.ROTATION, "es", L.rotation_set(4))
    big = L.LatentSearchConfig(W.ROTATION, "es", L.rotation_set(8))  # contains the 4-set
    for j in range(3):
        assert L.optimize_es(model, x, j, big)[1] >= L.optimize_es(model, x, j, small)[1]


def test_es_tie_goes_to_first():
    model = small_model()
    x = np.zeros((1, 28, 28))
    cfg = L.LatentSearchConfig(W.ROTATION, "es", L.rotation_set(6))
    z, _ = L.optimize_es(model, x, 0, cfg)
    assert z[0] == 0.0


def test_matched_filter_recovers_rotation(mnist):
    digit = mnist.images[np.flatnonzero(mnist.labels == 7)[0]].astype(np.float64)
    model = matched_filter(digit[None])
    rotated = W.warp(digit, W.ROTATION, [np.radians(90.0)])
    cfg = L.LatentSearchConfig(W.ROTATION, "es", L.rotation_set(360))
    z, _ = L.optimize_es(model, rotated, 0, cfg)
    est = np.degrees(z[0])
    err = abs((est - (-90.0) + 180) % 360 - 180)
    assert err <= 1.0


def test_matched_filter_classifies_rotated_templates(mnist):
    picks = [np.flatnonzero(mnist.labels == d)[0] for d in (0, 1, 4, 7)]
    t = mnist.images[picks, 0].astype(np.float64)
    t /= np.linalg.norm(t.reshape(4, -1), axis=1)[:, None, None]
    model = matched_filter(t)
    cfg = L.LatentSearchConfig(W.ROTATION, "es", L.rotation_set(72))
    angles = [30.0, 135.0, 200.0, 300.0]
    x = np.stack([W.warp(t[k][None], W.ROTATION, [np.radians(a)]) for k, a in enumerate(angles)])
    pred, res, poses = L.classify(model, x, cfg)
    assert pred.tolist() == [0, 1, 2, 3]
    for k, a in enumerate(angles):
        est = -np.degrees(poses[k, 0])
        assert abs((est - a + 180) % 360 - 180) <= 2.5 + 1e-9
    assert res.z.shape == (4, 4, 1)


# gradient ascent ------------------------------------------------------------------


def test_gd_zero_steps_returns_start():
    model = small_model()
    x = smooth_images(np.random.default_rng(4), 1)[0]
    cfg = L.LatentSearchConfig(W.ROTATION, "gd", gd_steps=0)
    z, s, _ = L.optimize_gd(model, x, 0, [0.3], cfg)
    assert z[0] == 0.3
    assert s == L.score_with_z(model, x, 0, [0.3], need_grad=False)[0]


@pytest.mark.parametrize("family", FAMILIES, ids=lambda f: f.kind)
def test_gd_never_below_start(family):
    rng = np.random.default_rng(5)
    model = small_model()
    x = smooth_images(rng, 1)[0]
    cfg = L.LatentSearchConfig(family, "gd", gd_steps=5, gd_lr=0.5)  # large steps overshoot
    z0 = W.identity_params(family)
    s0 = L.score_with_z(model, x, 1, z0, family, False)[0]
    _, _, obj = L.optimize_gd(model, x, 1, z0, cfg)
    assert obj >= s0


def test_gd_quadratic_recurrence():
    zbar, lr = 0.7, 0.05
    cfg = L.LatentSearchConfig(W.ROTATION, "gd", gd_steps=10, gd_lr=lr, penalty_weight=0.0)

    def score(z, need_grad=True):
        return -(z[:, 0] - zbar) ** 2, (-2 * (z - zbar) if need_grad else None)

    z, s, o = L.gradient_ascent(score, np.array([[0.0]]), cfg)
    expect = 0.0
    for _ in range(10):
        expect = expect + lr * (-2 * (expect - zbar))
    assert z[0, 0] == expect
    assert abs(z[0, 0] - zbar) == pytest.approx(abs(0.0 - zbar) * (1 - 2 * lr) ** 10, rel=1e-12)


def test_gd_divergence_raises():
    cfg = L.LatentSearchConfig(W.ROTATION, "gd", gd_steps=3)

    def score(z, need_grad=True):
        return np.zeros(len(z)), np.full_like(z, np.nan)

    with pytest.raises(L.LatentDivergence):
        L.gradient_ascent(score, np.zeros((1, 1)), cfg)


def test_gd_respects_bounds():
    cfg = L.LatentSearchConfig(W.TRANSCALE, "gd", gd_steps=5, gd_lr=10.0, penalty_weight=0.0)

    def score(z, need_grad=True):
        return z.sum(axis=1), np.ones_like(z)

    z, _, _ = L.gradient_ascent(score, np.zeros((1, 4)), cfg)
    lo, hi = W.bounds(W.TRANSCALE)
    assert np.all(z <= hi) and np.all(z >= lo)


def test_esgd_zero_steps_is_es():
    model = small_model()
    x = smooth_images(np.random.default_rng(6), 1)[0]
    es = L.LatentSearchConfig(W.ROTATION, "es")
    esgd = es.replace(method="esgd", gd_steps=0)
    for j in range(3):
        z1, s1 = L.optimize_es(model, x, j, es)
        z2, s2, _ = L.optimize_esgd(model, x, j, esgd)
        assert np.array_equal(z1, z2) and s1 == s2


def test_esgd_at_least_es():
    model = small_model()
    x = smooth_images(np.random.default_rng(7), 1)[0]
    cfg = L.LatentSearchConfig(W.ROTATION, "esgd")
    for j in range(3):
        _, s_es = L.optimize_es(model, x, j, cfg)
        _, _, o = L.optimize_esgd(model, x, j, cfg)
        assert o >= s_es


def test_default_config_is_eight_by_ten():
    cfg = L.LatentSearchConfig()
    assert cfg.method == "esgd" and cfg.gd_steps == 10 and len(cfg.es_set) == 8
    assert np.allclose(np.degrees(cfg.es_set[:, 0]), np.arange(0, 360, 45))


def test_config_validation():
    with pytest.raises(ValueError):
        L.LatentSearchConfig(method="sgd")
    with pytest.raises(ValueError):
        L.LatentSearchConfig(gd_steps=-1)
    with pytest.raises(ValueError):
        L.LatentSearchConfig(W.AFFINE, es_set=np.zeros((2, 3)))
    with pytest.raises(ValueError):
        L.LatentSearchConfig(es_set=np.zeros((0, 1)))


# per-class and classification --------------------------------------------------


def test_per_class_single_class_matches_optimizer():
    model = small_model(classes=1)
    x = smooth_images(np.random.default_rng(8), 2)
    cfg = L.LatentSearchConfig()
    res = L.per_class_latents(model, x, cfg)
    for i in range(2):
        z, s, _ = L.optimize_esgd(model, x[i], 0, cfg)
        assert np.array_equal(res.z[i, 0], z) and res.scores[i, 0] == s
    pred, _, _ = L.classify(model, x, cfg)
    assert pred.tolist() == [0, 0]


def test_per_class_deterministic_and_shaped():
    model = small_model()
    x = smooth_images(np.random.default_rng(9), 5)
    cfg = L.LatentSearchConfig(gd_steps=3)
    a = L.per_class_latents(model, x, cfg, batch=2)
    b = L.per_class_latents(model, x, cfg, batch=5)
    assert a.z.shape == (5, 3, 1)
    assert np.array_equal(a.z, b.z) and np.array_equal(a.scores, b.scores)
    assert a.warped(x).shape == (5, 3, 1, 28, 28)


def test_classify_ties_to_lowest():
    model = small_model()
    model = model.replace({"heads": np.zeros_like(model.heads)})
    pred, _, _ = L.classify(model, smooth_images(np.random.default_rng(10), 3), L.identity_config())
    assert pred.tolist() == [0, 0, 0]


def test_label_latents_match_per_class():
    model = small_model()
    x = smooth_images(np.random.default_rng(11), 6)
    y = np.array([2, 0, 1, 1, 2, 0])
    cfg = L.LatentSearchConfig(gd_steps=2)
    z, s = L.label_latents(model, x, y, cfg)
    res = L.per_class_latents(model, x, cfg)
    assert np.array_equal(z, res.z[np.arange(6), y])
    assert np.array_equal(s, res.scores[np.arange(6), y])

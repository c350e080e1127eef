"""Autodecoder tests: loss values against closed forms and frozen
examples, gradients against finite differences, the fitting loop
(progress, determinism, resume, frozen decoder), and the seed
consistency score."""

import numpy as np
import pytest

from npdiff import autodecoder as adc
from npdiff import autodiff as ad
from npdiff import renderer as rn
from npdiff.errors import NumericalError
from npdiff.pointcloud import LOGVAR_MAX, LOGVAR_MIN, NeuralPointCloud


def rng(seed=0):
    return np.random.default_rng(seed)


def look_at_camera(position, width=4, height=4, focal=4.0, near=0.5, far=4.0, up=(0, 0, 1)):
    position = np.asarray(position, dtype=np.float64)
    forward = -position / np.linalg.norm(position)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(forward, up)
    if np.linalg.norm(x) < 1e-8:
        x = np.cross(forward, [0.0, 1.0, 0.0])
    x = x / np.linalg.norm(x)
    y = np.cross(forward, x)
    r = np.stack([x, y, forward], axis=1)
    return rn.Camera(r, position, focal, (width / 2, height / 2), width, height, near, far)


def tiny_setup(n_objects=1, m=6, d=3, n_views=2, seed=0, image=None):
    """Objects with random clouds and flat gray views, plus a small decoder."""
    r = rng(seed)
    objects = []
    for i in range(n_objects):
        positions = r.uniform(-0.3, 0.3, (m, 3))
        cloud = NeuralPointCloud(positions, np.zeros((m, d)))
        views = []
        for k in range(n_views):
            cam = look_at_camera(1.4 * r.standard_normal(3) + [0, 0, 1.6], width=4, height=4)
            img = np.full((4, 4, 3), 0.4) if image is None else image.copy()
            views.append(rn.View(cam, img))
        objects.append(adc.ObjectRecord(f"obj{i}", cloud, views))
    dcfg = rn.DecoderConfig(feature_dim=d, hidden=8, agg_width=8)
    store = rn.init_decoder(dcfg, rng(seed + 100))
    rcfg = rn.RenderConfig(shading_points=6, neighbors_k=3, neighbor_radius=1.5, ray_chunk=64)
    return objects, store, dcfg, rcfg


# ---------------------------------------------------------------------------
# losses

def test_reconstruction_loss_is_mean_squared_error():
    pred = ad.Tensor(np.array([[0.0, 1.0, 0.5], [1.0, 0.0, 0.0]]), requires_grad=True)
    target = np.array([[0.0, 0.0, 0.5], [0.0, 0.0, 0.0]])
    loss = adc.reconstruction_loss(pred, target)
    assert np.isclose(loss.data, (1.0 + 1.0) / 6.0)
    with pytest.raises(ValueError, match="target"):
        adc.reconstruction_loss(pred, target[:1])


def test_tv_loss_two_point_example():
    # two points 2 apart, features differ by 4 in one dimension, k=1:
    # each direction contributes 4/2 = 2, total 4.0
    positions = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    features = ad.Tensor(np.array([[0.0, 1.0], [4.0, 1.0]]), requires_grad=True)
    loss = adc.tv_loss(features, positions, k=1)
    assert np.isclose(loss.data, 4.0)


def test_tv_neighbor_indices_match_brute_force():
    r = rng(3)
    positions = r.standard_normal((7, 3))
    k = 3
    src, dst, dist = adc.tv_neighbor_indices(positions, k)
    for i in range(7):
        d2 = np.sum((positions - positions[i]) ** 2, axis=1)
        d2[i] = np.inf
        expect = sorted(range(7), key=lambda j: (d2[j], j))[:k]
        got = dst[src == i]
        assert list(got) == expect
        assert np.allclose(dist[src == i], np.sqrt(d2[expect]))


def test_tv_loss_single_point_is_zero():
    features = ad.Tensor(np.ones((1, 4)), requires_grad=True)
    loss = adc.tv_loss(features, np.zeros((1, 3)), k=3)
    assert loss.data == 0.0


def test_tv_loss_gradient():
    r = rng(5)
    positions = r.standard_normal((6, 3))
    feats = r.standard_normal((6, 4))

    def fn(p):
        return adc.tv_loss(p["f"], positions, k=3)

    report = ad.grad_check(fn, {"f": feats}, rtol=1e-5)
    assert report.passed, str(report)


def test_kl_loss_value_and_closed_form_gradient():
    r = rng(7)
    mu_v = r.standard_normal((4, 3))
    lv_v = r.uniform(-2, 1, (4, 3))
    mu = ad.Tensor(mu_v.copy(), requires_grad=True)
    lv = ad.Tensor(lv_v.copy(), requires_grad=True)
    loss = adc.kl_loss(mu, lv)
    expect = 0.5 * np.sum(mu_v**2 + np.exp(lv_v) - lv_v - 1.0)
    assert np.isclose(loss.data, expect, rtol=1e-12)
    ad.backward(loss)
    # closed form: d/dmu = mu, d/dlogvar = 0.5 (exp(lv) - 1)
    assert np.max(np.abs(mu.grad - mu_v)) < 1e-6
    assert np.max(np.abs(lv.grad - 0.5 * (np.exp(lv_v) - 1.0))) < 1e-6


def test_kl_loss_zero_at_standard_normal():
    mu = ad.Tensor(np.zeros((5, 2)), requires_grad=True)
    lv = ad.Tensor(np.zeros((5, 2)), requires_grad=True)
    assert adc.kl_loss(mu, lv).data == 0.0


def test_reparameterize_value_and_gradient():
    r = rng(9)
    mu_v = r.standard_normal((3, 4))
    lv_v = r.uniform(-1, 1, (3, 4))
    eps = r.standard_normal((3, 4))

    sample = adc.reparameterize(ad.Tensor(mu_v), ad.Tensor(lv_v), eps)
    assert np.allclose(sample.data, mu_v + np.exp(0.5 * lv_v) * eps)

    def fn(p):
        return ad.tsum(adc.reparameterize(p["mu"], p["lv"], eps) ** 2.0)

    report = ad.grad_check(fn, {"mu": mu_v, "lv": lv_v}, rtol=1e-5)
    assert report.passed, str(report)
    with pytest.raises(ValueError, match="noise"):
        adc.reparameterize(ad.Tensor(mu_v), ad.Tensor(lv_v), eps[:2])


# ---------------------------------------------------------------------------
# feature initialization

def test_init_feature_store_modes():
    objects, store, dcfg, rcfg = tiny_setup(n_objects=2, m=5, d=3)
    zero = adc.init_feature_store(objects, 3, adc.AutodecoderConfig(init_mode="zero"), 0)
    assert np.array_equal(zero.get("features.obj0"), np.zeros((5, 3)))

    rand_a = adc.init_feature_store(objects, 3, adc.AutodecoderConfig(init_mode="random"), 0)
    rand_b = adc.init_feature_store(objects, 3, adc.AutodecoderConfig(init_mode="random"), 0)
    assert np.array_equal(rand_a.get("features.obj0"), rand_b.get("features.obj0"))
    assert not np.array_equal(rand_a.get("features.obj0"), rand_a.get("features.obj1"))

    var = adc.init_feature_store(
        objects, 3, adc.AutodecoderConfig(variational=True, init_logvar=-3.0), 0)
    assert np.array_equal(var.get("logvar.obj1"), np.full((5, 3), -3.0))


def test_autodecoder_config_validation():
    with pytest.raises(ValueError, match="init_mode"):
        adc.AutodecoderConfig(init_mode="ones")
    with pytest.raises(ValueError, match="non-negative"):
        adc.AutodecoderConfig(lambda_tv=-1.0)


def test_object_record_requires_views():
    cloud = NeuralPointCloud(np.zeros((2, 3)), np.zeros((2, 2)))
    with pytest.raises(ValueError, match="views"):
        adc.ObjectRecord("empty", cloud, [])


# ---------------------------------------------------------------------------
# fitting loop

def test_fit_reduces_loss_on_flat_target():
    objects, store, dcfg, rcfg = tiny_setup(m=8, d=3, n_views=2, seed=1)
    cfg = adc.AutodecoderConfig(lr=5e-3, epochs=8, rays_per_view=12)
    res = adc.fit(objects, store, dcfg, rcfg, cfg, seed=0)
    assert res.steps == 16
    totals = [row["total"] for row in res.history]
    assert all(np.isfinite(totals))
    assert totals[-1] < totals[0]


def test_fit_is_deterministic_and_resumable():
    objects, store, dcfg, rcfg = tiny_setup(n_objects=2, m=5, d=3, n_views=2, seed=2)
    cfg = adc.AutodecoderConfig(lr=1e-2, epochs=2, rays_per_view=8)

    full_store = store.copy()
    full = adc.fit(objects, full_store, dcfg, rcfg, cfg, seed=11)

    # same seed, fresh stores: bitwise identical
    again_store = store.copy()
    again = adc.fit(objects, again_store, dcfg, rcfg, cfg, seed=11)
    assert np.array_equal(full.features_of("obj1"), again.features_of("obj1"))
    assert np.array_equal(full_store.get("f_phi.w0"), again_store.get("f_phi.w0"))

    # stop after one epoch, then resume with start_step: identical streams
    part_store = store.copy()
    part_cfg = adc.AutodecoderConfig(lr=1e-2, epochs=1, rays_per_view=8)
    part = adc.fit(objects, part_store, dcfg, rcfg, part_cfg, seed=11)
    resumed = adc.fit(objects, part_store, dcfg, rcfg, cfg, seed=11,
                      start_step=part.steps, feature_store=part.feature_store)
    assert np.array_equal(resumed.features_of("obj0"), full.features_of("obj0"))
    assert np.array_equal(resumed.features_of("obj1"), full.features_of("obj1"))
    assert np.array_equal(part_store.get("g_psi.b0"), full_store.get("g_psi.b0"))


def test_fit_freeze_decoder_keeps_decoder_bits():
    objects, store, dcfg, rcfg = tiny_setup(m=5, d=3, seed=3)
    before = {name: store.get(name).copy() for name in store.names()}
    cfg = adc.AutodecoderConfig(lr=1e-2, epochs=2, rays_per_view=8)
    res = adc.fit(objects, store, dcfg, rcfg, cfg, seed=4, freeze_decoder=True)
    for name, value in before.items():
        assert np.array_equal(store.get(name), value)
    assert not np.array_equal(res.features_of("obj0"), np.zeros((5, 3)))


def test_fit_nan_target_raises_numerical_error():
    image = np.full((4, 4, 3), 0.4)
    image[0, 0, 0] = np.nan
    objects, store, dcfg, rcfg = tiny_setup(m=4, d=3, n_views=1, seed=5, image=image)
    cfg = adc.AutodecoderConfig(lr=1e-3, epochs=1, rays_per_view=16)
    with pytest.raises(NumericalError, match="recon"):
        adc.fit(objects, store, dcfg, rcfg, cfg, seed=0)


def test_fit_variational_with_kl_and_logvar_clamp():
    objects, store, dcfg, rcfg = tiny_setup(m=5, d=3, seed=6)
    cfg = adc.AutodecoderConfig(lr=1e-2, epochs=2, rays_per_view=8,
                                variational=True, lambda_kl=1e-3, lambda_tv=1e-4)
    res = adc.fit(objects, store, dcfg, rcfg, cfg, seed=7)
    lv = res.logvar_of("obj0")
    assert np.all(lv >= LOGVAR_MIN) and np.all(lv <= LOGVAR_MAX)
    assert all(row["kl"] > 0 for row in res.history)
    assert all(row["tv"] >= 0 for row in res.history)
    vc = res.variational_cloud_of(objects, "obj0")
    assert np.array_equal(vc.feature_means, res.features_of("obj0"))


def test_fit_kl_requires_variational():
    objects, store, dcfg, rcfg = tiny_setup(m=4, d=3, seed=8)
    cfg = adc.AutodecoderConfig(lambda_kl=1e-3, epochs=1, rays_per_view=4)
    with pytest.raises(ValueError, match="variational"):
        adc.fit(objects, store, dcfg, rcfg, cfg, seed=0)


def test_fit_rejects_bad_inputs():
    objects, store, dcfg, rcfg = tiny_setup(n_objects=2, m=4, d=3, n_views=2, seed=9)
    objects[1].views.pop()
    cfg = adc.AutodecoderConfig(epochs=1, rays_per_view=4)
    with pytest.raises(ValueError, match="same number of views"):
        adc.fit(objects, store, dcfg, rcfg, cfg, seed=0)
    with pytest.raises(ValueError, match="at least one object"):
        adc.fit([], store, dcfg, rcfg, cfg, seed=0)
    with pytest.raises(ValueError, match="feature store"):
        adc.fit(objects[:1], store, dcfg, rcfg, cfg, seed=0, start_step=1)


# ---------------------------------------------------------------------------
# seed consistency

def test_per_point_cosine_similarity_known_cases():
    a = np.array([[1.0, 0.0], [0.0, 2.0]])
    assert adc.per_point_cosine_similarity([a, 3.0 * a]) == pytest.approx(1.0)
    assert adc.per_point_cosine_similarity([a, -a]) == pytest.approx(-1.0)
    assert adc.per_point_cosine_similarity([a, np.zeros_like(a)]) == pytest.approx(0.0)

    b = np.array([[1.0, 0.0]])
    c = np.array([[1.0, 1.0]])
    # three runs: pairs (b,c), (b,b), (c,b) -> mean of cos45, 1, cos45
    got = adc.per_point_cosine_similarity([b, c, b])
    expect = (np.sqrt(0.5) + 1.0 + np.sqrt(0.5)) / 3.0
    assert got == pytest.approx(expect)
    with pytest.raises(ValueError, match="two runs"):
        adc.per_point_cosine_similarity([a])


def test_cosine_similarity_analysis_runs_frozen():
    objects, store, dcfg, rcfg = tiny_setup(m=4, d=3, n_views=2, seed=10)
    before = store.get("f_phi.w0").copy()
    cfg = adc.AutodecoderConfig(lr=1e-2, epochs=1, rays_per_view=6, init_mode="random")
    out = adc.cosine_similarity_analysis(objects, store, dcfg, rcfg, cfg, seeds=[0, 1])
    assert set(out) == {"overall", "per_object"}
    assert set(out["per_object"]) == {"obj0"}
    assert -1.0 <= out["overall"] <= 1.0
    assert np.array_equal(store.get("f_phi.w0"), before)

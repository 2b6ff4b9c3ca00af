from dataclasses import dataclass

import numpy as np
import pytest

from conftest import central_diff, circle_points, rel_err
from lvseg.detector import (CHUNK, detector_cost_grad, detector_forward, init_output_layer,
                            make_roi_label, mask_center, output_layer_cost_grad, pooled_features, prepare_input)
from lvseg.imaging import DimensionError, avg_pool, conv2d_valid, sigmoid
from lvseg.optim import OptimConfig, TrainingError, flatten, minimize, unflatten
from lvseg.shape_net import (StackedAEParams, fallback_disk, infer_shape, output_cost_grad, ring_label,
                             ring_to_region, sae_cost_grad, sae_forward, train_shape_net)
from lvseg.sparse_ae import (SparsityConfig, ae_cost_grad, export_filters, init_ae, kl_divergence,
                             sample_patches, train_ae)


def check_blocks(cost_fn, params, tol=1e-5):
    """Relative error of every parameter block against central differences."""
    _, g = cost_fn(params)
    vec = flatten(params)
    fd = unflatten(params, central_diff(lambda v: cost_fn(unflatten(params, v))[0], vec))
    errs = {}
    for name in vars(params):
        errs[name] = rel_err(getattr(g, name), getattr(fd, name))
        assert errs[name] <= tol, (name, errs[name])
    return errs


# --------------------------------------------------------------------------
# sparse autoencoder


def test_kl_zero_at_target():
    assert kl_divergence(0.1, np.array([0.1]))[0] == pytest.approx(0.0, abs=1e-15)
    assert kl_divergence(0.1, np.array([0.3]))[0] > 0


def test_ae_gradient(rng):
    params = init_ae(9, 4, rng)
    params.b2[:] = rng.normal(size=4) * 0.1
    X = rng.random((7, 9))
    check_blocks(lambda p: ae_cost_grad(p, X, SparsityConfig(rho=0.1, beta=3.0, lam=1e-3)), params)


def test_ae_cost_components(rng):
    params = init_ae(4, 3, rng)
    X = rng.random((5, 4))
    cfg = SparsityConfig(rho=0.2, beta=0.0, lam=0.0)
    a2, y = [], []
    for x in X:  # per-sample loop oracle
        h = sigmoid(params.W2 @ x + params.b2)
        a2.append(h)
        y.append(sigmoid(params.W3 @ h + params.b3))
    recon = 0.5 * np.mean([np.sum((yi - x) ** 2) for yi, x in zip(y, X)])
    assert ae_cost_grad(params, X, cfg)[0] == pytest.approx(recon, rel=1e-12)
    rho_hat = np.mean(a2, axis=0)
    cfg2 = SparsityConfig(rho=0.2, beta=2.0, lam=0.5)
    extra = 0.25 * (np.sum(params.W2 ** 2) + np.sum(params.W3 ** 2)) + 2.0 * np.sum(
        0.2 * np.log(0.2 / rho_hat) + 0.8 * np.log(0.8 / (1 - rho_hat)))
    assert ae_cost_grad(params, X, cfg2)[0] == pytest.approx(recon + extra, rel=1e-12)


def test_sample_patches_deterministic(rng):
    imgs = [rng.random((20, 20)) for _ in range(3)]
    a = sample_patches(imgs, 50, 11, seed=4)
    b = sample_patches(imgs, 50, 11, seed=4)
    assert a.shape == (50, 121)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        sample_patches([np.zeros((5, 5))], 3, 11)


def test_ae_training_decreases_cost_under_gd(rng):
    X = rng.random((60, 16))
    hist = []
    cfg = SparsityConfig(optim=OptimConfig(method="gd", max_iter=30))
    train_ae(X, cfg, n_hidden=5, seed=0, history=hist)
    assert np.all(np.diff(hist) <= 1e-12)
    assert hist[-1] < hist[0]


def test_export_filters(rng):
    p = init_ae(121, 100, rng)
    f, b0 = export_filters(p)
    assert f.shape == (100, 11, 11) and b0.shape == (100,)
    np.testing.assert_array_equal(f[3].ravel(), p.W2[3])
    with pytest.raises(ValueError):
        export_filters(init_ae(16, 3, rng), 11)


def test_optimizer_errors():
    with pytest.raises(TrainingError):
        minimize(lambda x: (float("nan"), x), np.zeros(2), OptimConfig(), "boom")
    with pytest.raises(ValueError):
        minimize(lambda x: (0.0, x), np.zeros(2), OptimConfig(method="adam"))


def test_lbfgs_quadratic():
    A = np.diag([1.0, 10.0, 100.0])
    res = minimize(lambda x: (0.5 * x @ A @ x - x.sum(), A @ x - 1), np.zeros(3), OptimConfig(max_iter=100))
    np.testing.assert_allclose(res.x, 1 / np.diag(A), rtol=1e-5)
    assert np.all(np.diff(res.history) <= 1e-12)


# --------------------------------------------------------------------------
# detector


def small_detector(rng, n_f=3, k=5, side=16, pool=3, n_out=9):
    m = (side - k + 1) // pool
    filters = rng.normal(size=(n_f, k, k)) * 0.3
    return init_output_layer(filters, rng.normal(size=n_f) * 0.1, n_f * m * m, n_out, rng)


def test_pooled_features_layout(rng):
    det = small_detector(rng, n_f=2, k=5, side=17, pool=13)  # 13x13 conv maps, 1x1 pooled
    img = rng.random((17, 17))
    p = pooled_features(det.filters, det.b0, img, pool=13)[0]
    for l in range(2):
        assert p[l] == pytest.approx(sigmoid(conv2d_valid(img, det.filters[l], det.b0[l])).mean(), rel=1e-12)
    det = small_detector(rng, n_f=2, k=3, side=11, pool=3)
    p = pooled_features(det.filters, det.b0, img[:11, :11], pool=3)[0]
    ref = np.concatenate([avg_pool(sigmoid(conv2d_valid(img[:11, :11], det.filters[l], det.b0[l])), 3).ravel()
                          for l in range(2)])
    np.testing.assert_allclose(p, ref, atol=1e-14)


def test_detector_output_gradient(rng):
    det = small_detector(rng)
    imgs = rng.random((4, 16, 16))
    labels = (rng.random((4, 9)) > 0.5).astype(float)
    p = pooled_features(det.filters, det.b0, imgs, 3)
    sub = StackedW(det.W1.copy(), det.b1.copy())
    check_blocks(lambda q: _wrap(output_layer_cost_grad(q.W, q.b, p, labels, 1e-3)), sub)


def test_detector_full_gradient_through_conv_pool(rng):
    det = small_detector(rng)
    imgs = rng.random((5, 16, 16))
    labels = (rng.random((5, 9)) > 0.5).astype(float)
    check_blocks(lambda q: detector_cost_grad(q, imgs, labels, 1e-3, pool=3), det)


def test_detector_gradient_is_chunk_invariant(rng, monkeypatch):
    det = small_detector(rng)
    imgs = rng.random((7, 16, 16))
    labels = (rng.random((7, 9)) > 0.5).astype(float)
    c1, g1 = detector_cost_grad(det, imgs, labels, 1e-3, pool=3)
    import lvseg.detector as d
    monkeypatch.setattr(d, "CHUNK", 2)
    c2, g2 = d.detector_cost_grad(det, imgs, labels, 1e-3, pool=3)
    assert c1 == pytest.approx(c2, rel=1e-12)
    np.testing.assert_allclose(flatten(g1), flatten(g2), rtol=1e-10, atol=1e-15)
    assert CHUNK >= 1


def test_detector_architecture_shapes(rng):
    filters = rng.normal(size=(100, 11, 11)) * 0.05
    det = init_output_layer(filters, np.zeros(100), 8100, 1024, rng)
    x = prepare_input(rng.random((256, 256)))
    assert x.shape == (64, 64)
    assert conv2d_valid(x, filters[0]).shape == (54, 54)
    assert avg_pool(np.zeros((54, 54)), 6).shape == (9, 9)
    assert pooled_features(filters, det.b0, x).shape == (1, 8100)
    assert detector_forward(det, x).shape == (1024,)
    with pytest.raises(DimensionError):
        detector_forward(det, rng.random((60, 60)))


def test_roi_label_and_center_roundtrip():
    lab = make_roi_label((128.0, 128.0))
    assert lab.mask.sum() == 169 and lab.vector.shape == (1024,)
    rows, cols = np.nonzero(lab.mask)
    assert (cols.min(), cols.max(), rows.min(), rows.max()) == (10, 22, 10, 22)
    x, y = mask_center(lab.vector.astype(float))
    assert abs(x - 128) <= 4 and abs(y - 128) <= 4
    # uniform output falls back to thresholded everything -> frame center
    assert mask_center(np.full(1024, 0.9)) == pytest.approx((127.5, 127.5))
    corner = make_roi_label((2.0, 3.0))
    assert corner.mask.sum() < 169 and corner.mask[0, 0]


def test_mask_center_empty_uses_argmax():
    y = np.zeros(1024)
    y[5 * 32 + 7] = 0.3
    x, yy = mask_center(y)
    assert (x, yy) == pytest.approx(((7 + 0.5) * 8 - 0.5, (5 + 0.5) * 8 - 0.5))


# --------------------------------------------------------------------------
# shape network


def small_sae(rng, n=12, h1=5, h2=4):
    def u(*s):
        return rng.uniform(-0.5, 0.5, s)
    return StackedAEParams(u(h1, n), u(h1), u(h2, h1), u(h2), u(n, h2), u(n))


def test_sae_output_layer_gradient(rng):
    p = small_sae(rng)
    X = rng.random((6, 12))
    L = (rng.random((6, 12)) > 0.5).astype(float)
    h2 = sigmoid(sigmoid(X @ p.W4.T + p.b4) @ p.W5.T + p.b5)
    check_blocks(lambda q: _wrap(output_cost_grad(q.W, q.b, h2, L, 1e-3)), StackedW(p.W6.copy(), p.b6.copy()))


def test_sae_finetune_gradient(rng):
    p = small_sae(rng)
    X = rng.random((6, 12))
    L = (rng.random((6, 12)) > 0.5).astype(float)
    check_blocks(lambda q: sae_cost_grad(q, X, L, 1e-3), p)


def test_sae_architecture(rng):
    p = StackedAEParams(np.zeros((100, 4096)), np.zeros(100), np.zeros((100, 100)), np.zeros(100),
                        np.zeros((4096, 100)), np.zeros(4096))
    assert sae_forward(p, rng.random(4096)).shape == (4096,)
    assert sae_forward(p, rng.random((3, 4096))).shape == (3, 4096)
    with pytest.raises(ValueError):
        StackedAEParams(np.zeros((100, 4096)), np.zeros(99), np.zeros((100, 100)), np.zeros(100),
                        np.zeros((4096, 100)), np.zeros(4096))


def test_ring_to_region_recovers_disk():
    ring = ring_label(circle_points(32, 32, 12, 100))
    region, hull = ring_to_region(ring)
    assert not hull
    area = region.sum()
    assert abs(area - np.pi * 144) / (np.pi * 144) < 0.12


def test_ring_to_region_open_ring_uses_hull():
    pts = circle_points(32, 32, 12, 100)[:80]
    from lvseg.imaging import rasterize_ring
    ring = rasterize_ring(pts, (64, 64), closed=False, thickness=1)
    region, hull = ring_to_region(ring)
    assert hull and region.sum() > 300


def test_shape_net_learns_toy_rings(rng):
    # two-class toy problem: small vs large centered circle
    from lvseg.imaging import rasterize_polygon
    side = 16
    X, L = [], []
    for k in range(40):
        r = 3.0 if k % 2 else 6.0
        img = rasterize_polygon(circle_points(7.5, 7.5, r, 64), (side, side)).astype(float) * 0.6 + 0.2
        X.append((img + rng.normal(0, 0.02, img.shape)).ravel())
        L.append(ring_label(circle_points(7.5, 7.5, r, 64), side).ravel())
    from lvseg.shape_net import ShapeConfig
    cfg = ShapeConfig(pretrain=SparsityConfig(lam=3e-3, optim=OptimConfig(max_iter=100)), hidden=(10, 10),
                      output_optim=OptimConfig(max_iter=100), finetune_optim=OptimConfig(max_iter=200))
    hist = {}
    p = train_shape_net(np.array(X), np.array(L), cfg, seed=0, history=hist)
    assert set(hist) == {"pretrain", "output", "finetune"}
    out = sae_forward(p, np.array(X)) > 0.5
    acc = np.mean(out == (np.array(L) > 0.5))
    assert acc > 0.97


def test_infer_shape_fallback_contract(rng):
    p = small_sae(rng, n=64 * 64, h1=3, h2=3)
    p.b6[:] = -20.0  # network outputs nothing
    from lvseg.shape_net import ShapeInferenceError
    with pytest.raises(ShapeInferenceError):
        infer_shape(p, rng.random((100, 100)))
    d = fallback_disk()
    assert d.shape == (64, 64) and d[32, 32] and not d[0, 0]


# helpers ------------------------------------------------------------------


@dataclass
class StackedW:
    W: np.ndarray
    b: np.ndarray


def _wrap(res):
    cost, gW, gb = res
    return cost, StackedW(gW, gb)

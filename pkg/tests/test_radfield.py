import math

import numpy as np
import pytest

from totemcheck import radfield as rf
from totemcheck import simcam
from totemcheck.experiments import scene_box

from oracles import homogeneous_color

LO, HI = np.array([-1.0, -1.0, 0.0]), np.array([1.0, 1.0, 4.0])


def uniform_field(rgb, sigma, res=8):
    params = np.zeros((res,) * 3 + (4,))
    params[..., :3] = np.log(np.asarray(rgb) / (1 - np.asarray(rgb)))
    params[..., 3] = math.log(math.expm1(sigma))
    return rf.RadianceField(LO, HI, res, params)


def random_field(seed, res=8):
    rng = np.random.default_rng(seed)
    params = rng.normal(0, 1, (res,) * 3 + (4,))
    params[..., 3] = rng.normal(0.0, 1.0, (res,) * 3)
    return rf.RadianceField(LO, HI, res, params)


def random_rays(rng, n):
    o = np.zeros((n, 3))
    o[:, :2] = rng.uniform(-0.5, 0.5, (n, 2))
    d = np.ones((n, 3))
    d[:, :2] = rng.uniform(-0.15, 0.15, (n, 2))
    return o, d


def test_normalize_rays():
    o, d, ok = rf.normalize_rays([[1, 1, 0]], [[0, 0, 1]])
    np.testing.assert_allclose(o, [[1, 1, 0]])
    np.testing.assert_allclose(d, [[0, 0, 1]])
    o, d, ok = rf.normalize_rays([[1, 1, 2]], [[0, 0, 2]])
    np.testing.assert_allclose(o, [[1, 1, 0]])
    np.testing.assert_allclose(d, [[0, 0, 1]])
    o, d, ok = rf.normalize_rays([[0.5, 0, 3]], [[1, 0, 2]])
    np.testing.assert_allclose(o, [[-1.0, 0, 0]])
    np.testing.assert_allclose(d, [[0.5, 0, 1]])
    _, _, ok = rf.normalize_rays([[0, 0, 0]], [[1, 0, -1]])
    assert not ok[0]


def test_query_sigma_nonnegative_and_zero_outside():
    f = random_field(0)
    pts = np.random.default_rng(1).uniform(-1.5, 4.5, (2000, 3))
    rgb, sigma = f.query(pts)
    assert np.all(sigma >= 0) and np.all((rgb > 0) & (rgb < 1))
    outside = np.any((pts < LO) | (pts > HI), axis=1)
    assert np.all(sigma[outside] == 0)


def test_vacuum_renders_black():
    f = rf.RadianceField(LO, HI, 8, sigma_init=-200.0)
    c, w = f.query(np.zeros((1, 3)))
    col, wts = rf.render_rays(f, np.zeros((4, 3)), np.tile([0, 0, 1.0], (4, 1)), 0.5, 3.5, 64)
    np.testing.assert_allclose(col, 0, atol=1e-12)
    np.testing.assert_allclose(wts, 0, atol=1e-12)


@pytest.mark.parametrize("sigma", [0.1, 0.7, 2.0, 6.0])
def test_homogeneous_medium_matches_closed_form(sigma):
    c = np.array([0.2, 0.5, 0.8])
    f = uniform_field(c, sigma)
    col, _ = rf.volume_render(f, (np.zeros(3), np.array([0, 0, 1.0])), rf.TrainConfig(), 0.5, 3.5)
    assert np.max(np.abs(col - homogeneous_color(c, sigma, 3.0))) < 1e-3
    # oblique ray: metric length grows by |d|
    d = np.array([0.2, 0.1, 1.0])
    col, _ = rf.volume_render(f, (np.zeros(3), d), rf.TrainConfig(), 0.5, 3.5)
    assert np.max(np.abs(col - homogeneous_color(c, sigma, 3.0 * np.linalg.norm(d)))) < 1e-3


def test_opaque_slab_concentrates_weight():
    res = 41
    params = np.zeros((res,) * 3 + (4,))
    params[..., 3] = -30.0
    zs = np.linspace(LO[2], HI[2], res)
    k = int(np.argmin(np.abs(zs - 2.5)))
    params[:, :, k, 3] = 300.0
    f = rf.RadianceField(LO, HI, res, params)
    near, far, S = 0.5, 3.5, 64
    _, w = rf.render_rays(f, np.zeros((1, 3)), np.array([[0, 0, 1.0]]), near, far, S)
    t = rf.sample_depths(near, far, S)
    spacing = (far - near) / S
    assert w.sum() > 0.99
    assert abs(t[np.argmax(w[0])] - zs[k]) <= spacing + (zs[1] - zs[0])


def test_weights_are_a_sub_partition_of_unity():
    rng = np.random.default_rng(0)
    f = random_field(3)
    f.params[..., 3] *= 4
    o, d = random_rays(rng, 20000)
    _, w = rf.render_rays(f, o, d, 0.2, 3.9, 64, jitter=rng.random((20000, 64)))
    assert np.all(w >= 0) and np.all(w.sum(axis=1) <= 1 + 1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_field_gradient_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    f = random_field(seed)
    o, d = random_rays(rng, 32)
    tgt = rng.random((32, 3))
    near, far, S = 0.2, 3.9, 32
    _, g, *_ = rf.loss_and_grad(f, o, d, tgt, near, far, S)
    touched = np.argwhere(np.abs(g) > 1e-6 * np.abs(g).max())
    pick = touched[rng.choice(len(touched), 20, replace=False)]
    h = 1e-4
    for idx in map(tuple, pick):
        old = f.params[idx]
        f.params[idx] = old + h
        lp = rf.loss_and_grad(f, o, d, tgt, near, far, S)[0]
        f.params[idx] = old - h
        lm = rf.loss_and_grad(f, o, d, tgt, near, far, S)[0]
        f.params[idx] = old
        num = (lp - lm) / (2 * h)
        assert abs(g[idx] - num) <= 1e-3 * abs(num) + 1e-12, idx


def test_ray_gradients_match_central_differences():
    rng = np.random.default_rng(5)
    f = random_field(5)
    o, d = random_rays(rng, 6)
    tgt = rng.random((6, 3))
    _, _, g_o, g_d, _ = rf.loss_and_grad(f, o, d, tgt, 0.2, 3.9, 32)
    h = 1e-6
    for arr, g in ((o, g_o), (d, g_d)):
        for i in range(6):
            for k in range(2):
                old = arr[i, k]
                arr[i, k] = old + h
                lp = rf.loss_and_grad(f, o, d, tgt, 0.2, 3.9, 32)[0]
                arr[i, k] = old - h
                lm = rf.loss_and_grad(f, o, d, tgt, 0.2, 3.9, 32)[0]
                arr[i, k] = old
                assert g[i, k] == pytest.approx((lp - lm) / (2 * h), rel=1e-3, abs=1e-9)


def test_tv_gradient():
    f = random_field(9, res=6)
    grad = np.zeros_like(f.params)
    loss = rf._tv(f.params, grad, 0.5)
    h = 1e-6
    idx = (2, 3, 1, 3)
    f.params[idx] += h
    lp = rf._tv(f.params, np.zeros_like(grad), 0.5)
    f.params[idx] -= 2 * h
    lm = rf._tv(f.params, np.zeros_like(grad), 0.5)
    assert grad[idx] == pytest.approx((lp - lm) / (2 * h), rel=1e-5)


def test_resampling_preserves_trilinear_values():
    f = random_field(4, res=5)
    g = f.resampled(9)  # 9 = 2*5-1: old lattice nodes are a subset of the new ones
    pts = np.random.default_rng(0).uniform(LO, HI, (200, 3))
    node = np.stack(np.meshgrid(*[np.linspace(LO[k], HI[k], 5) for k in range(3)], indexing="ij"), -1)
    np.testing.assert_allclose(g.raw_at(node.reshape(-1, 3)), f.params.reshape(-1, 4), atol=1e-12)
    assert g.raw_at(pts).shape == (200, 4)


def test_coarse_to_fine_schedule():
    cfg = rf.TrainConfig(grid_start=16, upsample_epochs=(40, 80), grid_resolution=64)
    assert [cfg.resolution_at(e) for e in (1, 40, 41, 80, 81, 3000)] == [16, 16, 32, 32, 64, 64]
    assert rf.TrainConfig(grid_start=None).resolution_at(1) == 64
    assert rf.TrainConfig(grid_resolution=8).resolution_at(1000) == 8


def test_config_round_trip_and_rejects_unknown_fields():
    cfg = rf.TrainConfig(pose_mode="oracle", total_epochs=7)
    assert rf.TrainConfig.from_dict(cfg.to_dict()) == cfg
    from totemcheck.schemas import SchemaError

    with pytest.raises(SchemaError, match="bogus"):
        rf.TrainConfig.from_dict({**cfg.to_dict(), "bogus": 1})
    with pytest.raises(ValueError):
        rf.TrainConfig(pose_mode="frozen")


def test_ray_drop_is_confined_to_the_rim():
    spec = simcam.default_scene()
    b = simcam.render(spec)
    lo, hi = scene_box(spec)
    kept = rf.preprocess_rays(spec.camera, spec.totems, b.totem_masks, b.image, lo, hi, 0.15)
    total = sum(int(m.mask.sum()) for m in b.totem_masks)
    assert 0 < total - len(kept) < 0.25 * total
    for j, (tot, m) in enumerate(zip(spec.totems, b.totem_masks)):
        v, u = np.nonzero(m.mask)
        keep = np.zeros(m.mask.shape, bool)
        pk = kept.pixels[kept.totem_ids == j]
        keep[pk[:, 1], pk[:, 0]] = True
        dropped = m.mask & ~keep
        dirs = spec.camera.directions(u + 0.5, v + 0.5)
        c = tot.center / np.linalg.norm(tot.center)
        r = np.arccos(np.clip(dirs @ c, -1, 1)) / math.asin(tot.radius / np.linalg.norm(tot.center))
        assert r[dropped[v, u]].min() > 0.7
    np.testing.assert_allclose(kept.dirs[:, 2], 1.0)
    np.testing.assert_allclose(kept.origins[:, 2], 0.0)


@pytest.fixture(scope="module")
def tiny_run():
    spec = simcam.random_scene(3, size=96)
    b = simcam.render(spec)
    lo, hi = scene_box(spec)
    rays = rf.preprocess_rays(spec.camera, spec.totems, b.totem_masks, b.image, lo, hi)
    return spec, b, rays, lo, hi


def test_training_is_deterministic_and_reduces_loss(tiny_run):
    spec, b, rays, lo, hi = tiny_run
    cfg = rf.TrainConfig(pose_mode="oracle", total_epochs=12, grid_resolution=16, grid_start=8,
                         upsample_epochs=(4,), batch_size=1024)
    r1 = rf.train(rays, spec.totems, b.totem_masks, spec.camera, cfg, lo, hi)
    r2 = rf.train(rays, spec.totems, b.totem_masks, spec.camera, cfg, lo, hi)
    assert np.array_equal(r1.field.params, r2.field.params)
    assert r1.history[-1]["L_rec"] < r1.history[0]["L_rec"]
    assert r1.field.resolution == 16


def test_joint_mode_moves_centers_only_after_warmup(tiny_run):
    spec, b, rays, lo, hi = tiny_run
    start = [t.moved(t.center + [0.01, 0.0, 0.02]) for t in spec.totems]
    seen = []
    cfg = rf.TrainConfig(pose_mode="joint", total_epochs=4, warmup_epochs=2, grid_resolution=8,
                         grid_start=None, batch_size=2048, lr_totem=1e-3)
    res = rf.train(rays, start, b.totem_masks, spec.camera, cfg, lo, hi,
                   callback=lambda rec, f, c: seen.append(c.copy()))
    base = np.array([t.center for t in start])
    assert np.array_equal(seen[1], base)
    assert not np.array_equal(res.centers, base)
    frozen = rf.train(rays, start, b.totem_masks, spec.camera,
                      rf.TrainConfig(pose_mode="init", total_epochs=3, grid_resolution=8,
                                     grid_start=None), lo, hi)
    assert np.array_equal(frozen.centers, base)


def test_rec_loss_at_centers_gradient_matches_differences(tiny_run):
    spec, b, rays, lo, hi = tiny_run
    cfg = rf.TrainConfig(pose_mode="oracle", total_epochs=8, grid_resolution=16, grid_start=None)
    res = rf.train(rays, spec.totems, b.totem_masks, spec.camera, cfg, lo, hi)
    sub = rays.subset(np.nonzero(rays.totem_ids == 1)[0])
    c0 = np.array([t.center for t in spec.totems])
    _, g = rf.rec_loss_at_centers(res.field, sub, spec.camera, c0, spec.totems, lo, hi, cfg,
                                  res.near, res.far)
    assert np.all(g[[0, 2, 3]] == 0)
    # rim rays have ray Jacobians of order 50, so the loss is only smooth at tiny steps
    h = 1e-7
    for k in range(3):
        e = np.zeros_like(c0)
        e[1, k] = h
        lp, _ = rf.rec_loss_at_centers(res.field, sub, spec.camera, c0 + e, spec.totems, lo, hi,
                                       cfg, res.near, res.far)
        lm, _ = rf.rec_loss_at_centers(res.field, sub, spec.camera, c0 - e, spec.totems, lo, hi,
                                       cfg, res.near, res.far)
        num = (lp - lm) / (2 * h)
        assert g[1, k] == pytest.approx(num, rel=0.02, abs=1e-3 * abs(g[1]).max())


def test_checkpoint_round_trip(tmp_path, tiny_run):
    spec, b, rays, lo, hi = tiny_run
    cfg = rf.TrainConfig(pose_mode="init", total_epochs=2, grid_resolution=8, grid_start=None)
    res = rf.train(rays, spec.totems, b.totem_masks, spec.camera, cfg, lo, hi)
    rf.save_checkpoint(tmp_path / "c.npz", res, cfg)
    f, centers, init, meta = rf.load_checkpoint(tmp_path / "c.npz")
    assert np.array_equal(f.params, res.field.params)
    assert rf.TrainConfig.from_dict(meta["config"]) == cfg
    assert meta["near"] == res.near

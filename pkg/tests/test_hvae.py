import numpy as np
import pytest

from hvcp import autodiff as ad
from hvcp.autodiff import Tensor
from hvcp.cpfield import latent_budget
from hvcp.encoder import FeatureVolume
from hvcp.hvae import (LOGVAR_CLAMP, AXES, Condition, GaussianParams, HvaeConfig, LevelConditioner,
                       LevelLatents, ModeError, axis_condition, complete, decode_factors, init_hvae,
                       kl_diag_gauss, level_conditioners, parent_window, root_layer, stochastic_layer)
from hvcp.nn import ParamStore, zero_layer

CFG = HvaeConfig(side=8, levels=3, channels=4, rank=2, d_z=3, global_dim=5, global_latent=6,
                 stoch_hidden=(8,), head_hidden=8)


def gauss(mu, log_var):
    return GaussianParams(Tensor(np.asarray(mu, float)), Tensor(np.asarray(log_var, float)))


def model(cfg=CFG, seed=0):
    store = ParamStore()
    init_hvae(cfg, np.random.default_rng(seed), store)
    return store


def condition(rng, cfg=CFG, full=False):
    n = cfg.side
    mask = np.ones((n, n, n)) if full else (rng.uniform(size=(n, n, n)) < 0.3).astype(float)
    data = rng.standard_normal((n, n, n, cfg.channels)) * mask[..., None]
    return Condition(Tensor(rng.standard_normal(cfg.global_dim)), FeatureVolume(Tensor(data), mask))


# KL


def test_kl_identical_is_zero():
    p = gauss([0.3, -1.0], [0.2, -0.5])
    assert abs(kl_diag_gauss(p, p).item()) < 1e-12


def test_kl_closed_forms():
    assert kl_diag_gauss(gauss([1.0], [0.0]), gauss([0.0], [0.0])).item() == pytest.approx(0.5, abs=1e-15)
    expect = (4 - 1 - np.log(4)) / 2
    assert kl_diag_gauss(gauss([0.0], [np.log(4)]), gauss([0.0], [0.0])).item() == pytest.approx(expect, rel=1e-14)
    assert expect == pytest.approx(0.806853, abs=1e-6)


def test_kl_nonnegative_random():
    rng = np.random.default_rng(1)
    for _ in range(50):
        q = gauss(rng.standard_normal(5), rng.uniform(-3, 3, 5))
        p = gauss(rng.standard_normal(5), rng.uniform(-3, 3, 5))
        assert kl_diag_gauss(q, p).item() >= 0


def test_logvar_clamped():
    raw = Tensor(np.array([[0.0, 0.0, 50.0, -50.0]]))
    g = GaussianParams.from_raw(raw, 2)
    np.testing.assert_array_equal(g.log_var.data, [[LOGVAR_CLAMP, -LOGVAR_CLAMP]])


# conditioning


def test_axis_condition_constant_volume():
    n = 8
    vol = FeatureVolume(Tensor(np.full((n, n, n, 3), 2.5)), np.ones((n, n, n)))
    for a in AXES:
        np.testing.assert_allclose(axis_condition(vol, 4, a).data, 2.5)


def test_axis_condition_empty_mask():
    n = 4
    vol = FeatureVolume(Tensor(np.ones((n, n, n, 2))), np.zeros((n, n, n)))
    np.testing.assert_array_equal(axis_condition(vol, 2, "y").data, 0.0)


def test_axis_condition_brute_force():
    rng = np.random.default_rng(2)
    n, cells = 8, 4
    mask = (rng.uniform(size=(n, n, n)) < 0.4).astype(float)
    data = rng.standard_normal((n, n, n, 3))
    vol = FeatureVolume(Tensor(data), mask)
    for ax, a in enumerate(AXES):
        expect = np.zeros((cells, 3))
        for c in range(cells):
            slabs = []
            for s in range(c * n // cells, (c + 1) * n // cells):
                total, count = np.zeros(3), 0.0
                for i in range(n):
                    for j in range(n):
                        idx = [i, j]
                        idx.insert(ax, s)
                        total += data[tuple(idx)] * mask[tuple(idx)]
                        count += mask[tuple(idx)]
                slabs.append(total / count if count else np.zeros(3))
            expect[c] = np.mean(slabs, axis=0)
        np.testing.assert_allclose(axis_condition(vol, cells, a).data, expect, rtol=1e-12, atol=1e-14)


# layers


def test_root_layer_degenerate_sigma():
    params = model()
    zero_layer(params, "root.prior.1")
    bias = np.zeros(3 * 2 * 2 * CFG.d_z).reshape(3, 2, 2 * CFG.d_z)
    bias[..., :CFG.d_z] = 0.7
    bias[..., CFG.d_z:] = -10.0
    params.set("root.prior.1.b", bias.reshape(-1))
    c = Tensor(np.random.default_rng(3).standard_normal(CFG.global_dim))
    lvl = root_layer(CFG, c, None, params, np.random.default_rng(4), "prior")
    for a in AXES:
        np.testing.assert_allclose(lvl.z[a].data, 0.7, atol=1e-2 * 0.7 + 1e-2)


def test_root_layer_deterministic_and_standardized():
    params = model()
    c = Tensor(np.random.default_rng(5).standard_normal(CFG.global_dim))
    a = root_layer(CFG, c, None, params, np.random.default_rng(6), "prior")
    b = root_layer(CFG, c, None, params, np.random.default_rng(6), "prior")
    assert all(a.z[k].data.tobytes() == b.z[k].data.tobytes() for k in AXES)
    g = a.prior["x"]
    rng = np.random.default_rng(7)
    draws = np.stack([g.sample(rng).data for _ in range(20000)])
    std = (draws - g.mu.data) / np.exp(0.5 * g.log_var.data)
    std = std.reshape(-1)
    assert len(std) >= 10**5
    assert abs(std.mean()) < 0.02 and abs(std.var() - 1) < 0.02


def test_parent_window():
    w = parent_window(8)
    np.testing.assert_array_equal(w[0], [0, 0, 1])
    np.testing.assert_array_equal(w[5], [1, 2, 3])
    np.testing.assert_array_equal(w[7], [2, 3, 3])


def _prev(rng, cells=2, dz=CFG.d_z):
    z = {a: Tensor(rng.standard_normal((cells, dz))) for a in AXES}
    return LevelLatents(cells, z, {})


def _cond(rng, cells, y=True):
    x = {a: Tensor(rng.standard_normal((cells, CFG.channels))) for a in AXES}
    return LevelConditioner(x, {a: Tensor(rng.standard_normal((cells, CFG.channels))) for a in AXES} if y else None)


def test_zero_residual_copies_parent():
    params = model()
    for a in AXES:
        zero_layer(params, f"lvl1.{a}.prior.1")
        b = np.zeros(2 * CFG.d_z)
        b[CFG.d_z:] = -10.0
        params.set(f"lvl1.{a}.prior.1.b", b)
    rng = np.random.default_rng(8)
    prev = _prev(rng)
    lvl = stochastic_layer(CFG, prev, _cond(rng, 4, y=False), 1, params, rng, "prior")
    for a in AXES:
        np.testing.assert_allclose(lvl.z[a].data, prev.z[a].data[[0, 0, 1, 1]], atol=0.03)


def test_prior_equals_posterior_when_y_path_is_zero():
    params = model()
    for a in AXES:
        for layer in ("0", "1"):
            src = params[f"lvl1.{a}.prior.{layer}.w"].data
            w = src.copy()
            if layer == "0":
                w = np.vstack([src, np.zeros((CFG.channels, src.shape[1]))])
            params.set(f"lvl1.{a}.post.{layer}.w", w)
            params.set(f"lvl1.{a}.post.{layer}.b", params[f"lvl1.{a}.prior.{layer}.b"].data)
    rng = np.random.default_rng(9)
    prev, cond = _prev(rng), _cond(rng, 4)
    cond = LevelConditioner(cond.x, cond.x)
    lvl = stochastic_layer(CFG, prev, cond, 1, params, rng, "posterior")
    for a in AXES:
        assert lvl.prior[a].mu.data.tobytes() == lvl.posterior[a].mu.data.tobytes()
        assert lvl.prior[a].log_var.data.tobytes() == lvl.posterior[a].log_var.data.tobytes()


def test_cell_locality():
    params = model()
    rng = np.random.default_rng(10)
    prev, cond = _prev(rng, cells=4), _cond(rng, 8, y=False)
    cfg = HvaeConfig(**{**CFG.__dict__, "levels": 2})
    base = stochastic_layer(cfg, prev, cond, 1, params, np.random.default_rng(0), "prior")
    # cell 0 sees parents {0, 0, 1}; perturbing parent 3 must not move it
    z = dict(prev.z)
    z["x"] = Tensor(prev.z["x"].data + np.array([[0], [0], [0], [1.0]]))
    moved = stochastic_layer(cfg, LevelLatents(4, z, {}), cond, 1, params, np.random.default_rng(0), "prior")
    np.testing.assert_array_equal(moved.prior["x"].mu.data[0], base.prior["x"].mu.data[0])
    assert not np.array_equal(moved.prior["x"].mu.data[7], base.prior["x"].mu.data[7])


def test_decode_factors_zero_and_shapes():
    params = model()
    z = {a: Tensor(np.zeros((CFG.side, CFG.d_z))) for a in AXES}
    for a in AXES:
        zero_layer(params, f"head.{a}.1")
    f = decode_factors(CFG, z, params)
    assert f.vx.shape == (CFG.side, CFG.rank, CFG.channels)
    assert all(np.all(t.data == 0) for t in (f.vx, f.vy, f.vz))


def test_decode_factors_default_shape():
    cfg = HvaeConfig()
    params = ParamStore()
    init_hvae(cfg, np.random.default_rng(0), params)
    z = {a: Tensor(np.ones((32, cfg.d_z))) for a in AXES}
    f = decode_factors(cfg, z, params)
    assert f.vx.shape == f.vy.shape == f.vz.shape == (32, 8, 32)


def test_decode_factors_permutation_equivariant():
    params = model()
    rng = np.random.default_rng(11)
    z = {a: Tensor(rng.standard_normal((CFG.side, CFG.d_z))) for a in AXES}
    perm = rng.permutation(CFG.side)
    f = decode_factors(CFG, z, params)
    g = decode_factors(CFG, {a: Tensor(z[a].data[perm]) for a in AXES}, params)
    np.testing.assert_array_equal(g.vy.data, f.vy.data[perm])


# full completion


def test_prior_samples_differ_and_have_no_kl():
    params = model()
    x = condition(np.random.default_rng(12))
    a = complete(CFG, x, None, params, np.random.default_rng(1), "prior")
    b = complete(CFG, x, None, params, np.random.default_rng(2), "prior")
    d = CFG.channels
    assert np.linalg.norm(a.field.data.data[..., :d] - b.field.data.data[..., :d]) > 1e-6
    assert a.kl.item() == 0.0


def test_posterior_mean_deterministic_and_kl_nonnegative():
    params = model()
    rng = np.random.default_rng(13)
    x, y = condition(rng), condition(rng, full=True)
    a = complete(CFG, x, y, params, np.random.default_rng(1), "posterior-mean")
    b = complete(CFG, x, y, params, np.random.default_rng(2), "posterior-mean")
    assert a.field.data.data.tobytes() == b.field.data.data.tobytes()
    assert a.kl.item() >= 0


def test_posterior_mode_needs_y():
    with pytest.raises(ModeError):
        complete(CFG, condition(np.random.default_rng(14)), None, model(), np.random.default_rng(0), "posterior")


def test_chain_structure():
    params = model()
    x = condition(np.random.default_rng(15))
    conds = level_conditioners(x.volume, None, CFG.level_sides)
    root = root_layer(CFG, x.code, None, params, np.random.default_rng(0), "prior")
    l1 = stochastic_layer(CFG, root, conds[1], 1, params, np.random.default_rng(1), "prior")
    l2 = stochastic_layer(CFG, l1, conds[2], 2, params, np.random.default_rng(2), "prior")
    bumped = LevelLatents(l1.cells, {a: ad.add(l1.z[a], 0.5) for a in AXES}, l1.prior)
    l2b = stochastic_layer(CFG, bumped, conds[2], 2, params, np.random.default_rng(2), "prior")
    assert not np.array_equal(l2b.z["x"].data, l2.z["x"].data)
    # level 2 sees the root only through level-1 latents
    other_root = root_layer(CFG, ad.mul(x.code, 3.0), None, params, np.random.default_rng(5), "prior")
    same_l1 = LevelLatents(l1.cells, l1.z, other_root.prior)
    l2c = stochastic_layer(CFG, same_l1, conds[2], 2, params, np.random.default_rng(2), "prior")
    assert all(l2c.z[a].data.tobytes() == l2.z[a].data.tobytes() for a in AXES)


def test_latent_cell_counts():
    cfg = HvaeConfig()
    assert cfg.level_sides == (4, 8, 16, 32)
    assert cfg.latent_cells == 180
    factored, _ = latent_budget((32, 32, 32), cfg.d_z)
    assert cfg.latent_cells * cfg.d_z == 180 * 16 and factored == 3 * 32 * cfg.d_z


@pytest.mark.parametrize("variant", ["hierarchical", "local", "global-factors", "global"])
def test_variants_complete(variant):
    cfg = HvaeConfig(**{**CFG.__dict__, "variant": variant})
    params = model(cfg)
    rng = np.random.default_rng(16)
    x, y = condition(rng), condition(rng, full=True)
    out = complete(cfg, x, y, params, np.random.default_rng(0), "posterior")
    assert np.isfinite(out.kl.item()) and out.kl.item() >= 0
    assert out.field.sample(np.zeros((2, 3))).shape[0] == 2

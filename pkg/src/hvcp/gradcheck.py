"""Finite-difference checks of every trainable component on a micro-sized model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .config import Config
from .cpfield import FactorSet, merge, reconstruct_volume, sample_feature
from .decoder import occupancy_logits
from .encoder import PointCloud, encode_global, encode_local
from .hvae import complete
from .model import Model
from .nn import ParamStore
from .train import TrainItem, item_loss

THRESHOLD = 1e-4
EPS = 1e-6

MICRO = Config(resolution=8, levels=3, channels=8, rank=2, d_z=4, global_dim=16, global_latent=8,
               encoder_hidden=16, global_hidden=32, stoch_hidden=(16, 16), head_hidden=16,
               decoder_hidden=32, batch_size=1, queries=32, iterations=1, warmup=1, lambda_max=0.1)


@dataclass
class CheckResult:
    component: str
    error: float
    entries: int

    @property
    def ok(self) -> bool:
        return self.error < THRESHOLD


def micro_item(rng: np.random.Generator, points: int = 48, queries: int = 32) -> TrainItem:
    """A small sphere-like item: surface points, a bottom partial and labelled queries."""
    v = rng.standard_normal((points, 3))
    nrm = v / np.linalg.norm(v, axis=1, keepdims=True)
    full = PointCloud(0.3 * nrm, nrm)
    part = full.subset(np.flatnonzero(full.positions[:, 2] < 0))
    q = rng.uniform(-0.5, 0.5, size=(queries, 3))
    occ = (np.linalg.norm(q, axis=1) <= 0.3).astype(np.float64)
    return TrainItem(part, full, q, occ)


def pick_entries(function: Callable[[Sequence[Tensor]], Tensor], values: Sequence[np.ndarray],
                 per_param: int | None = None, floor: float = 1e-6) -> list[tuple[int, int]]:
    """The ``per_param`` entries of each parameter with the largest analytic gradient.

    With ``per_param=None`` every entry whose gradient exceeds ``floor`` is kept.

    Entries with vanishing gradients only measure round-off of the central
    difference, so they are left out of the comparison.
    """
    leaves = [Tensor(v, requires_grad=True) for v in values]
    grads = ad.backward(function(leaves))
    picks = []
    for k, leaf in enumerate(leaves):
        g = np.abs(grads.get(leaf.node_id, np.zeros(leaf.shape))).reshape(-1)
        order = np.argsort(-g, kind="stable")[:per_param]
        picks += [(k, int(j)) for j in order if g[j] > floor]
    return picks


def _store(names: Sequence[str], leaves: Sequence[Tensor], base: ParamStore) -> ParamStore:
    params = dict(base.params)
    params.update(zip(names, leaves))
    return ParamStore(params)


def _check(component: str, function, names: Sequence[str], base: ParamStore, per_param: int) -> CheckResult:
    values = [base.params[n].data.copy() for n in names]

    def wrapped(leaves):
        return function(_store(names, leaves, base))

    picks = pick_entries(wrapped, values, per_param)
    return CheckResult(component, grad_check(wrapped, values, EPS, picks), len(picks))


def run_gradcheck(seed: int = 0, per_param: int = 3) -> list[CheckResult]:
    """Check encoders, CP field, HVAE, decoder and the full ELBO of the micro model."""
    rng = np.random.default_rng(seed)
    cfg = MICRO.replace(seed=seed)
    model = Model.create(cfg, seed)
    base = model.params
    item = micro_item(rng, queries=cfg.queries)
    hcfg = model.hvae
    names = list(base.params)
    results = []

    w_code = rng.standard_normal(cfg.global_dim)
    w_vol = rng.standard_normal((cfg.resolution,) * 3 + (cfg.channels,))

    def encoder_fn(p):
        code = encode_global(item.complete, p)
        vol = encode_local(item.complete, p, cfg.resolution, cfg.scatter)
        return ad.add(ad.sum_(ad.mul(code, w_code)), ad.sum_(ad.mul(vol.data, w_vol)))

    enc = [n for n in names if n.startswith("enc_")]
    results.append(_check("encoder", encoder_fn, enc, base, per_param))

    # CP reconstruction, merge and trilinear sampling on random factors
    n, d, r = cfg.resolution, cfg.channels, cfg.rank
    factor_names = ["f.x", "f.y", "f.z"]
    fstore = ParamStore({k: Tensor(rng.standard_normal((n, r, d))) for k in factor_names})
    fstore.params.update(base.params)
    partial_vol = encode_local(item.partial, base, n, cfg.scatter)
    partial_vol = type(partial_vol)(partial_vol.data.detach(), partial_vol.mask)
    w_feat = rng.standard_normal((len(item.queries), 2 * d + 1))

    def cp_fn(p):
        pred = reconstruct_volume(FactorSet(p["f.x"], p["f.y"], p["f.z"]))
        feats = sample_feature(merge(pred, partial_vol), item.queries)
        return ad.sum_(ad.mul(ad.tanh(feats), w_feat))

    results.append(_check("cpfield", cp_fn, factor_names, fstore, per_param))

    # hierarchical VAE: KL plus a random functional of the decoded factors
    x_cond = model.encode(item.partial)
    y_cond = model.encode(item.complete)
    w_f = [rng.standard_normal((n, r, d)) for _ in range(3)]

    def detach_cond(c):
        return type(c)(c.code.detach(), type(c.volume)(c.volume.data.detach(), c.volume.mask))

    xc, yc = detach_cond(x_cond), detach_cond(y_cond)

    def hvae_fn(p):
        out = complete(hcfg, xc, yc, p, np.random.default_rng(seed + 1), "posterior")
        total = out.kl
        for t, w in zip((out.factors.vx, out.factors.vy, out.factors.vz), w_f):
            total = ad.add(total, ad.sum_(ad.mul(t, w)))
        return total

    hv = [n for n in names if n.split(".")[0] in ("root", "head") or n.startswith("lvl")]
    results.append(_check("hvae", hvae_fn, hv, base, per_param))

    feats = Tensor(rng.standard_normal((len(item.queries), 2 * d + 1)))

    def decoder_fn(p):
        return ad.sum_(ad.mul(occupancy_logits(item.queries, feats, p), w_feat[:, 0]))

    dec = [n for n in names if n.startswith("dec.")]
    results.append(_check("decoder", decoder_fn, dec, base, per_param))

    def elbo_fn(p):
        m = Model(cfg, p)
        return item_loss(m, item, 0.1, np.random.default_rng(seed + 2)).loss

    results.append(_check("elbo", elbo_fn, names, base, per_param))
    return results

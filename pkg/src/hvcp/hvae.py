"""Hierarchical conditional VAE over axis-aligned latent sequences.

Latents live on three 1-D sequences (one per spatial axis) per level, with the
cell count doubling from level to level until it matches the feature-volume
side. Each cell of level ``i + 1`` is a Gaussian residual on its parent cell,
conditioned on a three-cell window of level ``i`` plus pooled features of the
observed (and, during training, complete) shape. The last level is decoded by
per-axis heads into the CP factors of the predicted feature volume.

Besides the full ``hierarchical`` model, three ablation variants are provided:
``local`` (only the last level, no global code), ``global-factors`` (one
global latent decoded into factors) and ``global`` (one global latent fed to
the implicit decoder directly, no feature volume).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .cpfield import FactorSet, MergedVolume, merge, reconstruct_volume
from .encoder import FeatureVolume
from .nn import MlpSpec, ParamStore, init_params, linear, mlp_forward

AXES = ("x", "y", "z")
VARIANTS = ("hierarchical", "local", "global-factors", "global")
MODES = ("prior", "posterior", "posterior-mean")
LOGVAR_CLAMP = 10.0


class ModeError(ValueError):
    pass


@dataclass(frozen=True)
class HvaeConfig:
    side: int = 32
    levels: int = 4
    channels: int = 32
    rank: int = 8
    d_z: int = 16
    global_dim: int = 128
    global_latent: int = 64
    stoch_hidden: tuple[int, ...] = (64, 64)
    head_hidden: int = 64
    variant: str = "hierarchical"
    share_axes: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.side % (2 ** (self.levels - 1)):
            raise ValueError(f"side {self.side} is not divisible by 2^(levels-1) = {2 ** (self.levels - 1)}")

    @property
    def level_sides(self) -> tuple[int, ...]:
        return tuple(self.side // 2 ** (self.levels - 1 - i) for i in range(self.levels))

    @property
    def latent_cells(self) -> int:
        """Stochastic latent cells across all levels and axes."""
        if self.variant == "hierarchical":
            return 3 * sum(self.level_sides)
        if self.variant == "local":
            return 3 * self.side
        return 1

    @property
    def latent_dims(self) -> int:
        if self.variant in ("global", "global-factors"):
            return self.global_latent
        return self.latent_cells * self.d_z

    def trunk(self, n_in: int, n_out: int) -> MlpSpec:
        return MlpSpec((n_in,) + tuple(self.stoch_hidden) + (n_out,), activation="tanh")

    def head(self) -> MlpSpec:
        return MlpSpec((self.d_z, self.head_hidden, self.rank * self.channels), activation="relu")

    def axis_key(self, axis: str) -> str:
        return "shared" if self.share_axes else axis


# ----------------------------------------------------------------------------
# Gaussians


@dataclass
class GaussianParams:
    mu: Tensor
    log_var: Tensor

    @classmethod
    def from_raw(cls, raw: Tensor, d_z: int) -> "GaussianParams":
        """Split the last axis ``[mu | log_var]`` and clamp the log-variance."""
        mu = raw[..., :d_z]
        log_var = ad.clip(raw[..., d_z:], -LOGVAR_CLAMP, LOGVAR_CLAMP)
        return cls(mu, log_var)

    def sample(self, rng: np.random.Generator) -> Tensor:
        eps = rng.standard_normal(self.mu.shape)
        return ad.add(self.mu, ad.mul(ad.exp(ad.mul(self.log_var, 0.5)), eps))


def kl_diag_gauss(q: GaussianParams, p: GaussianParams) -> Tensor:
    """Summed KL(q || p) between diagonal Gaussians."""
    if q.mu.shape != p.mu.shape or q.log_var.shape != p.log_var.shape:
        raise ShapeError("kl_diag_gauss", q.mu.shape, p.mu.shape)
    var_ratio = ad.exp(ad.sub(q.log_var, p.log_var))
    mean_term = ad.div(ad.square(ad.sub(q.mu, p.mu)), ad.exp(p.log_var))
    per_entry = ad.mul(ad.sub(ad.add(ad.sub(p.log_var, q.log_var), ad.add(var_ratio, mean_term)), 1.0), 0.5)
    return ad.sum_(per_entry)


# ----------------------------------------------------------------------------
# conditioning


@dataclass
class LevelConditioner:
    """Per-axis pooled features ``x[axis]`` of shape (n_i, d); ``y`` only in training."""

    x: dict[str, Tensor]
    y: dict[str, Tensor] | None = None


def slab_means(volume: FeatureVolume, axis: str) -> Tensor:
    """Mask-weighted mean over the two axes complementary to ``axis``: (side, d)."""
    a = AXES.index(axis)
    others = tuple(k for k in range(3) if k != a)
    counts = volume.mask.sum(axis=others)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    masked = ad.mul(volume.data, volume.mask[..., None])
    return ad.mul(ad.sum_(masked, others), inv[:, None])


def pool_to(slabs: Tensor, cells: int) -> Tensor:
    side, d = slabs.shape
    if cells < 1 or side % cells:
        raise ValueError(f"cannot pool {side} slabs into {cells} cells")
    return ad.mean(ad.reshape(slabs, (cells, side // cells, d)), axis=1)


def axis_condition(volume: FeatureVolume, cells: int, axis: str) -> Tensor:
    """Per-cell conditional features along ``axis`` at a level with ``cells`` cells."""
    return pool_to(slab_means(volume, axis), cells)


def level_conditioners(fx: FeatureVolume, fy: FeatureVolume | None, sides) -> list[LevelConditioner]:
    sx = {a: slab_means(fx, a) for a in AXES}
    sy = None if fy is None else {a: slab_means(fy, a) for a in AXES}
    out = []
    for n in sides:
        out.append(LevelConditioner(
            {a: pool_to(sx[a], n) for a in AXES},
            None if sy is None else {a: pool_to(sy[a], n) for a in AXES},
        ))
    return out


# ----------------------------------------------------------------------------
# latent hierarchy


@dataclass
class LevelLatents:
    cells: int
    z: dict[str, Tensor]
    prior: dict[str, GaussianParams]
    posterior: dict[str, GaussianParams] | None = None


@dataclass
class LatentHierarchy:
    levels: list[LevelLatents] = field(default_factory=list)

    def kl(self) -> Tensor:
        total = Tensor(0.0)
        for lvl in self.levels:
            if lvl.posterior is None:
                continue
            for a in lvl.prior:
                total = ad.add(total, kl_diag_gauss(lvl.posterior[a], lvl.prior[a]))
        return total

    @property
    def cell_count(self) -> int:
        return sum(lvl.cells * len(lvl.z) for lvl in self.levels)


def parent_window(cells: int) -> np.ndarray:
    """(cells, 3) parent indices ``{j//2 - 1, j//2, j//2 + 1}`` clamped to the coarse level."""
    coarse = max(cells // 2, 1)
    p = np.arange(cells) // 2
    return np.clip(np.stack([p - 1, p, p + 1], axis=1), 0, coarse - 1)


def _check_mode(mode: str, has_y: bool) -> None:
    if mode not in MODES:
        raise ModeError(f"unknown mode {mode!r}")
    if mode != "prior" and not has_y:
        raise ModeError(f"{mode} mode needs the complete-shape condition")


def _draw(prior: GaussianParams, post: GaussianParams | None, mode: str,
          rng: np.random.Generator) -> Tensor:
    if mode == "prior":
        return prior.sample(rng)
    if mode == "posterior":
        return post.sample(rng)
    return post.mu


def init_hvae(cfg: HvaeConfig, rng: np.random.Generator, store: ParamStore) -> None:
    d, dz = cfg.channels, cfg.d_z
    keys = ["shared"] if cfg.share_axes else list(AXES)
    if cfg.variant == "hierarchical":
        n1 = cfg.level_sides[0]
        init_params(cfg.trunk(cfg.global_dim, 3 * n1 * 2 * dz), rng, store, "root.prior")
        init_params(cfg.trunk(2 * cfg.global_dim, 3 * n1 * 2 * dz), rng, store, "root.post")
        for i in range(1, cfg.levels):
            for k in keys:
                init_params(cfg.trunk(3 * dz + d, 2 * dz), rng, store, f"lvl{i}.{k}.prior")
                init_params(cfg.trunk(3 * dz + 2 * d, 2 * dz), rng, store, f"lvl{i}.{k}.post")
    elif cfg.variant == "local":
        for k in keys:
            init_params(cfg.trunk(d, 2 * dz), rng, store, f"local.{k}.prior")
            init_params(cfg.trunk(2 * d, 2 * dz), rng, store, f"local.{k}.post")
    else:
        g = cfg.global_latent
        init_params(cfg.trunk(cfg.global_dim, 2 * g), rng, store, "glob.prior")
        init_params(cfg.trunk(2 * cfg.global_dim, 2 * g), rng, store, "glob.post")
        if cfg.variant == "global-factors":
            init_params(MlpSpec((g, 3 * cfg.side * dz)), rng, store, "glob.expand")
    if cfg.variant != "global":
        for k in keys:
            init_params(cfg.head(), rng, store, f"head.{k}")


def root_layer(cfg: HvaeConfig, c_x: Tensor, c_y: Tensor | None, params: ParamStore,
               rng: np.random.Generator, mode: str) -> LevelLatents:
    """Level-1 latents for all three axes from the global code(s)."""
    _check_mode(mode, c_y is not None)
    n1, dz = cfg.level_sides[0], cfg.d_z
    prior_raw = ad.reshape(mlp_forward(cfg.trunk(cfg.global_dim, 3 * n1 * 2 * dz), params,
                                       "root.prior", c_x), (3, n1, 2 * dz))
    post_raw = None
    if mode != "prior":
        cxy = ad.concat([c_x, c_y], axis=0)
        post_raw = ad.reshape(mlp_forward(cfg.trunk(2 * cfg.global_dim, 3 * n1 * 2 * dz), params,
                                          "root.post", cxy), (3, n1, 2 * dz))
    prior, post, z = {}, ({} if post_raw is not None else None), {}
    for k, a in enumerate(AXES):
        prior[a] = GaussianParams.from_raw(prior_raw[k], dz)
        if post is not None:
            post[a] = GaussianParams.from_raw(post_raw[k], dz)
        z[a] = _draw(prior[a], None if post is None else post[a], mode, rng)
    return LevelLatents(n1, z, prior, post)


def stochastic_layer(cfg: HvaeConfig, prev: LevelLatents, cond: LevelConditioner, level: int,
                     params: ParamStore, rng: np.random.Generator, mode: str) -> LevelLatents:
    """Latents of level ``level`` (0-based, >= 1) as residuals on their parents."""
    _check_mode(mode, cond.y is not None)
    cells = cfg.level_sides[level]
    dz, d = cfg.d_z, cfg.channels
    for a in AXES:
        if prev.z[a].shape[0] * 2 != cells or cond.x[a].shape[0] != cells:
            raise ShapeError(f"stochastic_layer level {level}", prev.z[a].shape, cond.x[a].shape)
    window = parent_window(cells)
    parent = np.arange(cells) // 2
    prior, post, z = {}, ({} if mode != "prior" else None), {}
    for a in AXES:
        key = cfg.axis_key(a)
        ctx = ad.reshape(ad.gather(prev.z[a], window), (cells, 3 * dz))
        raw_p = mlp_forward(cfg.trunk(3 * dz + d, 2 * dz), params, f"lvl{level}.{key}.prior",
                            ad.concat([ctx, cond.x[a]], axis=1))
        prior[a] = GaussianParams.from_raw(raw_p, dz)
        if post is not None:
            raw_q = mlp_forward(cfg.trunk(3 * dz + 2 * d, 2 * dz), params, f"lvl{level}.{key}.post",
                                ad.concat([ctx, cond.x[a], cond.y[a]], axis=1))
            post[a] = GaussianParams.from_raw(raw_q, dz)
        residual = _draw(prior[a], None if post is None else post[a], mode, rng)
        z[a] = ad.add(ad.gather(prev.z[a], parent), residual)
    return LevelLatents(cells, z, prior, post)


def local_layer(cfg: HvaeConfig, cond: LevelConditioner, params: ParamStore,
                rng: np.random.Generator, mode: str) -> LevelLatents:
    """Single last-level stochastic layer without a parent (``local`` ablation)."""
    _check_mode(mode, cond.y is not None)
    dz, d = cfg.d_z, cfg.channels
    prior, post, z = {}, ({} if mode != "prior" else None), {}
    for a in AXES:
        key = cfg.axis_key(a)
        prior[a] = GaussianParams.from_raw(
            mlp_forward(cfg.trunk(d, 2 * dz), params, f"local.{key}.prior", cond.x[a]), dz)
        if post is not None:
            post[a] = GaussianParams.from_raw(
                mlp_forward(cfg.trunk(2 * d, 2 * dz), params, f"local.{key}.post",
                            ad.concat([cond.x[a], cond.y[a]], axis=1)), dz)
        z[a] = _draw(prior[a], None if post is None else post[a], mode, rng)
    return LevelLatents(cfg.side, z, prior, post)


def global_layer(cfg: HvaeConfig, c_x: Tensor, c_y: Tensor | None, params: ParamStore,
                 rng: np.random.Generator, mode: str) -> LevelLatents:
    """One global latent vector (``global`` and ``global-factors`` ablations)."""
    _check_mode(mode, c_y is not None)
    g = cfg.global_latent
    prior = GaussianParams.from_raw(mlp_forward(cfg.trunk(cfg.global_dim, 2 * g), params,
                                                "glob.prior", c_x), g)
    post = None
    if mode != "prior":
        post = GaussianParams.from_raw(mlp_forward(cfg.trunk(2 * cfg.global_dim, 2 * g), params,
                                                   "glob.post", ad.concat([c_x, c_y], axis=0)), g)
    z = _draw(prior, post, mode, rng)
    return LevelLatents(1, {"g": z}, {"g": prior}, None if post is None else {"g": post})


def decode_factors(cfg: HvaeConfig, z_last: dict[str, Tensor], params: ParamStore) -> FactorSet:
    """Per-axis heads mapping each last-level cell latent to one factor row (R, d)."""
    rows = []
    for a in AXES:
        z = z_last[a]
        if z.ndim != 2 or z.shape[0] != cfg.side:
            raise ShapeError("decode_factors", z.shape, (cfg.side, cfg.d_z))
        out = mlp_forward(cfg.head(), params, f"head.{cfg.axis_key(a)}", z)
        rows.append(ad.reshape(out, (cfg.side, cfg.rank, cfg.channels)))
    return FactorSet(*rows)


# ----------------------------------------------------------------------------
# full completion


@dataclass
class Condition:
    """Encoded shape: global code and local feature volume."""

    code: Tensor
    volume: FeatureVolume


@dataclass
class GlobalField:
    """Feature provider for the ``global`` variant: one vector for every query."""

    vector: Tensor

    @property
    def channels(self) -> int:
        return self.vector.shape[0]

    def sample(self, queries: np.ndarray) -> Tensor:
        q = np.asarray(queries).reshape(-1, 3)
        return ad.broadcast_to(ad.reshape(self.vector, (1, -1)), (len(q), self.channels))


@dataclass
class Completion:
    field: MergedVolume | GlobalField
    kl: Tensor
    hierarchy: LatentHierarchy
    factors: FactorSet | None = None


def complete(cfg: HvaeConfig, x: Condition, y: Condition | None, params: ParamStore,
             rng: np.random.Generator, mode: str = "prior") -> Completion:
    """Complete the feature field of ``x``; ``y`` (the complete shape) for posterior modes."""
    _check_mode(mode, y is not None)
    use_y = mode != "prior"
    hier = LatentHierarchy()
    if cfg.variant == "hierarchical":
        conds = level_conditioners(x.volume, y.volume if use_y else None, cfg.level_sides)
        lvl = root_layer(cfg, x.code, y.code if use_y else None, params, rng, mode)
        hier.levels.append(lvl)
        for i in range(1, cfg.levels):
            lvl = stochastic_layer(cfg, lvl, conds[i], i, params, rng, mode)
            hier.levels.append(lvl)
        factors = decode_factors(cfg, lvl.z, params)
    elif cfg.variant == "local":
        cond = level_conditioners(x.volume, y.volume if use_y else None, (cfg.side,))[0]
        lvl = local_layer(cfg, cond, params, rng, mode)
        hier.levels.append(lvl)
        factors = decode_factors(cfg, lvl.z, params)
    else:
        lvl = global_layer(cfg, x.code, y.code if use_y else None, params, rng, mode)
        hier.levels.append(lvl)
        if cfg.variant == "global":
            vec = ad.concat([lvl.z["g"], x.code], axis=0)
            return Completion(GlobalField(vec), hier.kl(), hier)
        expanded = ad.reshape(linear(params, "glob.expand.0", lvl.z["g"]), (3, cfg.side, cfg.d_z))
        factors = decode_factors(cfg, {a: expanded[k] for k, a in enumerate(AXES)}, params)
    pred = reconstruct_volume(factors)
    return Completion(merge(pred, x.volume), hier.kl(), hier, factors)

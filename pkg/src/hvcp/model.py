"""The full completion model: encoders, hierarchical VAE and implicit decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import Config
from .decoder import DecoderConfig, evaluate, init_decoder, occupancy_grid, occupancy_logits
from .encoder import EncoderConfig, PointCloud, encode_global, encode_local, init_encoders
from .hvae import Completion, Condition, HvaeConfig, complete, init_hvae
from .nn import ParamStore

def hvae_config(cfg: Config) -> HvaeConfig:
    return HvaeConfig(side=cfg.resolution, levels=cfg.levels, channels=cfg.channels, rank=cfg.rank,
                      d_z=cfg.d_z, global_dim=cfg.global_dim, global_latent=cfg.global_latent,
                      stoch_hidden=tuple(cfg.stoch_hidden), head_hidden=cfg.head_hidden,
                      variant=cfg.variant, share_axes=cfg.share_axes)


def encoder_config(cfg: Config) -> EncoderConfig:
    return EncoderConfig(resolution=cfg.resolution, channels=cfg.channels, global_dim=cfg.global_dim,
                         hidden=cfg.encoder_hidden, global_hidden=cfg.global_hidden, scatter=cfg.scatter)


def decoder_config(cfg: Config) -> DecoderConfig:
    if cfg.variant == "global":
        feature = cfg.global_latent + cfg.global_dim
    else:
        feature = 2 * cfg.channels + 1
    return DecoderConfig(feature_dim=feature, hidden=cfg.decoder_hidden)


def is_posterior_param(name: str) -> bool:
    return ".post." in name


@dataclass
class Model:
    config: Config
    params: ParamStore

    @classmethod
    def create(cls, config: Config, seed: int | None = None) -> "Model":
        rng = np.random.default_rng(config.seed if seed is None else seed)
        store = ParamStore()
        init_encoders(encoder_config(config), rng, store)
        init_hvae(hvae_config(config), rng, store)
        init_decoder(decoder_config(config), rng, store)
        return cls(config, store)

    @property
    def hvae(self) -> HvaeConfig:
        return hvae_config(self.config)

    def has_posterior(self) -> bool:
        return any(is_posterior_param(n) for n in self.params)

    def encode(self, cloud: PointCloud) -> Condition:
        code = encode_global(cloud, self.params)
        volume = encode_local(cloud, self.params, self.config.resolution, self.config.scatter)
        return Condition(code, volume)

    def complete(self, partial: PointCloud, full: PointCloud | None, rng: np.random.Generator,
                 mode: str = "prior") -> Completion:
        x = self.encode(partial)
        y = None if full is None or mode == "prior" else self.encode(full)
        return complete(self.hvae, x, y, self.params, rng, mode)

    def logits(self, completion: Completion, queries: np.ndarray):
        return occupancy_logits(queries, completion.field.sample(queries), self.params)

    def probabilities(self, completion: Completion, queries: np.ndarray) -> np.ndarray:
        return evaluate(completion.field, queries, self.params)

    def grid(self, completion: Completion, side: int | None = None) -> np.ndarray:
        return occupancy_grid(completion.field, self.params, side or self.config.extract_side)

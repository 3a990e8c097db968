"""Local implicit occupancy decoder: (query, interpolated feature) -> probability."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MlpSpec, ParamStore, WidthError, init_params, linear

GRID_CHUNK = 32768


@dataclass(frozen=True)
class DecoderConfig:
    feature_dim: int = 65
    hidden: int = 128


def init_decoder(cfg: DecoderConfig, rng: np.random.Generator, store: ParamStore) -> None:
    n_in = 3 + cfg.feature_dim
    h = cfg.hidden
    init_params(MlpSpec((n_in, h)), rng, store, "dec.fc0")
    init_params(MlpSpec((h, h)), rng, store, "dec.fc1")
    init_params(MlpSpec((h, h)), rng, store, "dec.fc2")
    init_params(MlpSpec((h, 1)), rng, store, "dec.out")
    bound = np.sqrt(6.0 / (n_in + h))
    store.add("dec.skip.w", rng.uniform(-bound, bound, size=(n_in, h)))


def occupancy_logits(queries: np.ndarray, features: Tensor, params: ParamStore) -> Tensor:
    """Logits (Q,) from an MLP on ``[q | feature]`` with an input skip into layer 2."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if features.ndim != 2 or features.shape[0] != len(q):
        raise ad.ShapeError("occupancy", q.shape, features.shape)
    expected = params["dec.fc0.0.w"].shape[0] - 3
    if features.shape[1] != expected:
        raise WidthError(f"decoder expects {expected} feature channels, got {features.shape[1]}")
    x = ad.concat([Tensor(q), features], axis=1)
    h = ad.relu(linear(params, "dec.fc0.0", x))
    h = ad.relu(ad.add(linear(params, "dec.fc1.0", h), ad.matmul(x, params["dec.skip.w"])))
    h = ad.relu(linear(params, "dec.fc2.0", h))
    return ad.reshape(linear(params, "dec.out.0", h), (-1,))


def occupancy(queries: np.ndarray, features: Tensor, params: ParamStore) -> Tensor:
    return ad.logistic(occupancy_logits(queries, features, params))


def lattice(side: int) -> np.ndarray:
    """Cell centers of a ``side``^3 lattice over the unit cube, (side^3, 3), x slowest."""
    c = (np.arange(side) + 0.5) / side - 0.5
    return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1).reshape(-1, 3)


def evaluate(field, queries: np.ndarray, params: ParamStore, chunk: int = GRID_CHUNK) -> np.ndarray:
    """Occupancy probabilities at many points, chunked, without recording a graph."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    detached = _detached(field)
    frozen = _frozen(params)
    out = np.empty(len(q))
    for lo in range(0, len(q), chunk):
        part = q[lo:lo + chunk]
        out[lo:lo + chunk] = occupancy(part, detached.sample(part), frozen).data
    return out


def occupancy_grid(field, params: ParamStore, side: int) -> np.ndarray:
    """Probabilities on the ``side``^3 cell-center lattice, shape (side, side, side)."""
    if side < 2:
        raise ValueError("side must be >= 2")
    return evaluate(field, lattice(side), params).reshape(side, side, side)


def _detached(field):
    data_attr = "data" if hasattr(field, "data") else "vector"
    return replace(field, **{data_attr: getattr(field, data_attr).detach()})


def _frozen(params: ParamStore) -> ParamStore:
    return ParamStore({n: t.detach() for n, t in params.params.items()})

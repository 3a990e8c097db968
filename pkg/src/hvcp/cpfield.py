"""CP-factored feature volumes: reconstruction, merge with observed features, sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .encoder import FeatureVolume, OutsideCubeError


@dataclass
class FactorSet:
    """Axis factors ``vx`` (H,R,d), ``vy`` (W,R,d), ``vz`` (D,R,d)."""

    vx: Tensor
    vy: Tensor
    vz: Tensor

    def __post_init__(self):
        self.vx, self.vy, self.vz = (ad.as_tensor(v) for v in (self.vx, self.vy, self.vz))
        shapes = [v.shape for v in (self.vx, self.vy, self.vz)]
        if any(len(s) != 3 for s in shapes) or len({s[1:] for s in shapes}) != 1:
            raise ShapeError("FactorSet", *shapes)

    @property
    def rank(self) -> int:
        return self.vx.shape[1]

    @property
    def channels(self) -> int:
        return self.vx.shape[2]

    @property
    def resolution(self) -> tuple[int, int, int]:
        return (self.vx.shape[0], self.vy.shape[0], self.vz.shape[0])


def reconstruct_volume(factors: FactorSet) -> FeatureVolume:
    """``F[i,j,k,t] = sum_r vx[i,r,t] * vy[j,r,t] * vz[k,r,t]`` with a full mask."""
    data = ad.outer_contract(factors.vx, factors.vy, factors.vz)
    return FeatureVolume(data, np.ones(factors.resolution))


@dataclass
class MergedVolume:
    """Channels ``[predicted (d) | partial (d) | mask (1)]`` over an (H,W,D) grid."""

    data: Tensor
    pred_channels: int

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[:3])

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def partial_block(self) -> np.ndarray:
        d = self.pred_channels
        return self.data.data[..., d:2 * d]

    def sample(self, queries: np.ndarray) -> Tensor:
        return sample_feature(self, queries)


def merge(pred: FeatureVolume, partial: FeatureVolume) -> MergedVolume:
    if pred.resolution != partial.resolution:
        raise ShapeError("merge (resolution)", pred.resolution, partial.resolution)
    if pred.channels != partial.channels:
        raise ShapeError("merge (channels)", (pred.channels,), (partial.channels,))
    mask = Tensor(partial.mask[..., None])
    return MergedVolume(ad.concat([pred.data, partial.data, mask], axis=3), pred.channels)


def trilinear_stencil(queries: np.ndarray, resolution) -> tuple[np.ndarray, np.ndarray]:
    """Flat corner indices and weights (Q, 8) for voxel-center trilinear interpolation.

    Voxel centers sit at ``(i + 0.5) / n - 0.5``; queries beyond the outermost
    centers are clamped onto the border cell.
    """
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if np.any(np.abs(q) > 0.5):
        raise OutsideCubeError("query outside the unit cube")
    res = np.asarray(resolution, dtype=np.int64)
    u = np.clip((q + 0.5) * res - 0.5, 0.0, res - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), res - 2)
    t = u - i0
    idx = np.empty((len(q), 8), dtype=np.int64)
    w = np.empty((len(q), 8))
    for c in range(8):
        bits = np.array([(c >> 2) & 1, (c >> 1) & 1, c & 1])
        corner = i0 + bits
        idx[:, c] = (corner[:, 0] * res[1] + corner[:, 1]) * res[2] + corner[:, 2]
        w[:, c] = np.prod(np.where(bits == 1, t, 1.0 - t), axis=1)
    return idx, w


def sample_feature(volume: MergedVolume | FeatureVolume, queries: np.ndarray) -> Tensor:
    """Trilinearly interpolated features at query points, shape (Q, C)."""
    res = volume.resolution
    if min(res) < 2:
        raise ValueError("interpolation needs at least 2 cells per axis")
    idx, w = trilinear_stencil(queries, res)
    flat = ad.reshape(volume.data, (-1, volume.data.shape[3]))
    return ad.weighted_gather(flat, idx, w)


def latent_budget(resolution, d_z: int) -> tuple[int, int]:
    """Latent scalars for axis-factored vs dense per-voxel latents."""
    h, w, d = resolution
    return (h + w + d) * d_z, h * w * d * d_z

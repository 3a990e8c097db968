"""Completion sampling, posterior reconstruction and test-set evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import metrics
from .config import Config
from .decoder import lattice
from .encoder import PointCloud
from .meshing import TriMesh, marching_cubes, sample_mesh_surface
from .model import Model
from .shapes import Item, ShapeSpec, occupancy_oracle


class EmptyExtraction(RuntimeError):
    pass


class MissingPosterior(RuntimeError):
    pass


@dataclass
class Sample:
    mesh: TriMesh
    grid: np.ndarray


def extract(model: Model, completion, side: int | None = None, iso: float | None = None) -> Sample:
    grid = model.grid(completion, side or model.config.extract_side)
    return Sample(marching_cubes(grid, model.config.iso if iso is None else iso), grid)


def sample_completions(model: Model, partial: PointCloud, k: int, seed: int,
                       side: int | None = None) -> list[Sample]:
    """``k`` prior-mode completions; sample ``i`` uses generator seed ``seed + i``."""
    out = []
    for i in range(k):
        comp = model.complete(partial, None, np.random.default_rng(seed + i), "prior")
        out.append(extract(model, comp, side))
    return out


def reconstruct(model: Model, cloud: PointCloud, side: int | None = None) -> Sample:
    """Auto-encode a complete cloud with the posterior mean (no sampling)."""
    if not model.has_posterior():
        raise MissingPosterior("checkpoint has no posterior weights; reconstruction needs a model "
                               "saved with its posterior networks")
    comp = model.complete(cloud, cloud, np.random.default_rng(0), "posterior-mean")
    return extract(model, comp, side)


def mesh_cloud(sample: Sample, count: int, rng: np.random.Generator) -> PointCloud:
    if sample.mesh.is_empty:
        raise EmptyExtraction("extracted mesh is empty")
    return sample_mesh_surface(sample.mesh, count, rng)


def oracle_mesh(spec: ShapeSpec, side: int, iso: float = 0.5) -> TriMesh:
    grid = occupancy_oracle(spec, lattice(side)).reshape(side, side, side).astype(np.float64)
    return marching_cubes(grid, iso)


def completion_metrics(model: Model, partial: PointCloud, k: int, seed: int, cfg: Config | None = None,
                       side: int | None = None) -> tuple[dict, list[PointCloud]]:
    """UHD and TMD of ``k`` prior samples; also returns their surface clouds."""
    cfg = cfg or model.config
    samples = sample_completions(model, partial, k, seed, side)
    rng = np.random.default_rng(seed)
    clouds = [mesh_cloud(s, cfg.completion_points, rng) for s in samples]
    row = {"uhd": metrics.uhd(partial, clouds, cfg.uhd_mode)}
    row["tmd"] = metrics.tmd(clouds, cfg.tmd_mode) if k >= 2 else None
    return row, clouds


def reconstruction_metrics(model: Model, item: Item, seed: int, cfg: Config | None = None,
                           side: int | None = None) -> dict:
    """IoU, Chamfer-L1, normal consistency and F-score of the posterior-mean reconstruction."""
    cfg = cfg or model.config
    side = side or cfg.extract_side
    rec = reconstruct(model, item.partial, side)
    rng = np.random.default_rng(seed)
    cloud = mesh_cloud(rec, cfg.completion_points, rng)
    truth = oracle_mesh(item.spec, side, cfg.iso)
    return {
        "iou": metrics.volumetric_iou(item.spec, rec.grid, cfg.iou_samples, rng),
        "chamfer_l1": metrics.chamfer_l1(cloud, item.complete),
        "normal_consistency": metrics.normal_consistency(rec.mesh, truth, cfg.nc_samples, rng),
        "f_score": metrics.f_score(cloud, item.complete, cfg.fscore_tau),
    }


def evaluate_items(model: Model, items: Sequence[Item], k: int, seed: int, autoencode: bool,
                   cfg: Config | None = None) -> list[dict]:
    rows = []
    for idx, item in enumerate(items):
        row, _ = completion_metrics(model, item.partial, k, seed + 1000 * idx, cfg)
        row["item"] = idx
        if autoencode:
            row.update(reconstruction_metrics(model, item, seed + 1000 * idx, cfg))
        rows.append(row)
    return rows

"""Point-set, volumetric and surface metrics, each with a brute-force twin."""

from __future__ import annotations

import csv
import itertools
import logging
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .encoder import PointCloud
from .meshing import TriMesh, sample_mesh_surface
from .shapes import ShapeSpec, occupancy_oracle

log = logging.getLogger(__name__)

UHD_MODES = ("max-min", "mean-min")
TMD_MODES = ("pair-mean", "sum")


class EmptyInputError(ValueError):
    pass


def _points(x) -> np.ndarray:
    pts = x.positions if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyInputError("point set is empty")
    return pts


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))


def nearest(a, b, k: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """For each point of ``a`` the distance to and index of its nearest point in ``b``.

    A k-d tree proposes ``k`` candidates; their distances are then recomputed
    with the same formula as the brute-force twin and the smallest (lowest
    index on ties) is kept, so results match the O(nm) scan bit for bit.
    """
    a, b = _points(a), _points(b)
    k = min(k, len(b))
    _, cand = cKDTree(b).query(a, k=k)
    cand = cand.reshape(len(a), k)
    d = np.sqrt(((a[:, None, :] - b[cand]) ** 2).sum(axis=-1))
    order = np.lexsort((cand, d), axis=1)[:, 0] if k > 1 else np.zeros(len(a), dtype=np.int64)
    rows = np.arange(len(a))
    best_d, best_i = d[rows, order], cand[rows, order]
    return best_d, best_i


def nearest_brute(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _points(a), _points(b)
    d = _pairwise(a, b)
    idx = np.argmin(d, axis=1)
    return d[np.arange(len(a)), idx], idx


def chamfer_l1(a, b) -> float:
    """Symmetric mean nearest-neighbour Euclidean distance, halved."""
    return 0.5 * (float(nearest(a, b)[0].mean()) + float(nearest(b, a)[0].mean()))


def chamfer_l1_brute(a, b) -> float:
    d = _pairwise(_points(a), _points(b))
    return 0.5 * (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean()))


def uhd(partial, completions: Sequence, mode: str = "max-min") -> float:
    """Unidirectional Hausdorff distance from the partial input, averaged over completions."""
    if mode not in UHD_MODES:
        raise ValueError(f"uhd mode must be one of {UHD_MODES}")
    if len(completions) == 0:
        raise EmptyInputError("no completions")
    reduce = np.max if mode == "max-min" else np.mean
    return float(np.mean([reduce(nearest(partial, c)[0]) for c in completions]))


def uhd_brute(partial, completions: Sequence, mode: str = "max-min") -> float:
    if len(completions) == 0:
        raise EmptyInputError("no completions")
    p = _points(partial)
    total = []
    for c in completions:
        q = _points(c)
        mins = [min(float(np.sqrt(((pi - qj) ** 2).sum())) for qj in q) for pi in p]
        total.append(max(mins) if mode == "max-min" else float(np.mean(mins)))
    return float(np.mean(total))


def tmd(completions: Sequence, mode: str = "pair-mean") -> float:
    """Diversity of ``k >= 2`` completions.

    ``pair-mean`` averages Chamfer-L1 over the k(k-1)/2 unordered pairs;
    ``sum`` adds up, per completion, its mean distance to the others.
    """
    k = len(completions)
    if k < 2:
        raise ValueError("tmd needs at least two completions")
    if mode not in TMD_MODES:
        raise ValueError(f"tmd mode must be one of {TMD_MODES}")
    pair = {(i, j): chamfer_l1(completions[i], completions[j])
            for i, j in itertools.combinations(range(k), 2)}
    if mode == "pair-mean":
        return float(np.mean(list(pair.values())))
    return float(sum(sum(pair[tuple(sorted((i, j)))] for j in range(k) if j != i) / (k - 1)
                     for i in range(k)))


def f_score(predicted, truth, tau: float = 0.01) -> float:
    """Harmonic mean of precision and recall at distance ``tau`` (inclusive)."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    precision = float(np.mean(nearest(predicted, truth)[0] <= tau))
    recall = float(np.mean(nearest(truth, predicted)[0] <= tau))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def f_score_brute(predicted, truth, tau: float = 0.01) -> float:
    d = _pairwise(_points(predicted), _points(truth))
    precision = float(np.mean(d.min(axis=1) <= tau))
    recall = float(np.mean(d.min(axis=0) <= tau))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# ----------------------------------------------------------------------------
# volumetric IoU


def grid_lookup(grid: np.ndarray, threshold: float = 0.5) -> Callable[[np.ndarray], np.ndarray]:
    """Occupancy of points from a probability grid on the cell-center lattice (nearest cell)."""
    grid = np.asarray(grid)
    side = grid.shape[0]

    def inside(q: np.ndarray) -> np.ndarray:
        idx = np.clip(np.floor((q + 0.5) * side).astype(np.int64), 0, side - 1)
        return grid[idx[:, 0], idx[:, 1], idx[:, 2]] > threshold

    return inside


def _occupancy_fn(shape, threshold: float) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(shape, ShapeSpec):
        return lambda q: occupancy_oracle(shape, q).astype(bool)
    if callable(shape):
        return lambda q: np.asarray(shape(q)) > threshold
    return grid_lookup(shape, threshold)


def volumetric_iou(a, b, samples: int, rng: np.random.Generator, threshold: float = 0.5,
                   lo=(-0.5, -0.5, -0.5), hi=(0.5, 0.5, 0.5), chunk: int = 200_000) -> float:
    """Monte-Carlo IoU of two shapes given as specs, probability grids or callables.

    Points are uniform in the box ``[lo, hi]`` (the unit cube by default). Two
    empty shapes give 1.0 with a warning.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    fa, fb = _occupancy_fn(a, threshold), _occupancy_fn(b, threshold)
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    inter = union = 0
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        q = lo + (hi - lo) * rng.uniform(size=(n, 3))
        oa, ob = fa(q), fb(q)
        inter += int(np.sum(oa & ob))
        union += int(np.sum(oa | ob))
        done += n
    if union == 0:
        log.warning("both shapes are empty inside the sampled region; IoU defined as 1")
        return 1.0
    return inter / union


def grid_iou(a: np.ndarray, b: np.ndarray, threshold: float = 0.5) -> float:
    """Exact IoU over lattice cells of two equally sized grids."""
    oa, ob = np.asarray(a) > threshold, np.asarray(b) > threshold
    union = int(np.sum(oa | ob))
    if union == 0:
        log.warning("both grids are empty; IoU defined as 1")
        return 1.0
    return int(np.sum(oa & ob)) / union


# ----------------------------------------------------------------------------
# normal consistency


def normal_consistency(mesh_a: TriMesh, mesh_b: TriMesh, samples: int, rng: np.random.Generator) -> float:
    """Mean |cos| between sampled normals and those of their nearest neighbours, both directions."""
    ca = sample_mesh_surface(mesh_a, samples, rng)
    cb = sample_mesh_surface(mesh_b, samples, rng)
    return cloud_normal_consistency(ca, cb)


def cloud_normal_consistency(ca: PointCloud, cb: PointCloud) -> float:
    if ca.normals is None or cb.normals is None:
        raise ValueError("both clouds need normals")
    _, ab = nearest(ca, cb)
    _, ba = nearest(cb, ca)
    dot_ab = np.abs(np.einsum("ij,ij->i", ca.normals, cb.normals[ab]))
    dot_ba = np.abs(np.einsum("ij,ij->i", cb.normals, ca.normals[ba]))
    return 0.5 * (float(dot_ab.mean()) + float(dot_ba.mean()))


# ----------------------------------------------------------------------------
# reports

REPORT_COLUMNS = ["item", "uhd", "tmd", "iou", "chamfer_l1", "normal_consistency", "f_score"]


def write_report(rows: Sequence[dict], path) -> None:
    """Write per-item metric rows plus a ``mean`` row; missing metrics are left blank."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([row.get(c, "") if c == "item" else _fmt(row.get(c)) for c in REPORT_COLUMNS])
        summary = ["mean"]
        for c in REPORT_COLUMNS[1:]:
            vals = [row[c] for row in rows if row.get(c) is not None]
            summary.append(_fmt(float(np.mean(vals))) if vals else "")
        writer.writerow(summary)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def read_report(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

"""Point-cloud types, point cloud IO, and the global/local PointNet encoders."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MlpSpec, ParamStore, init_params, linear, mlp_forward

HALF = 0.5


class EmptyCloudError(ValueError):
    pass


class OutsideCubeError(ValueError):
    pass


@dataclass(frozen=True)
class PointCloud:
    positions: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "positions", pos)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if nrm.shape != pos.shape:
                raise ValueError("normals must match positions")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, index) -> "PointCloud":
        return PointCloud(self.positions[index],
                          None if self.normals is None else self.normals[index])

    def check_unit_cube(self) -> None:
        if len(self) == 0:
            raise EmptyCloudError("point cloud is empty")
        if np.any(np.abs(self.positions) > HALF):
            worst = float(np.abs(self.positions).max())
            raise OutsideCubeError(f"point outside the unit cube (|coord| = {worst:.6g} > 0.5)")


@dataclass
class FeatureVolume:
    """Dense (H, W, D, d) features plus an (H, W, D) occupancy-of-points mask."""

    data: Tensor
    mask: np.ndarray

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[:3])

    @property
    def channels(self) -> int:
        return self.data.shape[3]


@dataclass(frozen=True)
class EncoderConfig:
    resolution: int = 32
    channels: int = 32
    global_dim: int = 128
    hidden: int = 64
    global_hidden: int = 128
    scatter: str = "max"


def init_encoders(cfg: EncoderConfig, rng: np.random.Generator, store: ParamStore) -> None:
    init_params(MlpSpec((3, cfg.hidden, cfg.global_hidden)), rng, store, "enc_g.point")
    init_params(MlpSpec((cfg.global_hidden, cfg.global_dim)), rng, store, "enc_g.out")
    init_params(MlpSpec((3, cfg.hidden)), rng, store, "enc_l.fc0")
    init_params(MlpSpec((2 * cfg.hidden, cfg.channels)), rng, store, "enc_l.fc1")


def encode_global(cloud: PointCloud, params: ParamStore) -> Tensor:
    """Permutation-invariant global code: per-point MLP, max over points, affine."""
    if len(cloud) == 0:
        raise EmptyCloudError("cannot encode an empty point cloud")
    hidden = params["enc_g.point.0.w"].shape[1]
    width = params["enc_g.point.1.w"].shape[1]
    h = mlp_forward(MlpSpec((3, hidden, width), output_activation="relu"), params,
                    "enc_g.point", cloud.positions)
    pooled = ad.max_(h, axis=0)
    return linear(params, "enc_g.out.0", pooled)


def voxel_index(positions: np.ndarray, resolution) -> np.ndarray:
    """Per-axis voxel coordinates ``clamp(floor((p + 0.5) * n), 0, n - 1)``."""
    res = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,))
    idx = np.floor((np.asarray(positions) + HALF) * res).astype(np.int64)
    return np.clip(idx, 0, res - 1)


def flat_voxel_index(positions: np.ndarray, resolution) -> np.ndarray:
    h, w, d = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,))
    ijk = voxel_index(positions, (h, w, d))
    return (ijk[:, 0] * w + ijk[:, 1]) * d + ijk[:, 2]


def encode_local(cloud: PointCloud, params: ParamStore, resolution, scatter: str = "max") -> FeatureVolume:
    """Per-point features pooled into the voxels containing the points.

    The shallow point network has one local-pool feedback stage: first-layer
    features are pooled per voxel, broadcast back to the points of that voxel
    and concatenated before the second layer.
    """
    cloud.check_unit_cube()
    res = tuple(int(r) for r in np.broadcast_to(np.asarray(resolution), (3,)))
    if min(res) < 2:
        raise ValueError(f"resolution extents must be >= 2, got {res}")
    cells = res[0] * res[1] * res[2]
    vox = flat_voxel_index(cloud.positions, res)
    h = ad.relu(linear(params, "enc_l.fc0.0", cloud.positions))
    pooled = ad.scatter_reduce(h, vox, cells, scatter)
    h = ad.concat([h, ad.gather(pooled, vox)], axis=1)
    feat = linear(params, "enc_l.fc1.0", h)
    vol = ad.scatter_reduce(feat, vox, cells, scatter)
    mask = np.zeros(cells)
    mask[vox] = 1.0
    channels = feat.shape[1]
    return FeatureVolume(ad.reshape(vol, res + (channels,)), mask.reshape(res))


# ----------------------------------------------------------------------------
# point cloud files


def read_xyz(path) -> PointCloud:
    """ASCII ``x y z [nx ny nz]`` per line; blank lines and ``#`` comments skipped."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            rows.append([float(v) for v in line.split()])
    if not rows:
        raise EmptyCloudError(f"{path}: no points")
    widths = {len(r) for r in rows}
    if widths not in ({3}, {6}):
        raise ValueError(f"{path}: expected 3 or 6 columns per line, got {sorted(widths)}")
    arr = np.array(rows)
    return PointCloud(arr[:, :3], arr[:, 3:] if arr.shape[1] == 6 else None)


def write_xyz(cloud: PointCloud, path) -> None:
    arr = cloud.positions if cloud.normals is None else np.hstack([cloud.positions, cloud.normals])
    Path(path).write_text("".join(" ".join(repr(float(v)) for v in row) + "\n" for row in arr))


_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "char": "<i1", "int8": "<i1", "uchar": "<u1", "uint8": "<u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
}


def read_ply(path) -> PointCloud:
    """Binary little-endian PLY vertices with x/y/z and optional nx/ny/nz."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    header = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in [h.strip() for h in header]:
        raise ValueError(f"{path}: only binary_little_endian PLY is supported")
    count, fields, current = 0, [], None
    for line in header:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "element":
            current = tok[1]
            if current == "vertex":
                count = int(tok[2])
        elif tok[0] == "property" and current == "vertex":
            if tok[1] == "list":
                raise ValueError(f"{path}: list properties on vertices are not supported")
            fields.append((tok[2], _PLY_TYPES[tok[1]]))
    dtype = np.dtype(fields)
    verts = np.frombuffer(raw, dtype=dtype, count=count, offset=body_start)
    pos = np.stack([verts[c].astype(np.float64) for c in ("x", "y", "z")], axis=1)
    normals = None
    if all(c in dtype.names for c in ("nx", "ny", "nz")):
        normals = np.stack([verts[c].astype(np.float64) for c in ("nx", "ny", "nz")], axis=1)
    return PointCloud(pos, normals)


def write_ply(cloud: PointCloud, path) -> None:
    names = ["x", "y", "z"] + (["nx", "ny", "nz"] if cloud.normals is not None else [])
    header = "ply\nformat binary_little_endian 1.0\n"
    header += f"element vertex {len(cloud)}\n"
    header += "".join(f"property double {n}\n" for n in names) + "end_header\n"
    arr = cloud.positions if cloud.normals is None else np.hstack([cloud.positions, cloud.normals])
    Path(path).write_bytes(header.encode("ascii") + np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_cloud(path) -> PointCloud:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return read_ply(path)
    return read_xyz(path)

"""Parametric shapes with exact occupancy, surface samplers, partial views and datasets.

Every shape is a union of primitives (sphere, box, z-aligned cylinder and
capsule). The ``stool2mode`` family is a pedestal leg under either a ball
("round-top") or a square slab ("square-top"); the leg and the overall
z-extent do not depend on the mode, so the lower half of both modes is the
same surface.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import PointCloud

FAMILIES = ("sphere", "box", "cylinder", "capsule", "union2", "stool2mode")
PRIMITIVES = ("sphere", "box", "cylinder", "capsule")
TAGS = {name: k for k, name in enumerate(FAMILIES)}
N_PARAMS = {"sphere": 4, "box": 6, "cylinder": 5, "capsule": 5, "stool2mode": 4}
FIT = 0.45
STOOL_Z = 0.42
ROUND_TOP, SQUARE_TOP = 0.0, 1.0


class ShapeError(ValueError):
    pass


class ViewError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeSpec:
    family: str
    params: tuple[float, ...]

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ShapeError(f"unknown family {self.family!r}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))

    @property
    def tag(self) -> int:
        return TAGS[self.family]


def sphere(center, r) -> ShapeSpec:
    return ShapeSpec("sphere", (*center, r))


def box(center, half) -> ShapeSpec:
    return ShapeSpec("box", (*center, *half))


def cylinder(center, r, half_height) -> ShapeSpec:
    return ShapeSpec("cylinder", (*center, r, half_height))


def capsule(center, r, half_length) -> ShapeSpec:
    return ShapeSpec("capsule", (*center, r, half_length))


def union2(a: ShapeSpec, b: ShapeSpec) -> ShapeSpec:
    if a.family not in PRIMITIVES or b.family not in PRIMITIVES:
        raise ShapeError("union2 parts must be primitives")
    return ShapeSpec("union2", (a.tag, *a.params, b.tag, *b.params))


def stool(leg_radius: float, ball_radius: float, slab_half: float, mode: float) -> ShapeSpec:
    return ShapeSpec("stool2mode", (leg_radius, ball_radius, slab_half, mode))


def with_mode(spec: ShapeSpec, mode: float) -> ShapeSpec:
    if spec.family != "stool2mode":
        raise ShapeError("only stool2mode shapes have a mode")
    return ShapeSpec(spec.family, spec.params[:3] + (float(mode),))


def parts(spec: ShapeSpec) -> list[ShapeSpec]:
    """The primitives whose union is ``spec``."""
    if spec.family in PRIMITIVES:
        return [spec]
    if spec.family == "union2":
        p = spec.params
        fam_a = FAMILIES[int(p[0])]
        na = N_PARAMS[fam_a]
        fam_b = FAMILIES[int(p[1 + na])]
        return [ShapeSpec(fam_a, p[1:1 + na]), ShapeSpec(fam_b, p[2 + na:2 + na + N_PARAMS[fam_b]])]
    leg_r, ball_r, slab_half, mode = spec.params
    leg_top = STOOL_Z - ball_r
    leg = cylinder((0.0, 0.0, (leg_top - STOOL_Z) / 2), leg_r, (leg_top + STOOL_Z) / 2)
    if mode == ROUND_TOP:
        top = sphere((0.0, 0.0, leg_top), ball_r)
    else:
        thick = ball_r + 0.06
        top = box((0.0, 0.0, STOOL_Z - thick / 2), (slab_half, slab_half, thick / 2))
    return [leg, top]


def bounds(spec: ShapeSpec) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = [], []
    for p in parts(spec):
        c = np.array(p.params[:3])
        if p.family == "sphere":
            h = np.full(3, p.params[3])
        elif p.family == "box":
            h = np.array(p.params[3:6])
        elif p.family == "cylinder":
            h = np.array([p.params[3], p.params[3], p.params[4]])
        else:
            h = np.array([p.params[3], p.params[3], p.params[4] + p.params[3]])
        lo.append(c - h)
        hi.append(c + h)
    return np.min(lo, axis=0), np.max(hi, axis=0)


def validate(spec: ShapeSpec) -> None:
    lo, hi = bounds(spec)
    if np.any(lo <= -FIT) or np.any(hi >= FIT):
        raise ShapeError(f"{spec.family} does not fit strictly inside [-0.45, 0.45]^3")
    if spec.family == "stool2mode" and spec.params[3] not in (ROUND_TOP, SQUARE_TOP):
        raise ShapeError("stool2mode mode must be 0 (round-top) or 1 (square-top)")


# ----------------------------------------------------------------------------
# occupancy


def _primitive_inside(spec: ShapeSpec, q: np.ndarray) -> np.ndarray:
    p = spec.params
    d = q - np.array(p[:3])
    if spec.family == "sphere":
        return np.einsum("ij,ij->i", d, d) <= p[3] ** 2
    if spec.family == "box":
        return np.all(np.abs(d) <= np.array(p[3:6]), axis=1)
    radial = d[:, 0] ** 2 + d[:, 1] ** 2
    if spec.family == "cylinder":
        return (radial <= p[3] ** 2) & (np.abs(d[:, 2]) <= p[4])
    dz = np.abs(d[:, 2]) - p[4]
    dz = np.maximum(dz, 0.0)
    return radial + dz ** 2 <= p[3] ** 2


def occupancy_oracle(spec: ShapeSpec, q) -> np.ndarray:
    """1 inside or on the boundary, 0 outside; accepts one point or an (N, 3) array."""
    pts = np.asarray(q, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    inside = np.zeros(len(pts), dtype=bool)
    for part in parts(spec):
        inside |= _primitive_inside(part, pts)
    out = inside.astype(np.int64)
    return out[0] if single else out


# ----------------------------------------------------------------------------
# surface sampling


def surface_area(spec: ShapeSpec) -> float:
    """Total area of the primitives (before removing hidden parts)."""
    return float(sum(_primitive_area(p) for p in parts(spec)))


def _primitive_area(spec: ShapeSpec) -> float:
    p = spec.params
    if spec.family == "sphere":
        return 4 * np.pi * p[3] ** 2
    if spec.family == "box":
        hx, hy, hz = p[3:6]
        return 8 * (hx * hy + hy * hz + hx * hz)
    r, h = p[3], p[4]
    if spec.family == "cylinder":
        return 2 * np.pi * r * 2 * h + 2 * np.pi * r * r
    return 2 * np.pi * r * 2 * h + 4 * np.pi * r * r


def _unit_vectors(n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_primitive(spec: ShapeSpec, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    p = spec.params
    c = np.array(p[:3])
    if spec.family == "sphere":
        nrm = _unit_vectors(n, rng)
        return c + p[3] * nrm, nrm
    if spec.family == "box":
        h = np.array(p[3:6])
        face_area = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
        probs = np.repeat(face_area, 2) / (2 * face_area.sum())
        face = rng.choice(6, size=n, p=probs)
        axis, sign = face // 2, np.where(face % 2 == 0, -1.0, 1.0)
        local = rng.uniform(-1.0, 1.0, size=(n, 3)) * h
        local[np.arange(n), axis] = sign * h[axis]
        nrm = np.zeros((n, 3))
        nrm[np.arange(n), axis] = sign
        return c + local, nrm
    r, hh = p[3], p[4]
    side = 2 * np.pi * r * 2 * hh
    caps = 2 * np.pi * r * r if spec.family == "cylinder" else 4 * np.pi * r * r
    on_side = rng.uniform(size=n) < side / (side + caps)
    pos = np.empty((n, 3))
    nrm = np.empty((n, 3))
    k = int(on_side.sum())
    theta = rng.uniform(0, 2 * np.pi, size=k)
    nrm[on_side] = np.stack([np.cos(theta), np.sin(theta), np.zeros(k)], axis=1)
    pos[on_side] = c + r * nrm[on_side] + np.stack([np.zeros(k), np.zeros(k),
                                                    rng.uniform(-hh, hh, size=k)], axis=1)
    m = n - k
    if spec.family == "cylinder":
        top = rng.uniform(size=m) < 0.5
        rad = r * np.sqrt(rng.uniform(size=m))
        phi = rng.uniform(0, 2 * np.pi, size=m)
        sgn = np.where(top, 1.0, -1.0)
        pos[~on_side] = c + np.stack([rad * np.cos(phi), rad * np.sin(phi), sgn * hh], axis=1)
        nrm[~on_side] = np.stack([np.zeros(m), np.zeros(m), sgn], axis=1)
    else:
        u = _unit_vectors(m, rng)
        sgn = np.where(u[:, 2] >= 0, 1.0, -1.0)
        pos[~on_side] = c + r * u + np.stack([np.zeros(m), np.zeros(m), sgn * hh], axis=1)
        nrm[~on_side] = u
    return pos, nrm


def sample_surface(spec: ShapeSpec, count: int, rng: np.random.Generator) -> PointCloud:
    """Area-uniform points with analytic normals on the boundary of the union.

    Parts are sampled proportionally to their areas and points strictly hidden
    inside another part are rejected, which keeps the density uniform.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    prims = parts(spec)
    areas = np.array([_primitive_area(p) for p in prims])
    got_p, got_n, have = [], [], 0
    while have < count:
        batch = max(2 * (count - have), 64)
        which = rng.choice(len(prims), size=batch, p=areas / areas.sum())
        for k, prim in enumerate(prims):
            n = int((which == k).sum())
            if n == 0:
                continue
            pos, nrm = _sample_primitive(prim, n, rng)
            keep = np.ones(n, dtype=bool)
            for j, other in enumerate(prims):
                if j != k:
                    keep &= ~_primitive_inside(other, pos)
            got_p.append(pos[keep])
            got_n.append(nrm[keep])
            have += int(keep.sum())
    return PointCloud(np.concatenate(got_p)[:count], np.concatenate(got_n)[:count])


# ----------------------------------------------------------------------------
# partial views


def view_mask(positions: np.ndarray, mode: str, octant_cut: str = "quarter") -> np.ndarray:
    """Points kept by the ``bottom`` or ``octant`` protocol (cuts at bounding-box midpoints)."""
    pos = np.asarray(positions)
    mid = (pos.min(axis=0) + pos.max(axis=0)) / 2
    keep = pos[:, 2] < mid[2]
    if mode == "bottom":
        return keep
    if mode != "octant":
        raise ViewError(f"unknown partial-view mode {mode!r}")
    keep &= pos[:, 0] < mid[0]
    if octant_cut == "true":
        keep &= pos[:, 1] < mid[1]
    elif octant_cut != "quarter":
        raise ViewError(f"unknown octant cut {octant_cut!r}")
    return keep


def partial_view(cloud: PointCloud, mode: str, rng: np.random.Generator, count: int = 1024,
                 octant_cut: str = "quarter") -> PointCloud:
    """Keep the visible region and subsample exactly ``count`` points without replacement."""
    kept = np.flatnonzero(view_mask(cloud.positions, mode, octant_cut))
    if len(kept) < count:
        raise ViewError(f"kept region has {len(kept)} points, need {count}")
    pick = np.sort(rng.choice(kept, size=count, replace=False))
    return cloud.subset(pick)


# ----------------------------------------------------------------------------
# random shapes


def random_primitive(rng: np.random.Generator, family: str | None = None) -> ShapeSpec:
    family = family or PRIMITIVES[int(rng.integers(len(PRIMITIVES)))]
    if family == "sphere":
        r = rng.uniform(0.15, 0.4)
        return sphere(rng.uniform(-(0.44 - r), 0.44 - r, 3), r)
    if family == "box":
        h = rng.uniform(0.1, 0.35, 3)
        return box(rng.uniform(-(0.44 - h), 0.44 - h), h)
    r = rng.uniform(0.1, 0.3)
    if family == "cylinder":
        hh = rng.uniform(0.1, 0.35)
        ext = np.array([r, r, hh])
        return cylinder(rng.uniform(-(0.44 - ext), 0.44 - ext), r, hh)
    r = rng.uniform(0.08, 0.2)
    hh = rng.uniform(0.05, 0.44 - r - 0.05)
    ext = np.array([r, r, hh + r])
    return capsule(rng.uniform(-(0.44 - ext), 0.44 - ext), r, hh)


def random_shape(family: str, rng: np.random.Generator) -> ShapeSpec:
    if family in PRIMITIVES:
        spec = random_primitive(rng, family)
    elif family == "union2":
        spec = union2(random_primitive(rng), random_primitive(rng))
    elif family == "stool2mode":
        spec = stool(rng.uniform(0.10, 0.16), rng.uniform(0.15, 0.19), rng.uniform(0.26, 0.32),
                     float(rng.integers(2)))
    else:
        raise ShapeError(f"unknown family {family!r}")
    validate(spec)
    return spec


# ----------------------------------------------------------------------------
# datasets


class ManifestError(ValueError):
    pass


@dataclass
class DatasetManifest:
    seed: int = 0
    weights: dict[str, float] = field(default_factory=lambda: {"sphere": 1.0})
    train: int = 16
    val: int = 4
    test: int = 4
    partial_mode: str = "bottom"
    octant_cut: str = "quarter"
    complete_points: int = 2048
    partial_points: int = 1024
    query_points: int = 2048
    dense_points: int = 16384
    near_surface: float = 0.0
    near_sigma: float = 0.02
    pair_modes: bool = False

    def validate(self) -> None:
        if min(self.train, self.val, self.test) < 1:
            raise ManifestError("train, val and test counts must be > 0")
        if not self.weights or any(w < 0 for w in self.weights.values()):
            raise ManifestError("family weights must be non-negative and non-empty")
        unknown = set(self.weights) - set(FAMILIES)
        if unknown:
            raise ManifestError(f"unknown families in weights: {sorted(unknown)}")
        if abs(sum(self.weights.values()) - 1.0) > 1e-9:
            raise ManifestError(f"family weights must sum to 1 (got {sum(self.weights.values()):.6g})")
        if self.partial_mode not in ("bottom", "octant", "full"):
            raise ManifestError("partial_mode must be bottom, octant or full")
        if self.octant_cut not in ("quarter", "true"):
            raise ManifestError("octant_cut must be quarter or true")
        if min(self.complete_points, self.partial_points, self.query_points, self.dense_points) < 1:
            raise ManifestError("point counts must be positive")
        if not 0.0 <= self.near_surface <= 1.0:
            raise ManifestError("near_surface must be a fraction in [0, 1]")
        if not self.near_sigma > 0:
            raise ManifestError("near_sigma must be positive")

    def serialize(self) -> str:
        w = ",".join(f"{k}:{self.weights[k]!r}" for k in sorted(self.weights))
        rows = [("seed", self.seed), ("weights", w), ("train", self.train), ("val", self.val),
                ("test", self.test), ("partial_mode", self.partial_mode),
                ("octant_cut", self.octant_cut), ("complete_points", self.complete_points),
                ("partial_points", self.partial_points), ("query_points", self.query_points),
                ("dense_points", self.dense_points), ("near_surface", repr(self.near_surface)),
                ("near_sigma", repr(self.near_sigma)), ("pair_modes", str(self.pair_modes).lower())]
        return "".join(f"{k}={v}\n" for k, v in rows)

    @classmethod
    def parse(cls, text: str) -> "DatasetManifest":
        m = cls()
        ints = {"seed", "train", "val", "test", "complete_points", "partial_points", "query_points",
                "dense_points"}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ManifestError(f"line {lineno}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            try:
                if k in ints:
                    setattr(m, k, int(v))
                elif k == "weights":
                    m.weights = {a.strip(): float(b) for a, b in (e.split(":") for e in v.split(",") if e.strip())}
                elif k in ("near_surface", "near_sigma"):
                    setattr(m, k, float(v))
                elif k == "pair_modes":
                    if v not in ("true", "false"):
                        raise ValueError(v)
                    m.pair_modes = v == "true"
                elif k in ("partial_mode", "octant_cut"):
                    setattr(m, k, v)
                else:
                    raise ManifestError(f"line {lineno}: unknown key {k!r}")
            except ValueError as exc:
                if isinstance(exc, ManifestError):
                    raise
                raise ManifestError(f"line {lineno}: bad value for {k}: {v!r}") from None
        m.validate()
        return m


SPLITS = ("train", "val", "test")
ITEM_MAGIC = b"HVSD"


@dataclass
class Item:
    spec: ShapeSpec
    complete: PointCloud
    partial: PointCloud
    queries: np.ndarray
    occupancies: np.ndarray


def item_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLITS.index(split), index])


def dense_cloud(spec: ShapeSpec, manifest: DatasetManifest, rng: np.random.Generator) -> PointCloud:
    """Surface sample large enough for the partial view to keep ``partial_points``."""
    n = manifest.dense_points
    while True:
        cloud = sample_surface(spec, n, rng)
        if manifest.partial_mode == "full":
            return cloud
        if view_mask(cloud.positions, manifest.partial_mode, manifest.octant_cut).sum() >= manifest.partial_points:
            return cloud
        if n >= 1 << 22:
            raise ViewError("visible region too small even for a very dense sample")
        n *= 2


def _draw_shape(manifest: DatasetManifest, rng: np.random.Generator) -> ShapeSpec:
    fams = sorted(manifest.weights)
    probs = np.array([manifest.weights[f] for f in fams])
    return random_shape(fams[int(rng.choice(len(fams), p=probs / probs.sum()))], rng)


def make_item(manifest: DatasetManifest, split: str, index: int) -> tuple[Item, PointCloud]:
    """Generate one record; also returns the dense source cloud of both point sets."""
    rng = item_rng(manifest.seed, split, index)
    paired = manifest.pair_modes and split == "train" and index % 2 == 1
    if manifest.pair_modes and split == "train":
        # items 2k and 2k+1 share one shape; a two-mode shape gets the other mode in the odd item
        spec = _draw_shape(manifest, item_rng(manifest.seed, split, index - index % 2))
        if paired and spec.family == "stool2mode":
            spec = with_mode(spec, 1.0 - spec.params[3])
    else:
        spec = _draw_shape(manifest, rng)
    dense = dense_cloud(spec, manifest, rng)
    shared = None
    if paired and manifest.partial_mode != "full":
        # the views of a pair see the same bottom half, so the odd item reuses the even item's view
        shared = make_item(manifest, split, index - 1)[0].partial
        dense = PointCloud(np.concatenate([shared.positions, dense.positions]),
                           np.concatenate([shared.normals, dense.normals]))
    complete = dense.subset(np.sort(rng.choice(len(dense), manifest.complete_points, replace=False)))
    if shared is not None:
        partial = shared
    elif manifest.partial_mode == "full":
        partial = dense.subset(np.sort(rng.choice(len(dense), manifest.partial_points, replace=False)))
    else:
        partial = partial_view(dense, manifest.partial_mode, rng, manifest.partial_points,
                               manifest.octant_cut)
    near = int(round(manifest.near_surface * manifest.query_points))
    queries = rng.uniform(-0.5, 0.5, size=(manifest.query_points - near, 3))
    if near:
        # optional oversampling: jittered dense-surface points
        pick = dense.positions[rng.choice(len(dense), near)]
        jitter = rng.normal(0.0, manifest.near_sigma, size=(near, 3))
        queries = np.concatenate([queries, np.clip(pick + jitter, -0.5, 0.5)])
    occ = occupancy_oracle(spec, queries).astype(np.float64)
    return Item(spec, complete, partial, queries, occ), dense


def _array_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    rows, cols = arr.shape
    return struct.pack("<QQ", rows, cols) + arr.tobytes()


def encode_item(item: Item) -> bytes:
    spec = item.spec
    out = [ITEM_MAGIC, struct.pack("<BI", spec.tag, len(spec.params)),
           struct.pack(f"<{len(spec.params)}d", *spec.params)]
    for cloud in (item.complete, item.partial):
        out.append(_array_bytes(np.hstack([cloud.positions, cloud.normals])))
    out.append(_array_bytes(np.hstack([item.queries, item.occupancies[:, None]])))
    return b"".join(out)


def decode_item(data: bytes) -> Item:
    if data[:4] != ITEM_MAGIC:
        raise ValueError("bad item magic")
    pos = 4
    tag, n = struct.unpack_from("<BI", data, pos)
    pos += 5
    params = struct.unpack_from(f"<{n}d", data, pos)
    pos += 8 * n
    arrays = []
    for _ in range(3):
        rows, cols = struct.unpack_from("<QQ", data, pos)
        pos += 16
        arrays.append(np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy())
        pos += 8 * rows * cols
    if pos != len(data):
        raise ValueError("trailing bytes in item record")
    comp, part, qo = arrays
    return Item(ShapeSpec(FAMILIES[tag], params), PointCloud(comp[:, :3], comp[:, 3:]),
                PointCloud(part[:, :3], part[:, 3:]), qo[:, :3], qo[:, 3])


def make_dataset(manifest: DatasetManifest, out_dir) -> dict[str, int]:
    """Write ``manifest.txt`` and ``<split>/<index>.hvsd`` records; returns per-split counts."""
    manifest.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.txt").write_text(manifest.serialize())
    counts = {}
    for split in SPLITS:
        n = getattr(manifest, split)
        (out / split).mkdir(exist_ok=True)
        for i in range(n):
            item, _ = make_item(manifest, split, i)
            (out / split / f"{i:05d}.hvsd").write_bytes(encode_item(item))
        counts[split] = n
    return counts


def load_split(data_dir, split: str) -> list[Item]:
    files = sorted((Path(data_dir) / split).glob("*.hvsd"))
    return [decode_item(f.read_bytes()) for f in files]


def load_manifest(data_dir) -> DatasetManifest:
    return DatasetManifest.parse((Path(data_dir) / "manifest.txt").read_text())

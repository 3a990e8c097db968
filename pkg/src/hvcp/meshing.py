"""Marching cubes over occupancy grids, vertex normals, OBJ files and mesh sampling.

The 256-case triangle table is generated at import time instead of being
typed in. For every cube face the edge crossings are visited counter-clockwise
(seen from outside the cube); each crossing that enters the occupied region
is joined to the next one that leaves it. On an ambiguous face this keeps the
two occupied corners separated, and since neighbouring cubes see the same
pairing the surface has no cracks. Face segments chain into closed loops which
are triangulated with chords through the cube interior only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import PointCloud

log = logging.getLogger(__name__)

CORNERS = np.array([[c >> 2, (c >> 1) & 1, c & 1] for c in range(8)])
# edges as (corner a, corner b) with b = a + one unit step along ``axis``
EDGES = [(a, a | (1 << (2 - axis)), axis) for axis in range(3) for a in range(8) if not a & (1 << (2 - axis))]
EDGE_CORNERS = np.array([(a, b) for a, b, _ in EDGES])
EDGE_AXIS = np.array([axis for _, _, axis in EDGES])


def _edge_id(a: int, b: int) -> int:
    for k, (p, q, _) in enumerate(EDGES):
        if {p, q} == {a, b}:
            return k
    raise KeyError((a, b))


def _faces_ccw() -> list[list[int]]:
    """The six cube faces as corner cycles, counter-clockwise seen from outside."""
    faces = []
    for axis in range(3):
        for side in (0, 1):
            idx = [c for c in range(8) if CORNERS[c, axis] == side]
            pts = CORNERS[idx].astype(float)
            centre = pts.mean(axis=0)
            u, v = [a for a in range(3) if a != axis]
            ang = np.arctan2(pts[:, v] - centre[v], pts[:, u] - centre[u])
            cyc = [idx[k] for k in np.argsort(ang)]
            normal = np.zeros(3)
            normal[axis] = 1.0 if side else -1.0
            p = CORNERS[cyc].astype(float)
            if np.dot(np.cross(p[1] - p[0], p[2] - p[1]), normal) < 0:
                cyc = cyc[::-1]
            faces.append(cyc)
    return faces


def _case_loops(case: int, faces: list[list[int]]) -> list[list[int]]:
    inside = [(case >> c) & 1 for c in range(8)]
    succ = {}
    for cyc in faces:
        crossings = []
        for k in range(4):
            a, b = cyc[k], cyc[(k + 1) % 4]
            if inside[a] != inside[b]:
                crossings.append((_edge_id(a, b), inside[b]))
        for k, (edge, entering) in enumerate(crossings):
            if entering:
                succ[edge] = crossings[(k + 1) % len(crossings)][0]
    loops = []
    while succ:
        start = min(succ)
        loop = [start]
        nxt = succ.pop(start)
        while nxt != start:
            loop.append(nxt)
            nxt = succ.pop(nxt)
        loops.append(loop)
    return loops


def _on_common_face(e1: int, e2: int) -> bool:
    pts = CORNERS[list(EDGE_CORNERS[e1]) + list(EDGE_CORNERS[e2])]
    return bool(np.any(np.all(pts == pts[0], axis=0)))


def _triangulate(loop: list[int]) -> list[tuple[int, int, int]]:
    """Triangulate a crossing loop using only chords through the cube interior.

    A chord lying on a cube face would be emitted by the neighbouring cube as
    well and break the two-faces-per-edge property of closed surfaces.
    """
    def solve(idx):
        if len(idx) == 3:
            return [tuple(loop[i] for i in idx)]
        first, last = idx[0], idx[-1]
        for k in range(1, len(idx) - 1):
            mid = idx[k]
            chords = [(first, mid)] if k > 1 else []
            chords += [(mid, last)] if k < len(idx) - 2 else []
            if any(_on_common_face(loop[a], loop[b]) for a, b in chords):
                continue
            left = solve(idx[:k + 1]) if k > 1 else []
            right = solve(idx[k:]) if k < len(idx) - 2 else []
            if left is not None and right is not None:
                return left + [(loop[first], loop[mid], loop[last])] + right
        return None

    tris = solve(list(range(len(loop))))
    if tris is None:
        raise RuntimeError(f"no interior triangulation for loop {loop}")
    return tris


def _build_table() -> np.ndarray:
    faces = _faces_ccw()
    loops = [_case_loops(case, faces) for case in range(256)]
    # fix the winding so triangle normals point away from the occupied corners
    mid = CORNERS[EDGE_CORNERS].mean(axis=1).astype(float)
    tri = [loops[1][0][0], loops[1][0][1], loops[1][0][2]]
    n = np.cross(mid[tri[1]] - mid[tri[0]], mid[tri[2]] - mid[tri[0]])
    flip = np.dot(n, mid[tri[0]] - CORNERS[0]) < 0
    tris = []
    for case_loops in loops:
        out = []
        for loop in case_loops:
            if flip:
                loop = loop[::-1]
            out += _triangulate(loop)
        tris.append(out)
    width = max(len(t) for t in tris)
    table = np.full((256, width, 3), -1, dtype=np.int64)
    for case, t in enumerate(tris):
        if t:
            table[case, :len(t)] = t
    return table


TRI_TABLE = _build_table()


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None
    flagged: np.ndarray | None = None

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)


def lattice_frame(side: int) -> tuple[np.ndarray, float]:
    """Origin and spacing of the cell-center lattice of the unit cube."""
    h = 1.0 / side
    return np.full(3, -0.5 + 0.5 * h), h


def marching_cubes(grid: np.ndarray, iso: float = 0.5, origin=None, spacing=None) -> TriMesh:
    """Triangulate the ``iso`` level set of a ``side^3`` grid; values above ``iso`` are inside.

    Grid sample ``[i, j, k]`` sits at ``origin + spacing * (i, j, k)``; the
    default frame is the cell-center lattice of ``[-0.5, 0.5]^3``. Crossing
    points are linearly interpolated along edges and shared edges produce one
    welded vertex. Faces wind counter-clockwise around the outward normal.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or min(grid.shape) < 2:
        raise ValueError(f"grid must be 3-D with every side >= 2, got {grid.shape}")
    if not 0.0 < iso < 1.0:
        raise ValueError("iso must lie in (0, 1)")
    if origin is None or spacing is None:
        o, h = lattice_frame(grid.shape[0])
        origin = o if origin is None else origin
        spacing = h if spacing is None else spacing
    origin = np.asarray(origin, dtype=np.float64)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
    inside = grid > iso
    sx, sy, sz = grid.shape
    case = np.zeros((sx - 1, sy - 1, sz - 1), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(CORNERS):
        case |= inside[dx:sx - 1 + dx, dy:sy - 1 + dy, dz:sz - 1 + dz].astype(np.int64) << c
    cells = np.flatnonzero((case > 0) & (case < 255))
    if len(cells) == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))
    ci, cj, ck = np.unravel_index(cells, case.shape)
    local = TRI_TABLE[case.ravel()[cells]]
    valid = local[:, :, 0] >= 0
    cell_of = np.broadcast_to(np.arange(len(cells))[:, None], valid.shape)[valid]
    local = local[valid]
    # global edge id: lower corner of the edge in grid coordinates plus its axis
    a = EDGE_CORNERS[local, 0]
    gi = ci[cell_of][:, None] + CORNERS[a, 0]
    gj = cj[cell_of][:, None] + CORNERS[a, 1]
    gk = ck[cell_of][:, None] + CORNERS[a, 2]
    gid = ((gi * sy + gj) * sz + gk) * 3 + EDGE_AXIS[local]
    uniq, inverse = np.unique(gid.ravel(), return_inverse=True)
    axis = uniq % 3
    flat = uniq // 3
    p0 = np.stack(np.unravel_index(flat, grid.shape), axis=1)
    p1 = p0.copy()
    p1[np.arange(len(p1)), axis] += 1
    v0 = grid[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = grid[p1[:, 0], p1[:, 1], p1[:, 2]]
    t = (iso - v0) / (v1 - v0)
    pos = p0.astype(np.float64)
    pos[np.arange(len(pos)), axis] += t
    vertices = origin + spacing * pos
    faces = inverse.reshape(-1, 3)
    return vertex_normals(TriMesh(vertices, faces))


def face_normals(mesh: TriMesh) -> np.ndarray:
    """Unnormalized face normals (length = twice the triangle area)."""
    v = mesh.vertices[mesh.faces]
    return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])


def vertex_normals(mesh: TriMesh) -> TriMesh:
    """Area-weighted average of incident face normals.

    Vertices whose incident faces all have zero area get ``+z`` and are
    marked in ``flagged``.
    """
    acc = np.zeros_like(mesh.vertices)
    if len(mesh.faces):
        fn = face_normals(mesh)
        for k in range(3):
            np.add.at(acc, mesh.faces[:, k], fn)
    norm = np.linalg.norm(acc, axis=1)
    flagged = norm <= 1e-300
    if flagged.any():
        log.warning("%d vertices have no incident area; normal set to +z", int(flagged.sum()))
    out = np.zeros_like(acc)
    out[~flagged] = acc[~flagged] / norm[~flagged, None]
    out[flagged] = (0.0, 0.0, 1.0)
    return TriMesh(mesh.vertices, mesh.faces, out, flagged)


# ----------------------------------------------------------------------------
# topology utilities


def edges(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """Unique undirected edges and the number of faces using each."""
    e = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0, return_counts=True)


def is_watertight(mesh: TriMesh) -> bool:
    """Every edge is shared by exactly two faces."""
    if mesh.is_empty:
        return False
    _, counts = edges(mesh)
    return bool(np.all(counts == 2))


def euler_characteristic(mesh: TriMesh) -> int:
    uniq, _ = edges(mesh)
    return len(mesh.vertices) - len(uniq) + len(mesh.faces)


def is_consistently_oriented(mesh: TriMesh) -> bool:
    """Each directed edge appears at most once (neighbours traverse shared edges oppositely)."""
    e = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]])
    return len(np.unique(e, axis=0)) == len(e)


# ----------------------------------------------------------------------------
# OBJ files


def format_obj(mesh: TriMesh) -> str:
    if mesh.normals is None:
        mesh = vertex_normals(mesh)
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"vn {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.normals]
    lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in mesh.faces + 1]
    return "".join(line + "\n" for line in lines)


def export_obj(mesh: TriMesh, path) -> None:
    Path(path).write_text(format_obj(mesh))


def parse_obj(text: str) -> TriMesh:
    """Read ``v``, ``vn`` and triangular ``f`` records (``i``, ``i/j``, ``i//k`` or ``i/j/k``)."""
    verts, norms, faces = [], [], []
    for raw in text.splitlines():
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vn":
            norms.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            if len(idx) != 3:
                raise ValueError("only triangular faces are supported")
            faces.append(idx)
    normals = np.array(norms, dtype=np.float64).reshape(-1, 3) if norms else None
    return TriMesh(np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64), normals)


def load_obj(path) -> TriMesh:
    return parse_obj(Path(path).read_text())


# ----------------------------------------------------------------------------
# sampling


class EmptyMeshError(ValueError):
    pass


def sample_mesh_surface(mesh: TriMesh, count: int, rng: np.random.Generator,
                        return_faces: bool = False):
    """Area-uniform points on the mesh with barycentrically interpolated unit normals."""
    if mesh.is_empty:
        raise EmptyMeshError("cannot sample an empty mesh")
    if mesh.normals is None:
        mesh = vertex_normals(mesh)
    area = np.linalg.norm(face_normals(mesh), axis=1)
    if area.sum() <= 0:
        raise EmptyMeshError("mesh has zero total area")
    face = rng.choice(len(area), size=count, p=area / area.sum())
    r1 = np.sqrt(rng.uniform(size=count))
    r2 = rng.uniform(size=count)
    bary = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
    tri = mesh.faces[face]
    pos = np.einsum("nk,nkj->nj", bary, mesh.vertices[tri])
    nrm = np.einsum("nk,nkj->nj", bary, mesh.normals[tri])
    length = np.linalg.norm(nrm, axis=1, keepdims=True)
    fallback = face_normals(mesh)[face]
    fallback = fallback / np.maximum(np.linalg.norm(fallback, axis=1, keepdims=True), 1e-300)
    nrm = np.where(length > 1e-12, nrm / np.maximum(length, 1e-300), fallback)
    cloud = PointCloud(pos, nrm)
    return (cloud, face) if return_faces else cloud

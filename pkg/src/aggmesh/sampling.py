"""Quadric-error mesh decimation and the down/up-sampling matrices between levels.

``decimate`` greedily contracts mesh edges in order of quadric error,
``build_upsample`` records every discarded vertex in barycentric
coordinates of its nearest coarse triangle, and ``build_hierarchy`` chains
both over a vertex-count schedule.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .graph import (
    GraphError,
    Mesh,
    build_laplacian,
    canonical,
    read_off,
    read_sparse,
    rescale_laplacian,
    write_off,
    write_sparse,
)

SINGULAR_DET = 1e-12


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class SamplingPair:
    q_down: sp.csr_matrix  # m x n selection
    q_up: sp.csr_matrix  # n x m barycentric
    coarse_mesh: Mesh


@dataclass(frozen=True)
class Contraction:
    survivor: int
    removed: int
    cost: float


# -- quadrics ---------------------------------------------------------------
# A symmetric 4x4 quadric is stored as its 10 upper-triangle entries:
# (a11, a12, a13, a14, a22, a23, a24, a33, a34, a44)


def _face_quadrics(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    p0, p1, p2 = (vertices[faces[:, k]] for k in range(3))
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n, axis=1)
    ok = norm > 0
    n[ok] /= norm[ok, None]
    n[~ok] = 0.0
    d = -np.einsum("ij,ij->i", n, p0)
    plane = np.concatenate([n, d[:, None]], axis=1)
    iu = np.triu_indices(4)
    return (plane[:, :, None] * plane[:, None, :])[:, iu[0], iu[1]]


def vertex_quadrics(mesh: Mesh) -> np.ndarray:
    """Per-vertex sum of the plane quadrics of incident faces, ``N x 10``."""
    fq = _face_quadrics(mesh.vertices, mesh.faces)
    q = np.zeros((mesh.n_vertices, 10))
    for k in range(3):
        np.add.at(q, mesh.faces[:, k], fq)
    return q


def _qadd(a, b):
    return tuple(x + y for x, y in zip(a, b))


def _qeval(q, x, y, z) -> float:
    a11, a12, a13, a14, a22, a23, a24, a33, a34, a44 = q
    return (
        a11 * x * x + a22 * y * y + a33 * z * z
        + 2.0 * (a12 * x * y + a13 * x * z + a23 * y * z)
        + 2.0 * (a14 * x + a24 * y + a34 * z)
        + a44
    )


def _optimal(q, pi, pj):
    """Quadric minimiser, or the edge midpoint when the system is singular."""
    a11, a12, a13, a14, a22, a23, a24, a33, a34, _ = q
    c11 = a22 * a33 - a23 * a23
    c12 = a13 * a23 - a12 * a33
    c13 = a12 * a23 - a13 * a22
    det = a11 * c11 + a12 * c12 + a13 * c13
    if abs(det) < SINGULAR_DET:
        x, y, z = ((pi[k] + pj[k]) / 2.0 for k in range(3))
    else:
        c22 = a11 * a33 - a13 * a13
        c23 = a12 * a13 - a11 * a23
        c33 = a11 * a22 - a12 * a12
        bx, by, bz = -a14, -a24, -a34
        x = (c11 * bx + c12 * by + c13 * bz) / det
        y = (c12 * bx + c22 * by + c23 * bz) / det
        z = (c13 * bx + c23 * by + c33 * bz) / det
    return _qeval(q, x, y, z), (x, y, z)


# -- decimation -------------------------------------------------------------


class _Collapser:
    def __init__(self, mesh: Mesh):
        n = mesh.n_vertices
        self.pos = [tuple(map(float, p)) for p in mesh.vertices]
        self.quad = [tuple(map(float, q)) for q in vertex_quadrics(mesh)]
        self.faces = [list(map(int, f)) for f in mesh.faces]
        self.face_alive = [True] * len(self.faces)
        self.vfaces: list[set[int]] = [set() for _ in range(n)]
        for fi, f in enumerate(self.faces):
            for v in f:
                self.vfaces[v].add(fi)
        self.alive = [True] * n
        self.version = [0] * n
        self.blocked: list[set[int]] = [set() for _ in range(n)]
        self.heap: list = []
        self.has_boundary = self._any_boundary()

    def _any_boundary(self) -> bool:
        count: dict[tuple[int, int], int] = {}
        for f in self.faces:
            for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                key = (a, b) if a < b else (b, a)
                count[key] = count.get(key, 0) + 1
        return any(c == 1 for c in count.values())

    def neighbours(self, v: int) -> set[int]:
        out = set()
        for fi in self.vfaces[v]:
            out.update(self.faces[fi])
        out.discard(v)
        return out

    def edges(self):
        seen = set()
        for f in self.faces:
            for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                key = (a, b) if a < b else (b, a)
                if key not in seen:
                    seen.add(key)
                    yield key

    def push(self, i: int, j: int) -> None:
        if i > j:
            i, j = j, i
        cost, target = _optimal(_qadd(self.quad[i], self.quad[j]), self.pos[i], self.pos[j])
        heapq.heappush(self.heap, (cost, i, j, self.version[i], self.version[j], target))

    def _on_boundary(self, v: int) -> bool:
        for u in self.neighbours(v):
            shared = sum(1 for fi in self.vfaces[v] if u in self.faces[fi])
            if shared == 1:
                return True
        return False

    def collapsible(self, i: int, j: int) -> bool:
        shared = [fi for fi in self.vfaces[i] if j in self.faces[fi]]
        if not shared:
            return False
        opposite = {w for fi in shared for w in self.faces[fi] if w != i and w != j}
        if self.neighbours(i) & self.neighbours(j) != opposite:
            return False
        if self.has_boundary and len(shared) == 2:
            if self._on_boundary(i) and self._on_boundary(j):
                return False
        return True

    def collapse(self, i: int, j: int, target) -> None:
        """Merge ``j`` into ``i`` (``i < j``) and move ``i`` to ``target``."""
        for fi in sorted(self.vfaces[j]):
            f = self.faces[fi]
            if i in f:
                self.face_alive[fi] = False
                for u in f:
                    self.vfaces[u].discard(fi)
            else:
                f[f.index(j)] = i
                self.vfaces[i].add(fi)
        self.vfaces[j] = set()
        self.alive[j] = False
        self.pos[i] = target
        self.quad[i] = _qadd(self.quad[i], self.quad[j])
        self.version[i] += 1
        nbrs = self.neighbours(i)
        for k in sorted(nbrs):
            self.push(i, k)
        # link conditions around i may have changed; retry edges blocked there
        for k in sorted(nbrs | {i, j}):
            for m in sorted(self.blocked[k]):
                self.blocked[m].discard(k)
                if self.alive[k] and self.alive[m] and m != i and k != i:
                    self.push(k, m)
            self.blocked[k] = set()


def decimate(mesh: Mesh, target: int):
    """Greedy quadric-error edge collapse down to exactly ``target`` vertices.

    Returns ``(coarse_mesh, q_down, contractions)``. Equal costs are broken
    by the smaller vertex index, and the surviving vertex of a collapse is
    always the smaller original index, so ``q_down`` is fully deterministic.
    """
    n = mesh.n_vertices
    if not 4 <= target <= n:
        raise SamplingError(f"target {target} outside [4, {n}]")
    if len(mesh.faces) == 0:
        raise SamplingError("cannot decimate a mesh without faces")
    col = _Collapser(mesh)
    for i, j in col.edges():
        col.push(i, j)
    log: list[Contraction] = []
    remaining = n
    while remaining > target:
        if not col.heap:
            raise SamplingError(
                f"no valid contraction left at {remaining} vertices (target {target})"
            )
        cost, i, j, vi, vj, tgt = heapq.heappop(col.heap)
        if not (col.alive[i] and col.alive[j]):
            continue
        if col.version[i] != vi or col.version[j] != vj:
            continue
        if not col.collapsible(i, j):
            col.blocked[i].add(j)
            col.blocked[j].add(i)
            continue
        col.collapse(i, j, tgt)
        log.append(Contraction(i, j, float(cost)))
        remaining -= 1

    kept = np.flatnonzero(col.alive)
    remap = np.full(n, -1, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    faces = np.array(
        [col.faces[fi] for fi in range(len(col.faces)) if col.face_alive[fi]], dtype=np.int64
    ).reshape(-1, 3)
    coarse = Mesh(np.array([col.pos[k] for k in kept]), remap[faces])
    q_down = selection_matrix(kept, n)
    return coarse, q_down, log


def selection_matrix(kept, n: int) -> sp.csr_matrix:
    kept = np.asarray(kept, dtype=np.int64)
    m = len(kept)
    return canonical(sp.csr_matrix((np.ones(m), (np.arange(m), kept)), shape=(m, n)))


def kept_indices(q_down) -> np.ndarray:
    """Fine-vertex index selected by each row of a selection matrix."""
    q = canonical(q_down)
    counts = np.diff(q.indptr)
    if np.any(counts != 1) or np.any(q.data != 1.0):
        raise SamplingError("q_down rows must be one-hot")
    if len(np.unique(q.indices)) != len(q.indices):
        raise SamplingError("q_down selects a vertex twice")
    return q.indices.astype(np.int64)


# -- barycentric up-sampling -------------------------------------------------


def closest_point_barycentric(p, a, b, c):
    """Barycentric weights of the closest point on triangle ``abc`` to ``p``.

    Vectorised over leading axes. Returns ``(squared_distance, weights)``
    where ``weights[..., k]`` multiplies ``a``, ``b``, ``c``.
    """
    p, a, b, c = (np.asarray(t, dtype=np.float64) for t in (p, a, b, c))
    ab, ac, ap = b - a, c - a, p - a
    dot = lambda u, v: np.einsum("...i,...i->...", u, v)  # noqa: E731
    d1, d2 = dot(ab, ap), dot(ac, ap)
    bp = p - b
    d3, d4 = dot(ab, bp), dot(ac, bp)
    cp = p - c
    d5, d6 = dot(ab, cp), dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom

    zero = np.zeros_like(d1)
    one = np.ones_like(d1)
    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    wb = np.select(conds, [zero, one, t_ab, zero, zero, 1.0 - t_bc], v_in)
    wc = np.select(conds, [zero, zero, zero, one, t_ac, t_bc], w_in)
    bad = ~(np.isfinite(wb) & np.isfinite(wc))
    wb = np.where(bad, 0.0, wb)
    wc = np.where(bad, 0.0, wc)
    w = np.stack([1.0 - wb - wc, wb, wc], axis=-1)
    w = np.clip(w, 0.0, 1.0)
    w /= w.sum(axis=-1, keepdims=True)
    q = w[..., 0:1] * a + w[..., 1:2] * b + w[..., 2:3] * c
    return dot(p - q, p - q), w


def nearest_triangles(points, mesh: Mesh):
    """Nearest triangle of ``mesh`` for each point (ties to the lowest face index).

    A centroid k-d tree prunes the search; the pruning radius is exact so
    the answer equals an exhaustive scan over all faces.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    v, f = mesh.vertices, mesh.faces
    if len(f) == 0:
        raise SamplingError("coarse mesh has no faces")
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3))
    tri = v[f]
    cent = tri.mean(axis=1)
    rmax = float(np.max(np.linalg.norm(tri - cent[:, None, :], axis=2)))
    tree = cKDTree(cent)
    _, first = tree.query(points)
    d0, _ = closest_point_barycentric(points, *(tri[first, k] for k in range(3)))
    radius = np.sqrt(d0) * (1.0 + 1e-9) + rmax + 1e-12
    balls = tree.query_ball_point(points, radius)
    pidx = np.concatenate([np.full(len(b), i, dtype=np.int64) for i, b in enumerate(balls)])
    fidx = np.concatenate([np.asarray(b, dtype=np.int64) for b in balls])
    d2, w = closest_point_barycentric(points[pidx], *(tri[fidx, k] for k in range(3)))
    order = np.lexsort((fidx, d2, pidx))
    pidx, fidx, w = pidx[order], fidx[order], w[order]
    first_of = np.flatnonzero(np.r_[True, pidx[1:] != pidx[:-1]])
    return fidx[first_of], w[first_of]


def build_upsample(fine: Mesh, coarse: Mesh, q_down) -> sp.csr_matrix:
    """Barycentric up-sampling matrix ``Q_u`` (``n_fine x n_coarse``)."""
    kept = kept_indices(q_down)
    n, m = fine.n_vertices, coarse.n_vertices
    if q_down.shape != (m, n):
        raise SamplingError(f"q_down shape {q_down.shape} does not match ({m}, {n})")
    if len(coarse.faces) == 0:
        raise SamplingError("coarse mesh has no faces")
    dropped = np.setdiff1d(np.arange(n), kept)
    rows = [kept]
    cols = [np.arange(m)]
    vals = [np.ones(m)]
    if len(dropped):
        face, w = nearest_triangles(fine.vertices[dropped], coarse)
        rows.append(np.repeat(dropped, 3))
        cols.append(coarse.faces[face].ravel())
        vals.append(w.ravel())
    q = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, m)
    )
    return canonical(q)


# -- hierarchy --------------------------------------------------------------


@dataclass(frozen=True)
class MeshHierarchy:
    levels: list[Mesh]
    pairs: list[SamplingPair]
    laplacians: list[sp.csr_matrix]
    lambda_max: list[float]

    @property
    def counts(self) -> list[int]:
        return [m.n_vertices for m in self.levels]


def _level_laplacian(mesh: Mesh):
    lap = build_laplacian(mesh.adjacency)
    return rescale_laplacian(lap), lap.lambda_max


def build_hierarchy(mesh: Mesh, schedule) -> MeshHierarchy:
    """Decimate ``mesh`` through ``schedule`` (finest first) and cache Laplacians."""
    schedule = [int(s) for s in schedule]
    if not schedule or schedule[0] != mesh.n_vertices:
        raise SamplingError(f"schedule must start at the mesh vertex count {mesh.n_vertices}")
    if any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise SamplingError(f"schedule must be strictly decreasing: {schedule}")
    levels = [mesh]
    pairs = []
    for count in schedule[1:]:
        fine = levels[-1]
        coarse, q_down, _ = decimate(fine, count)
        pairs.append(SamplingPair(q_down, build_upsample(fine, coarse, q_down), coarse))
        levels.append(coarse)
    laps, lmax = zip(*(_level_laplacian(m) for m in levels))
    return MeshHierarchy(levels, pairs, list(laps), list(lmax))


def save_hierarchy(h: MeshHierarchy, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"counts": h.counts, "lambda_max": h.lambda_max, "levels": [], "pairs": []}
    for k, (mesh, lap) in enumerate(zip(h.levels, h.laplacians)):
        write_off(mesh, out / f"level_{k}.off")
        write_sparse(lap, out / f"laplacian_{k}.spm")
        manifest["levels"].append({"mesh": f"level_{k}.off", "laplacian": f"laplacian_{k}.spm"})
    for k, pair in enumerate(h.pairs):
        write_sparse(pair.q_down, out / f"q_down_{k}.spm")
        write_sparse(pair.q_up, out / f"q_up_{k}.spm")
        manifest["pairs"].append({"q_down": f"q_down_{k}.spm", "q_up": f"q_up_{k}.spm"})
    (out / "hierarchy.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def load_hierarchy(path) -> MeshHierarchy:
    root = Path(path)
    if root.is_dir():
        root = root / "hierarchy.json"
    try:
        manifest = json.loads(root.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SamplingError(f"cannot read hierarchy manifest {root}: {exc}") from exc
    base = root.parent
    levels = [read_off(base / lv["mesh"]) for lv in manifest["levels"]]
    laps = [read_sparse(base / lv["laplacian"]) for lv in manifest["levels"]]
    pairs = [
        SamplingPair(read_sparse(base / p["q_down"]), read_sparse(base / p["q_up"]), levels[k + 1])
        for k, p in enumerate(manifest["pairs"])
    ]
    h = MeshHierarchy(levels, pairs, laps, [float(x) for x in manifest["lambda_max"]])
    if h.counts != manifest["counts"]:
        raise GraphError("hierarchy manifest counts do not match the level meshes")
    return h

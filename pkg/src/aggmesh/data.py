"""Synthetic image/mesh pairs: template deformation, depth rasterisation,
similarity augmentation and on-disk sample formats (PPM, VTX1, JSON).

Coordinates live in a normalised frame where the image spans ``[-1, 1]`` in
x and y. Pixel ``(row r, col c)`` has its centre at
``(x, y) = (-1 + (2c + 1) / size, -1 + (2r + 1) / size)``; larger z is nearer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse.linalg as spla

from .engine import SeededRNG
from .graph import Mesh, build_laplacian
from .sampling import SamplingError

N_LANDMARKS = 68


class DataError(ValueError):
    pass


@dataclass
class SampleRecord:
    image: np.ndarray  # H x W x 3 in [0, 1]
    gt_vertices: np.ndarray  # N x 3
    landmark_indices: list[int] | None = None
    yaw_degrees: float | None = None

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != self.image.shape[1] or self.image.shape[2] != 3:
            raise DataError(f"image must be square H x W x 3, got {self.image.shape}")
        if self.gt_vertices.ndim != 2 or self.gt_vertices.shape[1] != 3:
            raise DataError("gt_vertices must be N x 3")


@dataclass(frozen=True)
class DeformSpec:
    basis_count: int = 8
    coeff_range: float = 0.15
    max_yaw: float = 0.0


def smooth_basis(template: Mesh, count: int) -> np.ndarray:
    """``count`` low-frequency Laplacian eigenvectors (constant one skipped),
    each scaled to unit max-abs, as an ``N x count`` array."""
    lap = build_laplacian(template.adjacency).matrix
    n = template.n_vertices
    if count + 1 >= n:
        raise DataError("too many basis fields for the template size")
    if n <= 512:
        vals, vecs = np.linalg.eigh(lap.toarray())
    else:
        v0 = np.ones(n) / np.sqrt(n)
        vals, vecs = spla.eigsh(lap, k=count + 1, sigma=-1e-3, which="LM", v0=v0)
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
    basis = vecs[:, 1:count + 1]
    # fix each vector's sign so the largest-magnitude entry is positive
    pivot = basis[np.argmax(np.abs(basis), axis=0), np.arange(count)]
    basis = basis * np.sign(pivot)
    return basis / np.abs(basis).max(axis=0)


def vertex_normals(mesh: Mesh) -> np.ndarray:
    v, f = mesh.vertices, mesh.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    n = np.zeros_like(v)
    for k in range(3):
        np.add.at(n, f[:, k], fn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)


def default_landmarks(n_vertices: int, count: int = N_LANDMARKS) -> list[int]:
    return [int(i) for i in np.linspace(0, n_vertices - 1, min(count, n_vertices)).round()]


def _yaw_matrix(deg: float) -> np.ndarray:
    t = np.deg2rad(deg)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def synth_dataset(template: Mesh, spec: DeformSpec, count: int, seed: int,
                  image_size: int = 64) -> list[SampleRecord]:
    """Deform ``template`` along smooth radial fields and render depth images.

    Sample ``k`` draws from ``SeededRNG(seed).split(k)``, so each record is
    independent of generation order.
    """
    if count < 1:
        raise DataError("count must be >= 1")
    basis = smooth_basis(template, spec.basis_count) if spec.basis_count else np.zeros((template.n_vertices, 0))
    normals = vertex_normals(template)
    landmarks = default_landmarks(template.n_vertices)
    root = SeededRNG(seed)
    out = []
    for k in range(count):
        rng = root.split(k)
        for _ in range(10):
            coeffs = rng.uniform(-spec.coeff_range, spec.coeff_range, spec.basis_count)
            yaw = float(rng.uniform(-spec.max_yaw, spec.max_yaw)) if spec.max_yaw else 0.0
            verts = template.vertices + (basis @ coeffs)[:, None] * normals
            if yaw:
                verts = verts @ _yaw_matrix(yaw).T
            if np.all(np.abs(verts) <= 1.0):
                break
        else:
            raise DataError(f"sample {k}: deformation left the viewing box 10 times")
        mesh = Mesh(verts, template.faces)
        out.append(SampleRecord(rasterize_depth(mesh, image_size), verts.copy(), landmarks, yaw))
    return out


def rasterize_depth(mesh: Mesh, size: int) -> np.ndarray:
    """Orthographic z-buffer depth image, ``(z + 1) / 2`` on hits, 0 elsewhere.

    Every (triangle, pixel) pair inside the triangle's bounding box is tested
    at once; the buffer keeps the largest z per pixel, which does not depend
    on the order the triangles are visited.
    """
    v, f = mesh.vertices, mesh.faces
    if mesh.n_vertices == 0 or len(f) == 0:
        raise DataError("cannot rasterise an empty mesh")
    x, y, z = (v[f][:, :, k] for k in range(3))
    det = (y[:, 1] - y[:, 2]) * (x[:, 0] - x[:, 2]) + (x[:, 2] - x[:, 1]) * (y[:, 0] - y[:, 2])
    # continuous pixel index of a coordinate u is (u + 1) * size / 2 - 0.5
    to_pix = lambda u: (u + 1.0) * size / 2.0 - 0.5  # noqa: E731
    c0 = np.maximum(np.ceil(to_pix(x.min(axis=1))), 0).astype(np.int64)
    c1 = np.minimum(np.floor(to_pix(x.max(axis=1))), size - 1).astype(np.int64)
    r0 = np.maximum(np.ceil(to_pix(y.min(axis=1))), 0).astype(np.int64)
    r1 = np.minimum(np.floor(to_pix(y.max(axis=1))), size - 1).astype(np.int64)
    nc, nr = np.maximum(c1 - c0 + 1, 0), np.maximum(r1 - r0 + 1, 0)
    count = np.where(det != 0.0, nc * nr, 0)
    t = np.repeat(np.arange(len(f)), count)
    # local offset of each candidate inside its triangle's box
    local = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count)
    rows = r0[t] + local // nc[t]
    cols = c0[t] + local % nc[t]
    px = -1.0 + (2.0 * cols + 1.0) / size
    py = -1.0 + (2.0 * rows + 1.0) / size
    xt, yt, zt, dt = x[t], y[t], z[t], det[t]
    l0 = ((yt[:, 1] - yt[:, 2]) * (px - xt[:, 2]) + (xt[:, 2] - xt[:, 1]) * (py - yt[:, 2])) / dt
    l1 = ((yt[:, 2] - yt[:, 0]) * (px - xt[:, 2]) + (xt[:, 0] - xt[:, 2]) * (py - yt[:, 2])) / dt
    l2 = 1.0 - l0 - l1
    inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
    depth = l0 * zt[:, 0] + l1 * zt[:, 1] + l2 * zt[:, 2]
    zbuf = np.full(size * size, -np.inf)
    np.maximum.at(zbuf, (rows * size + cols)[inside], depth[inside])
    zbuf = zbuf.reshape(size, size)
    img = np.where(np.isfinite(zbuf), np.clip((zbuf + 1.0) / 2.0, 0.0, 1.0), 0.0)
    return np.repeat(img[:, :, None], 3, axis=2)


# -- augmentation ---------------------------------------------------------------


@dataclass(frozen=True)
class Similarity:
    """2D similarity about the image centre: rotate by ``angle`` degrees,
    scale by ``scale``, then shift by ``(tx, ty)`` pixels. z is scaled only."""

    angle: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    scale: float = 1.0

    def apply_points(self, pts: np.ndarray, size: int) -> np.ndarray:
        t = np.deg2rad(self.angle)
        rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
        out = np.array(pts, dtype=np.float64, copy=True)
        out[:, :2] = self.scale * pts[:, :2] @ rot.T + np.array([self.tx, self.ty]) * (2.0 / size)
        out[:, 2] = self.scale * pts[:, 2]
        return out

    def is_identity(self) -> bool:
        return self.angle == 0.0 and self.tx == 0.0 and self.ty == 0.0 and self.scale == 1.0


def draw_similarity(rng: SeededRNG, size: int) -> Similarity:
    angle = float(rng.uniform(-45.0, 45.0))
    tx, ty = (float(t) for t in rng.uniform(-0.1 * size, 0.1 * size, 2))
    scale = float(rng.uniform(0.9, 1.2))
    return Similarity(angle, tx, ty, scale)


def warp_image(image: np.ndarray, sim: Similarity) -> np.ndarray:
    """Resample ``image`` under ``sim`` (bilinear, zero fill outside)."""
    size = image.shape[0]
    t = np.deg2rad(sim.angle)
    # forward map in pixel units about the centre; invert it per output pixel
    inv = np.array([[np.cos(t), np.sin(t)], [-np.sin(t), np.cos(t)]]) / sim.scale
    centre = (size - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    qx, qy = cols - centre - sim.tx, rows - centre - sim.ty
    sx = inv[0, 0] * qx + inv[0, 1] * qy + centre
    sy = inv[1, 0] * qx + inv[1, 1] * qy + centre
    x0, y0 = np.floor(sx).astype(np.int64), np.floor(sy).astype(np.int64)
    fx, fy = sx - x0, sy - y0
    out = np.zeros_like(image, dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            ok = (yy >= 0) & (yy < size) & (xx >= 0) & (xx < size)
            w = np.where(ok, wy * wx, 0.0)
            out += w[:, :, None] * image[np.clip(yy, 0, size - 1), np.clip(xx, 0, size - 1)]
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def augment(record: SampleRecord, rng: SeededRNG, sim: Similarity | None = None) -> SampleRecord:
    """Random rotation in [-45, 45] degrees, translation up to 10% of the
    image size and scale in [0.9, 1.2], applied to the image and the mesh."""
    size = record.image.shape[0]
    sim = sim or draw_similarity(rng, size)
    image = record.image.copy() if sim.is_identity() else warp_image(record.image, sim)
    verts = sim.apply_points(record.gt_vertices, size)
    return SampleRecord(image, verts, record.landmark_indices, record.yaw_degrees)


# -- file formats ---------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def read_ppm(path) -> np.ndarray:
    """P6 image as float32 in [0, 1]."""
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PPM header")
        tokens.append(buf[start:pos])
    if tokens[0] != b"P6":
        raise DataError(f"{path}: not a binary P6 PPM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: maxval {maxval} unsupported (need 255)")
    data = buf[pos + 1:]
    if len(data) != w * h * 3:
        raise DataError(f"{path}: pixel payload has {len(data)} bytes, expected {w * h * 3}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).astype(np.float32) / 255.0


def write_vtx(path, vertices: np.ndarray) -> None:
    v = np.asarray(vertices, dtype="<f4")
    if not np.all(np.isfinite(v)):
        raise DataError("vertices contain non-finite values")
    Path(path).write_bytes(b"VTX1" + struct.pack("<I", len(v)) + v.tobytes())


def read_vtx(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != b"VTX1":
        raise DataError(f"{path}: bad VTX1 magic")
    if len(buf) < 8:
        raise DataError(f"{path}: truncated VTX1 header")
    (n,) = struct.unpack_from("<I", buf, 4)
    if len(buf) != 8 + 12 * n:
        raise DataError(f"{path}: VTX1 length {len(buf)} does not match {n} vertices")
    v = np.frombuffer(buf, dtype="<f4", offset=8).reshape(n, 3).astype(np.float32)
    if not np.all(np.isfinite(v)):
        raise DataError(f"{path}: non-finite vertex values")
    return v


def save_sample(stem, record: SampleRecord) -> None:
    stem = Path(stem)
    write_ppm(stem.with_suffix(".ppm"), record.image)
    write_vtx(stem.with_suffix(".vtx"), record.gt_vertices)
    side = {"landmark_indices": record.landmark_indices, "yaw_degrees": record.yaw_degrees}
    stem.with_suffix(".json").write_text(json.dumps(side) + "\n")


def load_sample(stem) -> SampleRecord:
    stem = Path(stem)
    image = read_ppm(stem.with_suffix(".ppm"))
    verts = read_vtx(stem.with_suffix(".vtx"))
    side = {}
    if stem.with_suffix(".json").exists():
        side = json.loads(stem.with_suffix(".json").read_text())
    return SampleRecord(image, verts, side.get("landmark_indices"), side.get("yaw_degrees"))


@dataclass
class DatasetInfo:
    template: str
    spec: dict
    seed: int
    count: int
    image_size: int
    extra: dict = field(default_factory=dict)


def save_dataset(out_dir, records: list[SampleRecord], info: DatasetInfo) -> Path:
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    for k, rec in enumerate(records):
        save_sample(out / "samples" / f"{k:05d}", rec)
    (out / "dataset.json").write_text(json.dumps(info.__dict__, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(path) -> tuple[list[str], list[SampleRecord]]:
    root = Path(path)
    sample_dir = root / "samples"
    if not sample_dir.is_dir():
        raise DataError(f"{root}: no samples/ directory")
    stems = sorted(p.with_suffix("") for p in sample_dir.glob("*.ppm"))
    if not stems:
        raise DataError(f"{root}: dataset is empty")
    return [s.name for s in stems], [load_sample(s) for s in stems]


__all__ = [
    "DataError", "SampleRecord", "DeformSpec", "Similarity", "synth_dataset", "rasterize_depth",
    "augment", "warp_image", "draw_similarity", "save_sample", "load_sample", "save_dataset",
    "load_dataset", "read_ppm", "write_ppm", "read_vtx", "write_vtx", "SamplingError",
]

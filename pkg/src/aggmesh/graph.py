"""Mesh graphs, Laplacians and the dense spectral reference filter.

Sparse matrices are ``scipy.sparse.csr_matrix`` objects kept in canonical
form (sorted indices, no duplicates), which gives a deterministic row-major
iteration order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.polynomial import chebyshev


DENSE_ORACLE_MAX_N = 512


class GraphError(ValueError):
    pass


def canonical(m) -> sp.csr_matrix:
    """Return ``m`` as a canonical CSR matrix (duplicates summed, indices sorted)."""
    m = sp.csr_matrix(m)
    m.sum_duplicates()
    m.sort_indices()
    m.eliminate_zeros()
    return m


@dataclass(frozen=True)
class Mesh:
    """Triangle mesh ``F = (V, A)``; the adjacency is derived from the faces."""

    vertices: np.ndarray
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise GraphError(f"vertices must be N x 3, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise GraphError("vertices contain non-finite values")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise GraphError("face index out of range")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def adjacency(self) -> sp.csr_matrix:
        return build_adjacency(self.faces, self.n_vertices)


def _edges_from_faces(faces: np.ndarray) -> np.ndarray:
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    return np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])


def adjacency_from_edges(edges, n: int) -> sp.csr_matrix:
    """Symmetric 0/1 adjacency from an undirected edge list."""
    if n < 1:
        raise GraphError("vertex count must be >= 1")
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        raise GraphError("edge index out of range")
    if np.any(e[:, 0] == e[:, 1]):
        raise GraphError("self loops are not allowed")
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    a = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    a.sum_duplicates()
    a.data[:] = 1.0
    a.sort_indices()
    return a


def build_adjacency(faces, n: int) -> sp.csr_matrix:
    """Binary adjacency: ``A[i, j] = 1`` iff some face has the edge ``(i, j)``."""
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if n < 1:
        raise GraphError("vertex count must be >= 1")
    if f.size and (f.min() < 0 or f.max() >= n):
        raise GraphError("face index out of range")
    if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
        raise GraphError("degenerate face with a repeated vertex")
    return adjacency_from_edges(_edges_from_faces(f), n)


@dataclass(frozen=True)
class Laplacian:
    matrix: sp.csr_matrix
    lambda_max: float


def _check_symmetric(m: sp.csr_matrix, what: str) -> None:
    if m.shape[0] != m.shape[1]:
        raise GraphError(f"{what} must be square")
    if abs(m - m.T).max() if m.nnz else 0.0:
        raise GraphError(f"{what} is not symmetric")


def build_laplacian(adjacency, *, tol: float = 1e-6, max_iters: int = 1000) -> Laplacian:
    """Combinatorial Laplacian ``L = D - A`` with a power-iteration ``lambda_max``."""
    a = canonical(adjacency).astype(np.float64)
    _check_symmetric(a, "adjacency")
    if a.diagonal().any():
        raise GraphError("adjacency has a nonzero diagonal")
    deg = np.asarray(a.sum(axis=1)).ravel()
    lap = canonical(sp.diags(deg) - a)
    return Laplacian(lap, max_eigenvalue(lap, tol=tol, max_iters=max_iters))


def max_eigenvalue(
    lap, tol: float = 1e-6, max_iters: int = 1000, seed: int = 0
) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Iterates from a seeded start vector until the eigen-residual drops
    under ``tol``. A stalled iteration is handed to Lanczos; if that fails
    too the Gershgorin bound is returned, which still bounds the spectrum.
    """
    m = sp.csr_matrix(lap, dtype=np.float64)
    if not np.all(np.isfinite(m.data)):
        raise GraphError("matrix has non-finite entries")
    n = m.shape[0]
    if m.nnz == 0:
        return 0.0
    gersh = float(np.max(np.abs(m).sum(axis=1)))
    v = np.random.Generator(np.random.Philox(seed)).standard_normal(n)
    v /= np.linalg.norm(v)
    for _ in range(max_iters):
        w = m @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return gersh
        v = w / norm
        mv = m @ v
        lam = float(v @ mv)
        # a residual below tol puts an eigenvalue within tol of lam
        if np.linalg.norm(mv - lam * v) <= tol * max(lam, 1.0):
            return lam
    # Near-degenerate top eigenvalues (common on sphere-like meshes) make
    # the power iteration crawl; restart Lanczos from its current vector.
    try:
        top = spla.eigsh(m, k=1, which="LA", v0=v, tol=tol * 1e-3, maxiter=max_iters)[0]
        return float(top[0])
    except (spla.ArpackNoConvergence, ValueError):
        return gersh


def rescale_laplacian(lap: Laplacian, dtype=np.float64) -> sp.csr_matrix:
    """``2 L / lambda_max - I``, whose spectrum lies in ``[-1, 1]``."""
    if not lap.lambda_max > 0:
        raise GraphError("degenerate graph: lambda_max must be positive")
    n = lap.matrix.shape[0]
    out = canonical(lap.matrix * (2.0 / lap.lambda_max) - sp.identity(n, format="csr"))
    return out.astype(dtype)


def laplacian_eigh(lap: Laplacian) -> tuple[np.ndarray, np.ndarray]:
    n = lap.matrix.shape[0]
    if n > DENSE_ORACLE_MAX_N:
        raise GraphError(f"dense eigendecomposition limited to N <= {DENSE_ORACLE_MAX_N}")
    return np.linalg.eigh(lap.matrix.toarray())


def dense_spectral_filter_oracle(lap: Laplacian, theta, x) -> np.ndarray:
    """Filter ``x`` in the Laplacian eigenbasis (test reference only).

    ``theta`` is either ``(K,)`` (one filter applied to every channel) or
    ``(K, F_in, F_out)``. ``x`` is ``N x F_in`` or batched ``B x N x F_in``.
    The filter response is the Chebyshev series ``sum_k theta_k T_k`` on the
    rescaled eigenvalues ``2 lambda / lambda_max - 1``, with k starting at 0.
    """
    lam, u = laplacian_eigh(lap)
    if not lap.lambda_max > 0:
        raise GraphError("degenerate graph: lambda_max must be positive")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2] != len(lam):
        raise GraphError("x row count does not match the Laplacian")
    scaled = 2.0 * lam / lap.lambda_max - 1.0
    theta = np.asarray(theta, dtype=np.float64)
    xh = graph_fourier(x, u)
    if theta.ndim == 1:
        g = chebyshev.chebval(scaled, theta)
        return inverse_graph_fourier(g[:, None] * xh, u)
    k, fin, fout = theta.shape
    if x.shape[-1] != fin:
        raise GraphError("x feature count does not match theta")
    # response[n, i, j] = g_{theta_ij}(lambda_n)
    resp = np.stack(
        [chebyshev.chebval(scaled, theta[:, i, j]) for i in range(fin) for j in range(fout)],
        axis=-1,
    ).reshape(len(lam), fin, fout)
    yh = np.einsum("...ni,nij->...nj", xh, resp)
    return inverse_graph_fourier(yh, u)


def graph_fourier(x, u) -> np.ndarray:
    u = np.asarray(u)
    x = np.asarray(x)
    if x.shape[-2] != u.shape[0]:
        raise GraphError("shape mismatch between signal and basis")
    return np.swapaxes(u, -1, -2) @ x


def inverse_graph_fourier(xh, u) -> np.ndarray:
    u = np.asarray(u)
    xh = np.asarray(xh)
    if xh.shape[-2] != u.shape[1]:
        raise GraphError("shape mismatch between spectrum and basis")
    return u @ xh


def is_connected(adjacency) -> bool:
    a = sp.csr_matrix(adjacency)
    if a.shape[0] == 0:
        return True
    ncomp, _ = sp.csgraph.connected_components(a, directed=False)
    return ncomp == 1


# -- file formats -----------------------------------------------------------


def write_off(mesh: Mesh, path) -> None:
    lines = ["OFF", f"{mesh.n_vertices} {len(mesh.faces)} 0"]
    lines += [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_off(path) -> Mesh:
    tokens = Path(path).read_text().split()
    if not tokens or tokens[0] != "OFF":
        raise GraphError(f"{path}: missing OFF header")
    try:
        nv, nf = int(tokens[1]), int(tokens[2])
        pos = 4
        verts = np.array(tokens[pos:pos + 3 * nv], dtype=np.float64).reshape(nv, 3)
        pos += 3 * nv
        rows = np.array(tokens[pos:pos + 4 * nf], dtype=np.int64).reshape(nf, 4)
    except (IndexError, ValueError) as exc:
        raise GraphError(f"{path}: malformed OFF file") from exc
    if nf and np.any(rows[:, 0] != 3):
        raise GraphError(f"{path}: only triangle faces are supported")
    return Mesh(verts, rows[:, 1:])


_SPM_HEADER = struct.Struct("<4sIIQ")
_SPM_RECORD = np.dtype([("row", "<u4"), ("col", "<u4"), ("value", "<f8")])


def sparse_to_bytes(m) -> bytes:
    m = canonical(m)
    coo = m.tocoo()
    rec = np.empty(coo.nnz, dtype=_SPM_RECORD)
    rec["row"], rec["col"], rec["value"] = coo.row, coo.col, coo.data
    return _SPM_HEADER.pack(b"SPM1", m.shape[0], m.shape[1], coo.nnz) + rec.tobytes()


def sparse_from_bytes(buf: bytes) -> sp.csr_matrix:
    if len(buf) < _SPM_HEADER.size:
        raise GraphError("SPM1 data truncated")
    magic, rows, cols, nnz = _SPM_HEADER.unpack_from(buf)
    if magic != b"SPM1":
        raise GraphError("bad SPM1 magic")
    body = buf[_SPM_HEADER.size:]
    if len(body) != nnz * _SPM_RECORD.itemsize:
        raise GraphError("SPM1 record count does not match payload length")
    rec = np.frombuffer(body, dtype=_SPM_RECORD)
    if nnz and (rec["row"].max() >= rows or rec["col"].max() >= cols):
        raise GraphError("SPM1 index out of range")
    m = sp.csr_matrix(
        (rec["value"].astype(np.float64), (rec["row"].astype(np.int64), rec["col"].astype(np.int64))),
        shape=(rows, cols),
    )
    if m.nnz != nnz:
        raise GraphError("SPM1 contains duplicate entries")
    m.sort_indices()
    return m


def write_sparse(m, path) -> None:
    Path(path).write_bytes(sparse_to_bytes(m))


def read_sparse(path) -> sp.csr_matrix:
    return sparse_from_bytes(Path(path).read_bytes())

import numpy as np
import pytest
import scipy.sparse as sp

from aggmesh.graph import Mesh, is_connected, sparse_to_bytes
from aggmesh.sampling import (
    SamplingError,
    build_hierarchy,
    build_upsample,
    closest_point_barycentric,
    decimate,
    kept_indices,
    load_hierarchy,
    nearest_triangles,
    save_hierarchy,
    selection_matrix,
)
from aggmesh.shapes import fibonacci_sphere, icosahedron, icosphere


def test_identity_decimation():
    mesh = icosphere(1)
    coarse, q_down, log = decimate(mesh, mesh.n_vertices)
    assert log == []
    assert (q_down != sp.identity(mesh.n_vertices)).nnz == 0
    assert np.array_equal(coarse.vertices, mesh.vertices)
    q_up = build_upsample(mesh, coarse, q_down)
    assert (q_up != sp.identity(mesh.n_vertices)).nnz == 0


def test_icosahedron_to_six():
    coarse, q_down, log = decimate(icosahedron(), 6)
    assert coarse.n_vertices == 6 and len(log) == 6
    assert is_connected(coarse.adjacency)
    assert q_down.shape == (6, 12)


def test_target_below_minimum():
    mesh = fibonacci_sphere(10)
    with pytest.raises(SamplingError):
        decimate(mesh, 3)


def test_survivor_is_smaller_index():
    _, _, log = decimate(icosphere(1), 20)
    assert all(c.survivor < c.removed for c in log)


def test_decimation_deterministic():
    mesh = fibonacci_sphere(300)
    a = decimate(mesh, 75)[1]
    b = decimate(mesh, 75)[1]
    assert sparse_to_bytes(a) == sparse_to_bytes(b)


def test_barycentric_inside_and_clamped():
    a, b, c = np.array([0.0, 0, 0]), np.array([1.0, 0, 0]), np.array([0.0, 1, 0])
    d2, w = closest_point_barycentric(np.array([1 / 3, 1 / 3, 0.5]), a, b, c)
    assert np.allclose(w, [1 / 3, 1 / 3, 1 / 3]) and d2 == pytest.approx(0.25)
    # beyond vertex b: weight snaps entirely onto b
    _, w = closest_point_barycentric(np.array([2.0, -1.0, 0]), a, b, c)
    assert np.allclose(w, [0, 1, 0])
    # beyond edge bc: projection onto the edge
    _, w = closest_point_barycentric(np.array([1.0, 1.0, 0]), a, b, c)
    assert np.allclose(w, [0, 0.5, 0.5])


def test_centroid_row():
    """A dropped vertex sitting on a coarse face centroid gets (1/3, 1/3, 1/3)."""
    tet = Mesh(
        np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]),
        np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]),
    )
    fine = Mesh(np.vstack([tet.vertices, tet.vertices[[1, 2, 3]].mean(axis=0)]), tet.faces)
    q_up = build_upsample(fine, tet, selection_matrix([0, 1, 2, 3], 5)).toarray()
    assert np.allclose(q_up[4], [0, 1 / 3, 1 / 3, 1 / 3], atol=1e-12)


def test_nearest_triangles_matches_brute_force():
    rng = np.random.default_rng(0)
    coarse = fibonacci_sphere(40)
    pts = rng.standard_normal((200, 3))
    face, w = nearest_triangles(pts, coarse)
    tri = coarse.vertices[coarse.faces]
    for p, fi, wi in zip(pts, face, w):
        d2, _ = closest_point_barycentric(np.broadcast_to(p, (len(tri), 3)), tri[:, 0], tri[:, 1], tri[:, 2])
        assert fi == int(np.flatnonzero(d2 == d2.min())[0])


@pytest.mark.parametrize("mesh,schedule", [
    (fibonacci_sphere(1024, 0.6), [1024, 256, 64, 16]),
    (icosphere(3), [642, 160, 40]),
])
def test_hierarchy_invariants(mesh, schedule):
    h = build_hierarchy(mesh, schedule)
    assert h.counts == schedule
    for k, pair in enumerate(h.pairs):
        fine, coarse = h.levels[k], h.levels[k + 1]
        kept = kept_indices(pair.q_down)
        q_up = pair.q_up
        assert np.abs(np.asarray(q_up.sum(axis=1)).ravel() - 1).max() <= 1e-6
        assert q_up.data.min() >= 0 and q_up.data.max() <= 1
        assert np.array_equal((q_up @ coarse.vertices)[kept], coarse.vertices)
        assert is_connected(coarse.adjacency)


def test_schedule_validation():
    mesh = fibonacci_sphere(100)
    with pytest.raises(SamplingError):
        build_hierarchy(mesh, [100, 200])
    with pytest.raises(SamplingError):
        build_hierarchy(mesh, [99, 20])


def test_hierarchy_round_trip(tmp_path):
    h = build_hierarchy(fibonacci_sphere(200), [200, 50, 12])
    save_hierarchy(h, tmp_path)
    assert len(list(tmp_path.glob("level_*.off"))) == 3
    assert len(list(tmp_path.glob("q_up_*.spm"))) == 2
    back = load_hierarchy(tmp_path)
    assert back.counts == h.counts
    for a, b in zip(h.pairs, back.pairs):
        assert sparse_to_bytes(a.q_up) == sparse_to_bytes(b.q_up)
        assert sparse_to_bytes(a.q_down) == sparse_to_bytes(b.q_down)
    for a, b in zip(h.laplacians, back.laplacians):
        assert sparse_to_bytes(a) == sparse_to_bytes(b)


def test_missing_hierarchy(tmp_path):
    with pytest.raises(SamplingError):
        load_hierarchy(tmp_path / "nope")

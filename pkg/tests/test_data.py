import hashlib

import numpy as np
import pytest

from aggmesh.data import (
    DataError,
    DatasetInfo,
    DeformSpec,
    SampleRecord,
    Similarity,
    augment,
    load_dataset,
    load_sample,
    rasterize_depth,
    read_ppm,
    read_vtx,
    save_dataset,
    save_sample,
    smooth_basis,
    synth_dataset,
    write_ppm,
    write_vtx,
)
from aggmesh.engine import SeededRNG
from aggmesh.graph import Mesh
from aggmesh.losses import nme
from aggmesh.shapes import fibonacci_sphere, icosphere

# sha256 of the u8-quantised 32x32 depth image of icosphere(2), frozen at first run
GOLDEN_ICOSPHERE_32 = "64de3eb2bdd9080eab97ea5a5ceaafb939584f47e30637e149c2d726743f99a3"


@pytest.fixture(scope="module")
def template():
    return fibonacci_sphere(1024, 0.6)


def test_flat_triangle_constant_depth():
    v = np.array([[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [-1.0, 1.0, 0.0]])
    img = rasterize_depth(Mesh(v, [[0, 1, 2]]), 8)
    assert img.shape == (8, 8, 3)
    assert np.all(img[..., 0] == img[..., 1])
    inside = img[..., 0] > 0
    assert np.all(img[..., 0][inside] == 0.5)
    # pixel centres on the hypotenuse x + y = 0 are inside; beyond it, 0
    rows, cols = np.mgrid[0:8, 0:8]
    assert np.array_equal(inside, rows + cols <= 7)


def test_nearer_surface_wins():
    far = [[-1.0, -1.0, -0.5], [1.0, -1.0, -0.5], [-1.0, 1.0, -0.5]]
    near = [[-0.5, -0.5, 0.5], [0.5, -0.5, 0.5], [-0.5, 0.5, 0.5]]
    mesh = Mesh(np.array(far + near), [[0, 1, 2], [3, 4, 5]])
    img = rasterize_depth(mesh, 16)[..., 0]
    # pixel (6, 6) has centre (-0.1875, -0.1875): covered by both, near wins
    assert img[6, 6] == 0.75
    # pixel (9, 2) has centre (-0.6875, 0.1875): only the far surface
    assert img[9, 2] == 0.25
    # pixel (12, 12) is background
    assert img[12, 12] == 0.0
    # face order does not matter
    swapped = Mesh(mesh.vertices, [[3, 4, 5], [0, 1, 2]])
    assert np.array_equal(rasterize_depth(swapped, 16)[..., 0], img)


def test_top_left_pixel_centre():
    # a triangle that covers only the top-left pixel centre (-1 + 1/8, -1 + 1/8)
    c = -1 + 1 / 8
    v = np.array([[c - 0.01, c - 0.01, 0.0], [c + 0.02, c - 0.01, 0.0], [c - 0.01, c + 0.02, 0.0]])
    img = rasterize_depth(Mesh(v, [[0, 1, 2]]), 8)[..., 0]
    assert img[0, 0] == 0.5 and img.sum() == 0.5


def test_golden_icosphere_image():
    img = rasterize_depth(icosphere(2), 32)
    q = np.round(img * 255).astype(np.uint8)
    assert hashlib.sha256(q.tobytes()).hexdigest() == GOLDEN_ICOSPHERE_32
    assert 0.0 <= img.min() and img.max() <= 1.0


def test_empty_mesh_rejected():
    with pytest.raises(DataError):
        rasterize_depth(Mesh(np.zeros((0, 3))), 8)


def test_smooth_basis(template):
    b = smooth_basis(template, 8)
    assert b.shape == (1024, 8)
    assert np.allclose(np.abs(b).max(axis=0), 1.0)
    # orthogonal to the constant vector
    assert np.abs(b.sum(axis=0)).max() < 1e-6 * 1024


def test_zero_coefficients_give_template(template):
    recs = synth_dataset(template, DeformSpec(8, 0.0), 2, seed=1, image_size=32)
    assert np.array_equal(recs[0].gt_vertices, template.vertices)
    assert np.array_equal(recs[0].image, rasterize_depth(template, 32))


def test_synth_shapes_and_determinism(template, tmp_path):
    spec = DeformSpec(8, 0.15)
    a = synth_dataset(template, spec, 32, seed=7)
    assert len(a) == 32
    assert all(r.image.shape == (64, 64, 3) for r in a)
    assert all(np.all(np.isfinite(r.gt_vertices)) and np.abs(r.gt_vertices).max() <= 1 for r in a)
    assert all(0.0 <= r.image.min() and r.image.max() <= 1.0 for r in a)
    assert len(a[0].landmark_indices) == 68
    b = synth_dataset(template, spec, 32, seed=7)
    info = DatasetInfo("sphere", spec.__dict__, 7, 32, 64)
    save_dataset(tmp_path / "a", a, info)
    save_dataset(tmp_path / "b", b, info)
    for f in sorted((tmp_path / "a" / "samples").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "samples" / f.name).read_bytes()
    # per-sample streams: a shorter run reproduces the prefix
    c = synth_dataset(template, spec, 3, seed=7)
    assert np.array_equal(c[2].gt_vertices, a[2].gt_vertices)


def test_synth_out_of_box_errors(template):
    with pytest.raises(DataError, match="10 times"):
        synth_dataset(template, DeformSpec(4, 5.0), 1, seed=0)
    with pytest.raises(DataError):
        synth_dataset(template, DeformSpec(), 0, seed=0)


def test_yaw_recorded(template):
    recs = synth_dataset(template, DeformSpec(8, 0.1, max_yaw=60.0), 4, seed=3, image_size=32)
    yaws = [r.yaw_degrees for r in recs]
    assert all(abs(y) <= 60 for y in yaws) and len(set(yaws)) == 4


def _record(template):
    return synth_dataset(template, DeformSpec(8, 0.15), 1, seed=11, image_size=32)[0]


def test_augment_identity_is_exact(template):
    rec = _record(template)
    out = augment(rec, SeededRNG(0), Similarity())
    assert np.array_equal(out.image, rec.image)
    assert np.array_equal(out.gt_vertices, rec.gt_vertices)


def test_augment_pure_scale(template):
    rec = _record(template)
    out = augment(rec, SeededRNG(0), Similarity(scale=1.2))
    assert np.array_equal(out.gt_vertices, 1.2 * rec.gt_vertices)


def test_augment_consistency_and_subsetting(template):
    rec = _record(template)
    rng = SeededRNG(5)
    out = augment(rec, rng)
    sim = Similarity(*_drawn(5, 32))
    want = sim.apply_points(rec.gt_vertices, 32)
    assert nme(out.gt_vertices, want) == 0.0
    lm = rec.landmark_indices
    assert np.array_equal(sim.apply_points(rec.gt_vertices[lm], 32), out.gt_vertices[lm])
    assert 0.0 <= out.image.min() and out.image.max() <= 1.0


def _drawn(seed, size):
    from aggmesh.data import draw_similarity

    s = draw_similarity(SeededRNG(seed), size)
    assert -45 <= s.angle <= 45 and 0.9 <= s.scale <= 1.2
    assert abs(s.tx) <= 0.1 * size and abs(s.ty) <= 0.1 * size
    return s.angle, s.tx, s.ty, s.scale


def test_augment_image_matches_mesh(template):
    """Rendering the transformed mesh agrees with warping the rendered image
    on the silhouette (z changes only by the scale factor)."""
    rec = _record(template)
    sim = Similarity(angle=20.0, tx=2.0, ty=-3.0, scale=1.1)
    out = augment(rec, SeededRNG(0), sim)
    rendered = rasterize_depth(Mesh(out.gt_vertices, template.faces), 32)[..., 0] > 0
    warped = out.image[..., 0] > 0.05
    assert np.mean(rendered != warped) < 0.05


def test_translation_moves_image(template):
    rec = _record(template)
    out = augment(rec, SeededRNG(0), Similarity(tx=3.0))
    assert np.allclose(out.image[:, 3:], rec.image[:, :-3], atol=1e-6)
    assert np.allclose(out.gt_vertices[:, 0], rec.gt_vertices[:, 0] + 3 * 2 / 32)


def test_sample_round_trip(tmp_path, template):
    rec = _record(template)
    rec = SampleRecord(np.round(rec.image * 255) / 255, rec.gt_vertices.astype(np.float32),
                       rec.landmark_indices, 12.5)
    save_sample(tmp_path / "s", rec)
    back = load_sample(tmp_path / "s")
    assert np.array_equal(np.round(back.image * 255), np.round(rec.image * 255))
    assert np.array_equal(back.gt_vertices, rec.gt_vertices)
    assert back.landmark_indices == rec.landmark_indices and back.yaw_degrees == 12.5
    save_sample(tmp_path / "t", back)
    for ext in (".ppm", ".vtx", ".json"):
        assert (tmp_path / f"s{ext}").read_bytes() == (tmp_path / f"t{ext}").read_bytes()


def test_vtx_errors(tmp_path):
    write_vtx(tmp_path / "v.vtx", np.ones((4, 3)))
    buf = (tmp_path / "v.vtx").read_bytes()
    (tmp_path / "short.vtx").write_bytes(buf[:-2])
    with pytest.raises(DataError, match="length"):
        read_vtx(tmp_path / "short.vtx")
    (tmp_path / "magic.vtx").write_bytes(b"VTX2" + buf[4:])
    with pytest.raises(DataError, match="magic"):
        read_vtx(tmp_path / "magic.vtx")
    with pytest.raises(DataError):
        write_vtx(tmp_path / "nan.vtx", np.full((1, 3), np.nan))


def test_ppm_errors(tmp_path):
    (tmp_path / "a.ppm").write_bytes(b"P6\n1 1\n65535\n" + b"\0" * 6)
    with pytest.raises(DataError, match="maxval"):
        read_ppm(tmp_path / "a.ppm")
    (tmp_path / "b.ppm").write_bytes(b"P6\n2 2\n255\n" + b"\0" * 3)
    with pytest.raises(DataError):
        read_ppm(tmp_path / "b.ppm")
    img = np.random.default_rng(0).integers(0, 256, (3, 3, 3)).astype(np.uint8)
    write_ppm(tmp_path / "c.ppm", img)
    assert np.array_equal(np.round(read_ppm(tmp_path / "c.ppm") * 255).astype(np.uint8), img)


def test_missing_dataset(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path)
    (tmp_path / "samples").mkdir()
    with pytest.raises(DataError, match="empty"):
        load_dataset(tmp_path)

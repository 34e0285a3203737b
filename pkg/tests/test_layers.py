import numpy as np
import pytest
import scipy.sparse as sp

from aggmesh.engine import finite_difference_check, init_param
from aggmesh.graph import build_laplacian, dense_spectral_filter_oracle, rescale_laplacian
from aggmesh.layers import (
    BatchNorm,
    BilinearUpsample2x,
    ChebConv,
    Conv2d,
    DenseGCNBlock,
    GraphUpsample,
    LeakyReLU,
    Linear,
    ResidualBlock,
    ShapeError,
)
from aggmesh.sampling import build_hierarchy
from aggmesh.shapes import fibonacci_sphere

from test_graph import random_connected


def random_params(op, rng):
    out = {}
    for k, spec in op.param_specs().items():
        v = init_param(spec, rng)
        if spec.trainable and spec.init != "fan_in":
            v = v + 0.2 * rng.standard_normal(v.shape)
        out[k] = v
    return out


def test_conv_delta_kernel_identity():
    conv = Conv2d(1, 1, 3, 1)
    w = np.zeros((3, 3, 1, 1))
    w[1, 1] = 1.0
    x = np.array([[[[2.5]]]])
    assert np.array_equal(conv.forward(x, params={"weight": w}), x)


@pytest.mark.parametrize("h,stride,want", [(4, 2, 2), (5, 2, 3), (5, 1, 5)])
def test_conv_shape_rule(h, stride, want):
    conv = Conv2d(2, 3, 3, stride)
    y = conv.forward(np.zeros((1, h, h, 2)), params=random_params(conv, np.random.default_rng(0)))
    assert y.shape == (1, want, want, 3)


def test_conv_matches_naive_cross_correlation():
    rng = np.random.default_rng(1)
    conv = Conv2d(2, 3, 3, 2, bias=True)
    p = random_params(conv, rng)
    p["bias"] = rng.standard_normal(3)
    x = rng.standard_normal((1, 6, 6, 2))
    y = conv.forward(x, params=p)
    # TF "same" padding for even input and stride 2: 0 before, 1 after
    xp = np.pad(x, ((0, 0), (0, 1), (0, 1), (0, 0)))
    want = np.zeros((3, 3, 3))
    for r in range(3):
        for c in range(3):
            patch = xp[0, 2 * r:2 * r + 3, 2 * c:2 * c + 3]
            want[r, c] = np.einsum("ijc,ijco->o", patch, p["weight"]) + p["bias"]
    assert np.allclose(y[0], want)


def test_conv_channel_mismatch():
    conv = Conv2d(2, 3)
    with pytest.raises(ShapeError):
        conv.forward(np.zeros((1, 4, 4, 5)), params=random_params(conv, np.random.default_rng(0)))


def test_conv_gradcheck():
    rng = np.random.default_rng(2)
    conv = Conv2d(2, 3, 3, 1)
    err = finite_difference_check(conv, [rng.standard_normal((1, 5, 5, 2))], random_params(conv, rng))
    assert err <= 1e-5


def test_batchnorm_constant_input():
    bn = BatchNorm(2)
    p = {"scale": np.array([2.0, 3.0]), "shift": np.array([0.5, -1.0]),
         "running_mean": np.zeros(2), "running_var": np.ones(2)}
    y = bn.forward(np.full((4, 3, 2), 7.0), params=p)
    assert np.allclose(y, [0.5, -1.0])


def test_batchnorm_normalized_input_unchanged():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((64, 3))
    x = (x - x.mean(0)) / x.std(0)
    bn = BatchNorm(3)
    y = bn.forward(x, params={"scale": np.ones(3), "shift": np.zeros(3)})
    # the eps floor shrinks values by a factor 1/sqrt(1 + eps), so relative
    assert np.abs(y - x).max() <= 1e-5 * np.abs(x).max()


def test_batchnorm_running_stats_and_eval():
    bn = BatchNorm(1)
    p = {"scale": np.ones(1), "shift": np.zeros(1), "running_mean": np.zeros(1), "running_var": np.ones(1)}
    x = np.array([[1.0], [3.0]])
    bn.forward(x, params=p)
    assert p["running_mean"][0] == pytest.approx(0.2)
    # unbiased batch variance is 2
    assert p["running_var"][0] == pytest.approx(0.9 + 0.1 * 2.0)
    bn.eval()
    y = bn.forward(x, params=p)
    assert np.allclose(y[:, 0], (x[:, 0] - 0.2) / np.sqrt(1.1 + 1e-5))


def test_batchnorm_gradcheck_both_modes():
    rng = np.random.default_rng(3)
    for training in (True, False):
        bn = BatchNorm(3).train(training)
        p = random_params(bn, rng)
        p["running_var"] = p["running_var"] + 0.5
        assert finite_difference_check(bn, [rng.standard_normal((4, 5, 3))], p) <= 1e-4


def test_leaky_relu_values_and_gradcheck():
    op = LeakyReLU()
    assert op.forward(np.array([3.0, -2.0])).tolist() == [3.0, pytest.approx(-0.4)]
    x = np.random.default_rng(0).standard_normal((4, 4))
    x[np.abs(x) < 0.1] = 0.5
    assert finite_difference_check(op, [x], {}) <= 1e-7


def test_bilinear_examples():
    up = BilinearUpsample2x()
    assert np.allclose(up.forward(np.full((1, 3, 4, 2), 1.5)), 1.5)
    y = up.forward(np.array([[[[4.0]]]]))
    assert y.shape == (1, 2, 2, 1) and np.all(y == 4.0)
    # half-pixel centres: [0, 1] -> [0, 0.25, 0.75, 1]
    row = up.forward(np.array([0.0, 1.0]).reshape(1, 1, 2, 1))[0, 0, :, 0]
    assert np.allclose(row, [0, 0.25, 0.75, 1])
    x = np.random.default_rng(1).standard_normal((2, 3, 3, 2))
    assert finite_difference_check(up, [x], {}) <= 1e-6


def test_linear_examples():
    fc = Linear(3, 3)
    x = np.array([[1.0, -2.0, 0.5]])
    assert np.array_equal(fc.forward(x, params={"weight": np.eye(3), "bias": np.zeros(3)}), x)
    b = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(fc.forward(x, params={"weight": np.zeros((3, 3)), "bias": b})[0], b)
    rng = np.random.default_rng(0)
    assert finite_difference_check(fc, [rng.standard_normal((2, 3))], random_params(fc, rng)) <= 1e-7


def _graph(n=20, seed=0):
    return build_laplacian(random_connected(n, np.random.default_rng(seed)))


def test_cheb_identity_and_t2():
    lap = _graph()
    lhat = rescale_laplacian(lap)
    x = np.random.default_rng(0).standard_normal((1, 20, 2))
    conv = ChebConv(2, 2, lhat, 1, bias=False)
    assert np.allclose(conv.forward(x, params={"theta": np.eye(2)[None]}), x)
    conv3 = ChebConv(2, 2, lhat, 3, bias=False)
    theta = np.zeros((3, 2, 2))
    theta[2] = np.eye(2)
    dense = lhat.toarray()
    want = 2 * dense @ (dense @ x[0]) - x[0]
    assert np.allclose(conv3.forward(x, params={"theta": theta})[0], want)


def test_cheb_matches_oracle_20_vertices():
    lap = _graph(20, 4)
    rng = np.random.default_rng(4)
    theta = rng.standard_normal((3, 3, 2))
    x = rng.standard_normal((2, 20, 3))
    conv = ChebConv(3, 2, rescale_laplacian(lap), 3, bias=False)
    y = conv.forward(x, params={"theta": theta})
    assert np.abs(y - dense_spectral_filter_oracle(lap, theta, x)).max() <= 1e-6


def test_cheb_vertex_mismatch():
    conv = ChebConv(1, 1, rescale_laplacian(_graph(10)), 2)
    with pytest.raises(ShapeError):
        conv.forward(np.zeros((1, 11, 1)), params={"theta": np.zeros((2, 1, 1)), "bias": np.zeros(1)})


def test_cheb_gradcheck_20_vertices():
    rng = np.random.default_rng(5)
    conv = ChebConv(2, 3, rescale_laplacian(_graph(20, 5)), 3)
    p = random_params(conv, rng)
    assert finite_difference_check(conv, [rng.standard_normal((1, 20, 2))], p) <= 1e-4


def test_dense_gcn_widths_and_zero_input():
    lhat = rescale_laplacian(_graph(8, 1))
    assert DenseGCNBlock(128, 32, 128, lhat).fusion_width == 256
    block = DenseGCNBlock(4, 2, 3, lhat).eval()
    p = random_params(block, np.random.default_rng(0))
    for k in p:
        if k.endswith(("shift", "bias", "running_mean")):
            p[k] = np.zeros_like(p[k])
    assert np.all(block.forward(np.zeros((1, 8, 4)), params=p) == 0.0)


def test_dense_gcn_gradcheck_tiny():
    rng = np.random.default_rng(6)
    block = DenseGCNBlock(4, 2, 3, rescale_laplacian(_graph(8, 6)))
    p = random_params(block, rng)
    assert finite_difference_check(block, [rng.standard_normal((2, 8, 4))], p) <= 1e-4


def test_graph_upsample():
    h = build_hierarchy(fibonacci_sphere(60), [60, 20])
    op = GraphUpsample(h.pairs[0].q_up)
    const = np.broadcast_to([[1.5, -2.0]], (20, 2))[None]
    assert np.abs(op.forward(const) - np.array([1.5, -2.0])).max() <= 1e-6
    ident = GraphUpsample(sp.identity(5, format="csr"))
    x = np.arange(10.0).reshape(1, 5, 2)
    assert np.array_equal(ident.forward(x), x)
    x = np.random.default_rng(0).standard_normal((2, 20, 3))
    assert finite_difference_check(op, [x], {}) <= 1e-7
    with pytest.raises(ShapeError):
        op.forward(np.zeros((1, 21, 3)))


@pytest.mark.parametrize("c_in,c_out,stride,h,shape", [
    (3, 8, 2, 8, (1, 4, 4, 8)),
    (8, 8, 1, 4, (1, 4, 4, 8)),
    (4, 6, 1, 5, (1, 5, 5, 6)),
])
def test_residual_shape_table(c_in, c_out, stride, h, shape):
    block = ResidualBlock(c_in, c_out, stride)
    p = random_params(block, np.random.default_rng(0))
    assert block.forward(np.zeros((1, h, h, c_in)), params=p).shape == shape
    assert ("proj.weight" in p) == (stride == 2 or c_in != c_out)


def test_residual_gradcheck():
    rng = np.random.default_rng(7)
    block = ResidualBlock(2, 3, 2)
    p = random_params(block, rng)
    assert finite_difference_check(block, [rng.standard_normal((2, 4, 4, 2))], p) <= 1e-4

"""Registry of small double-precision problems for every differentiable op,
plus an end-to-end check through a micro network."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .engine import DiffOp, ParameterStore, finite_difference_check, init_param, SeededRNG
from .graph import build_laplacian, rescale_laplacian
from .layers import (
    BatchNorm,
    BilinearUpsample2x,
    ChebConv,
    Conv2d,
    DenseGCNBlock,
    GraphUpsample,
    LeakyReLU,
    Linear,
)
from .losses import LossSpec, RegressionLoss
from .model import AggregationNet, NetConfig
from .sampling import build_hierarchy
from .shapes import fibonacci_sphere

GATE = 1e-4


def _rng(name: str) -> np.random.Generator:
    return SeededRNG(0, ("gradcheck", name)).generator


def _params(op: DiffOp, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    for k, spec in op.param_specs().items():
        v = init_param(spec, rng).astype(np.float64)
        if spec.init in ("ones", "zeros") and spec.trainable:
            v = v + 0.3 * rng.standard_normal(v.shape)
        out[k] = v
    return out


def _check(op: DiffOp, inputs, rng, **kw) -> float:
    return finite_difference_check(op, inputs, _params(op, rng), **kw)


def _small_mesh():
    mesh = fibonacci_sphere(24)
    return mesh, rescale_laplacian(build_laplacian(mesh.adjacency))


def _conv2d() -> float:
    rng = _rng("conv2d")
    worst = 0.0
    for k, s in ((3, 1), (3, 2), (1, 1), (1, 2)):
        op = Conv2d(2, 3, k, s, bias=True)
        worst = max(worst, _check(op, [rng.standard_normal((2, 5, 5, 2))], rng))
    return worst


def _batch_norm() -> float:
    rng = _rng("batch_norm")
    return _check(BatchNorm(3), [rng.standard_normal((4, 3, 3, 3))], rng)


def _leaky_relu() -> float:
    rng = _rng("leaky_relu")
    return _check(LeakyReLU(), [rng.standard_normal((3, 7))], rng)


def _bilinear() -> float:
    rng = _rng("bilinear_upsample2x")
    return _check(BilinearUpsample2x(), [rng.standard_normal((2, 3, 4, 2))], rng)


def _linear() -> float:
    rng = _rng("fully_connected")
    return _check(Linear(5, 4), [rng.standard_normal((3, 5))], rng)


def _cheb() -> float:
    rng = _rng("cheb_graph_conv")
    _, lap = _small_mesh()
    worst = 0.0
    for k in (1, 2, 3, 4):
        worst = max(worst, _check(ChebConv(3, 2, lap, k), [rng.standard_normal((2, 24, 3))], rng))
    return worst


def _dense_gcn() -> float:
    rng = _rng("dense_gcn_block")
    _, lap = _small_mesh()
    op = DenseGCNBlock(3, 2, 3, lap, 3)
    return _check(op, [rng.standard_normal((2, 24, 3))], rng)


def _graph_upsample() -> float:
    rng = _rng("graph_upsample")
    h = build_hierarchy(fibonacci_sphere(40), [40, 12])
    op = GraphUpsample(h.pairs[0].q_up)
    return _check(op, [rng.standard_normal((2, 12, 3))], rng)


def _loss(kind: str) -> Callable[[], float]:
    def run() -> float:
        rng = _rng(kind)
        # errors spread over both branches of the piecewise losses
        pred = 4.0 * rng.standard_normal((3, 6, 3))
        target = rng.standard_normal((3, 6, 3))
        return finite_difference_check(RegressionLoss(LossSpec(kind)), [pred, target], {})
    return run


class _NetOp(DiffOp):
    """A whole network viewed as one op whose params are its trainable tensors."""

    def __init__(self, model: AggregationNet):
        self.model = model

    def param_names(self):
        return self.model.store.names(trainable_only=True)

    def _forward(self, images, params):
        for k, v in params.items():
            self.model.store.value(k)[...] = v
        return self.model.forward(images)

    def _backward(self, grad):
        store: ParameterStore = self.model.store
        self.model.backward(grad)
        grads = {k: store.grad(k).copy() for k in self.param_names()}
        store.zero_grad()
        return (None,), grads

    def kink_state(self):
        return self.model.kink_state()


def micro_model(seed: int = 0) -> AggregationNet:
    """16x16 input, two levels, tiny widths, double precision."""
    cfg = NetConfig(
        input_size=16, levels=2, encoder_channels=[2, 2], embedding_dim=3, embedding_hidden=4,
        decoder_channels=2, growth=1, head_channels=2, precision="float64",
    )
    h = build_hierarchy(fibonacci_sphere(80), [80, 64, 16])
    return AggregationNet(cfg, h, seed)


def _end_to_end() -> float:
    model = micro_model()
    op = _NetOp(model)
    params = {k: model.store.value(k).copy() for k in op.param_names()}
    images = _rng("e2e").uniform(0.0, 1.0, (2, 16, 16, 3))
    return finite_difference_check(op, [images], params)


REGISTRY: dict[str, Callable[[], float]] = {
    "conv2d": _conv2d,
    "batch_norm": _batch_norm,
    "leaky_relu": _leaky_relu,
    "bilinear_upsample2x": _bilinear,
    "fully_connected": _linear,
    "cheb_graph_conv": _cheb,
    "dense_gcn_block": _dense_gcn,
    "graph_upsample": _graph_upsample,
    "loss_paper_eq3": _loss("paper_eq3"),
    "loss_l1": _loss("l1"),
    "loss_l2": _loss("l2"),
    "loss_smooth_l1": _loss("smooth_l1"),
    "end_to_end_micro": _end_to_end,
}


def run(names=None) -> list[tuple[str, float, bool]]:
    rows = []
    for name in names or REGISTRY:
        err = REGISTRY[name]()
        rows.append((name, err, err <= GATE))
    return rows

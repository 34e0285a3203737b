"""Differentiable layers for images (``B x H x W x C``) and mesh signals (``B x N x C``)."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .engine import DiffOp, EngineError, ParamSpec, collect_specs, prefixed, sub_params

LEAKY_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(EngineError):
    pass


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Output size and (before, after) zero padding, TensorFlow "same" style."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[0], xp.shape[3]
    cols = np.empty((b, ho, wo, k * k, c), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i * k + j, :] = xp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :]
    return cols.reshape(b * ho * wo, k * k * c)


class Conv2d(DiffOp):
    """Zero-padded cross-correlation with square kernels (1x1 or 3x3), stride 1 or 2."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1, bias: bool = False):
        if kernel not in (1, 3) or stride not in (1, 2):
            raise ValueError("kernel must be 1 or 3 and stride 1 or 2")
        self.c_in, self.c_out, self.kernel, self.stride, self.bias = c_in, c_out, kernel, stride, bias

    def param_specs(self):
        specs = {"weight": ParamSpec((self.kernel, self.kernel, self.c_in, self.c_out),
                                     fan_in=self.kernel * self.kernel * self.c_in)}
        if self.bias:
            specs["bias"] = ParamSpec((self.c_out,), init="zeros")
        return specs

    def output_shape(self, shape):
        b, h, w, c = shape
        return (b, same_padding(h, self.kernel, self.stride)[0],
                same_padding(w, self.kernel, self.stride)[0], self.c_out)

    def _forward(self, x, params):
        b, h, w, c = x.shape
        if c != self.c_in:
            raise ShapeError(f"conv2d expects {self.c_in} channels, got {c}")
        k, s = self.kernel, self.stride
        ho, ph0, ph1 = same_padding(h, k, s)
        wo, pw0, pw1 = same_padding(w, k, s)
        xp = np.pad(x, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0))) if k > 1 or s > 1 else x
        cols = _im2col(xp, k, s, ho, wo)
        wmat = params["weight"].reshape(k * k * c, self.c_out)
        y = cols @ wmat
        if self.bias:
            y += params["bias"]
        self._cache = (cols, wmat, x.shape, xp.shape, (ph0, pw0), (ho, wo))
        return y.reshape(b, ho, wo, self.c_out)

    def _backward(self, dy):
        cols, wmat, xshape, xpshape, (ph0, pw0), (ho, wo) = self._cache
        self._cache = None
        b, h, w, c = xshape
        k, s = self.kernel, self.stride
        g = dy.reshape(-1, self.c_out)
        grads = {"weight": (cols.T @ g).reshape(k, k, c, self.c_out)}
        if self.bias:
            grads["bias"] = g.sum(axis=0)
        if s == 1 and k == 1:
            return ((g @ wmat.T).reshape(xshape),), grads
        if s == 1:
            # stride-1 "same" conv: the input gradient is a correlation of
            # dy with the spatially flipped, channel-transposed kernel
            dyp = np.pad(dy, ((0, 0), (1, 1), (1, 1), (0, 0)))
            wflip = wmat.reshape(k, k, c, self.c_out)[::-1, ::-1].transpose(0, 1, 3, 2)
            dx = _im2col(dyp, k, 1, h, w) @ wflip.reshape(k * k * self.c_out, c)
            return (dx.reshape(xshape),), grads
        dcols = (g @ wmat.T).reshape(b, ho, wo, k * k, c)
        dxp = np.zeros(xpshape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[:, :, :, i * k + j, :]
        dx = dxp[:, ph0:ph0 + h, pw0:pw0 + w, :]
        return (dx,), grads


class BatchNorm(DiffOp):
    """Per-channel normalisation over every axis but the last."""

    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        self.channels, self.eps, self.momentum = channels, eps, momentum

    def param_specs(self):
        c = (self.channels,)
        return {
            "scale": ParamSpec(c, init="ones"),
            "shift": ParamSpec(c, init="zeros"),
            "running_mean": ParamSpec(c, init="zeros", trainable=False),
            "running_var": ParamSpec(c, init="ones", trainable=False),
        }

    def _forward(self, x, params):
        if x.shape[-1] != self.channels:
            raise ShapeError(f"batch_norm expects {self.channels} channels, got {x.shape[-1]}")
        axes = tuple(range(x.ndim - 1))
        scale, shift = params["scale"], params["shift"]
        if self.training:
            m = x.size // self.channels
            mean = x.mean(axis=axes)
            xc = x - mean
            var = (xc * xc).mean(axis=axes)
            inv = 1.0 / np.sqrt(var + self.eps)
            rm, rv = params.get("running_mean"), params.get("running_var")
            if rm is not None:
                unbiased = var * (m / max(m - 1, 1))
                rm[...] = self.momentum * rm + (1.0 - self.momentum) * mean
                rv[...] = self.momentum * rv + (1.0 - self.momentum) * unbiased
        else:
            xc = x - params["running_mean"]
            inv = 1.0 / np.sqrt(params["running_var"] + self.eps)
        xhat = xc * inv
        self._cache = (xhat, inv, scale, axes, self.training)
        return xhat * scale + shift

    def _backward(self, dy):
        xhat, inv, scale, axes, training = self._cache
        self._cache = None
        grads = {"scale": (dy * xhat).sum(axis=axes), "shift": dy.sum(axis=axes)}
        dxhat = dy * scale
        if training:
            m = dy.size // self.channels
            dx = (inv / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            dx = dxhat * inv
        return (dx,), grads


class LeakyReLU(DiffOp):
    """``x`` for ``x >= 0`` else ``slope * x``; kink at 0."""

    def __init__(self, slope: float = LEAKY_SLOPE):
        self.slope = slope

    def _forward(self, x, params):
        pos = x >= 0
        self._mask = pos
        return np.where(pos, x, x * x.dtype.type(self.slope))

    def _backward(self, dy):
        pos = self._mask
        return (np.where(pos, dy, dy * dy.dtype.type(self.slope)),), {}

    def kink_state(self):
        return np.packbits(self._mask).tobytes()


def bilinear_matrix(n: int, scale: int = 2) -> np.ndarray:
    """``(scale*n) x n`` interpolation matrix, half-pixel centres, clamped edges."""
    out = np.zeros((scale * n, n))
    for o in range(scale * n):
        src = min(max((o + 0.5) / scale - 0.5, 0.0), n - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n - 1)
        t = src - lo
        out[o, lo] += 1.0 - t
        out[o, hi] += t
    return out


class BilinearUpsample2x(DiffOp):
    def _forward(self, x, params):
        b, h, w, c = x.shape
        mh = bilinear_matrix(h).astype(x.dtype)
        mw = bilinear_matrix(w).astype(x.dtype)
        self._mats = (mh, mw)
        t = np.einsum("oh,bhwc->bowc", mh, x, optimize=True)
        return np.einsum("pw,bowc->bopc", mw, t, optimize=True)

    def _backward(self, dy):
        mh, mw = self._mats
        t = np.einsum("pw,bopc->bowc", mw, dy, optimize=True)
        return (np.einsum("oh,bowc->bhwc", mh, t, optimize=True),), {}


class Linear(DiffOp):
    """``y = x W + b`` over the last axis; any leading axes are batch axes."""

    def __init__(self, f_in: int, f_out: int, bias: bool = True):
        self.f_in, self.f_out, self.bias = f_in, f_out, bias

    def param_specs(self):
        specs = {"weight": ParamSpec((self.f_in, self.f_out), fan_in=self.f_in)}
        if self.bias:
            specs["bias"] = ParamSpec((self.f_out,), init="zeros")
        return specs

    def _forward(self, x, params):
        if x.shape[-1] != self.f_in:
            raise ShapeError(f"linear expects {self.f_in} features, got {x.shape[-1]}")
        self._x = x
        self._w = params["weight"]
        y = x @ params["weight"]
        if self.bias:
            y = y + params["bias"]
        return y

    def _backward(self, dy):
        x, w = self._x, self._w
        self._x = None
        x2 = x.reshape(-1, self.f_in)
        g2 = dy.reshape(-1, self.f_out)
        grads = {"weight": x2.T @ g2}
        if self.bias:
            grads["bias"] = g2.sum(axis=0)
        return (dy @ w.T,), grads


class ChebConv(DiffOp):
    """Chebyshev spectral graph convolution ``y = sum_k T_k(L) x theta_k (+ b)``.

    ``laplacian`` is the rescaled Laplacian; k runs from 0 to K-1, so K=1 is
    a per-vertex linear map and K=3 uses T_0, T_1 and T_2.
    """

    def __init__(self, f_in: int, f_out: int, laplacian, k_order: int = 3, bias: bool = True):
        if k_order < 1:
            raise ValueError("Chebyshev order must be >= 1")
        self.f_in, self.f_out, self.k_order, self.bias = f_in, f_out, k_order, bias
        self.laplacian = sp.csr_matrix(laplacian)
        self._lap_t = None

    def param_specs(self):
        specs = {"theta": ParamSpec((self.k_order, self.f_in, self.f_out), fan_in=self.k_order * self.f_in)}
        if self.bias:
            specs["bias"] = ParamSpec((self.f_out,), init="zeros")
        return specs

    def _lap(self, dtype):
        if self.laplacian.dtype != dtype:
            self.laplacian = self.laplacian.astype(dtype)
            self._lap_t = None
        if self._lap_t is None:
            self._lap_t = self.laplacian.T.tocsr()
        return self.laplacian

    def _forward(self, x, params):
        b, n, f = x.shape
        if n != self.laplacian.shape[0]:
            raise ShapeError(f"graph has {self.laplacian.shape[0]} vertices, signal has {n}")
        if f != self.f_in:
            raise ShapeError(f"cheb conv expects {self.f_in} features, got {f}")
        lap = self._lap(x.dtype)
        t0 = np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(n, b * f)
        terms = [t0]
        if self.k_order > 1:
            terms.append(lap @ t0)
        for _ in range(2, self.k_order):
            terms.append(2.0 * (lap @ terms[-1]) - terms[-2])
        stack = np.stack(terms, axis=0).reshape(self.k_order, n, b, f)
        stack = stack.transpose(2, 1, 0, 3).reshape(b, n, self.k_order * f)
        theta = params["theta"].reshape(self.k_order * f, self.f_out)
        y = stack @ theta
        if self.bias:
            y += params["bias"]
        self._cache = (stack, theta, x.shape)
        return y

    def _backward(self, dy):
        stack, theta, (b, n, f) = self._cache
        self._cache = None
        k = self.k_order
        g2 = dy.reshape(-1, self.f_out)
        grads = {"theta": (stack.reshape(-1, k * f).T @ g2).reshape(k, f, self.f_out)}
        if self.bias:
            grads["bias"] = g2.sum(axis=0)
        dstack = (dy @ theta.T).reshape(b, n, k, f).transpose(2, 1, 0, 3).reshape(k, n, b * f)
        g = [dstack[i].copy() for i in range(k)]
        lap_t = self._lap_t
        for i in range(k - 1, 1, -1):
            g[i - 1] += 2.0 * (lap_t @ g[i])
            g[i - 2] -= g[i]
        if k > 1:
            g[0] += lap_t @ g[1]
        dx = g[0].reshape(n, b, f).transpose(1, 0, 2)
        return (np.ascontiguousarray(dx),), grads


class GraphUpsample(DiffOp):
    """``y = Q_u x`` per batch item; the backward pass multiplies by ``Q_u^T``."""

    def __init__(self, q_up):
        self.q_up = sp.csr_matrix(q_up)
        self._qt = None

    def _forward(self, x, params):
        b, m, c = x.shape
        if m != self.q_up.shape[1]:
            raise ShapeError(f"up-sampling expects {self.q_up.shape[1]} vertices, got {m}")
        if self.q_up.dtype != x.dtype:
            self.q_up = self.q_up.astype(x.dtype)
            self._qt = None
        if self._qt is None:
            self._qt = self.q_up.T.tocsr()
        flat = np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(m, b * c)
        self._shape = x.shape
        return (self.q_up @ flat).reshape(-1, b, c).transpose(1, 0, 2)

    def _backward(self, dy):
        b, m, c = self._shape
        n = dy.shape[1]
        flat = np.ascontiguousarray(dy.transpose(1, 0, 2)).reshape(n, b * c)
        return ((self._qt @ flat).reshape(m, b, c).transpose(1, 0, 2),), {}


class Concat(DiffOp):
    """Concatenate along the last axis."""

    def _forward(self, *xs, params):
        self._sizes = [x.shape[-1] for x in xs]
        return np.concatenate(xs, axis=-1)

    def _backward(self, dy):
        splits = np.cumsum(self._sizes)[:-1]
        return tuple(np.split(dy, splits, axis=-1)), {}


class Add(DiffOp):
    def _forward(self, *xs, params):
        self._n = len(xs)
        out = xs[0].copy()
        for x in xs[1:]:
            out += x
        return out

    def _backward(self, dy):
        return tuple(dy for _ in range(self._n)), {}


class Reshape(DiffOp):
    """Reshape keeping the batch axis; ``shape`` excludes the batch axis."""

    def __init__(self, shape):
        self.shape = tuple(shape)

    def _forward(self, x, params):
        self._in = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def _backward(self, dy):
        return (dy.reshape(self._in),), {}


# -- composite blocks -----------------------------------------------------------


class ResidualBlock(DiffOp):
    """conv-BN-leaky, conv-BN-leaky, conv-BN, plus shortcut, then leaky.

    The first conv carries the stride; a strided 1x1 projection replaces the
    identity shortcut when the stride or channel count changes.
    """

    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.ops = {
            "conv1": Conv2d(c_in, c_out, 3, stride),
            "bn1": BatchNorm(c_out),
            "act1": LeakyReLU(),
            "conv2": Conv2d(c_out, c_out, 3, 1),
            "bn2": BatchNorm(c_out),
            "act2": LeakyReLU(),
            "conv3": Conv2d(c_out, c_out, 3, 1),
            "bn3": BatchNorm(c_out),
            "out": LeakyReLU(),
        }
        self.project = stride != 1 or c_in != c_out
        if self.project:
            self.ops["proj"] = Conv2d(c_in, c_out, 1, stride)
        self._main = ["conv1", "bn1", "act1", "conv2", "bn2", "act2", "conv3", "bn3"]

    def children(self):
        return list(self.ops.values())

    def param_specs(self):
        return collect_specs(self.ops)

    def output_shape(self, shape):
        return self.ops["conv1"].output_shape(shape)

    def _forward(self, x, params):
        h = x
        for name in self._main:
            h = self.ops[name].forward(h, params=sub_params(params, name + "."))
        short = self.ops["proj"].forward(x, params=sub_params(params, "proj.")) if self.project else x
        return self.ops["out"].forward(h + short)

    def _backward(self, dy):
        grads = {}
        (d,), _ = self.ops["out"].backward(dy)
        dshort = d
        for name in reversed(self._main):
            (d,), g = self.ops[name].backward(d)
            grads.update(prefixed(g, name + "."))
        if self.project:
            (ds,), g = self.ops["proj"].backward(dshort)
            grads.update(prefixed(g, "proj."))
            d = d + ds
        else:
            d = d + dshort
        return (d,), grads


class DenseGCNBlock(DiffOp):
    """Four densely connected Chebyshev layers and a per-vertex linear fusion.

    Layer ``t`` reads the block input concatenated with every earlier layer
    output and emits ``growth`` channels through conv, BN and leaky ReLU.
    The fusion maps all ``c_in + layers * growth`` channels to ``fuse_out``.
    The graph convs carry no bias: the following BN shift absorbs it.
    """

    def __init__(self, c_in: int, growth: int, fuse_out: int, laplacian, k_order: int = 3,
                 layers: int = 4):
        self.c_in, self.growth, self.fuse_out, self.layers = c_in, growth, fuse_out, layers
        self.ops: dict[str, DiffOp] = {}
        for t in range(layers):
            self.ops[f"conv{t}"] = ChebConv(c_in + t * growth, growth, laplacian, k_order, bias=False)
            self.ops[f"bn{t}"] = BatchNorm(growth)
            self.ops[f"act{t}"] = LeakyReLU()
        self.ops["fuse"] = Linear(self.fusion_width, fuse_out)

    @property
    def fusion_width(self) -> int:
        return self.c_in + self.layers * self.growth

    def children(self):
        return list(self.ops.values())

    def param_specs(self):
        return collect_specs(self.ops)

    def _forward(self, x, params):
        if x.shape[-1] != self.c_in:
            raise ShapeError(f"DenseGCN block expects {self.c_in} channels, got {x.shape[-1]}")
        feats = x
        for t in range(self.layers):
            h = feats
            for name in (f"conv{t}", f"bn{t}", f"act{t}"):
                h = self.ops[name].forward(h, params=sub_params(params, name + "."))
            feats = np.concatenate([feats, h], axis=-1)
        return self.ops["fuse"].forward(feats, params=sub_params(params, "fuse."))

    def _backward(self, dy):
        grads = {}
        (dfeats,), g = self.ops["fuse"].backward(dy)
        grads.update(prefixed(g, "fuse."))
        for t in reversed(range(self.layers)):
            width = self.c_in + t * self.growth
            dprev, dh = dfeats[..., :width], dfeats[..., width:]
            for name in (f"act{t}", f"bn{t}", f"conv{t}"):
                (dh,), g = self.ops[name].backward(dh)
                grads.update(prefixed(g, name + "."))
            dfeats = dprev + dh
        return (dfeats,), grads

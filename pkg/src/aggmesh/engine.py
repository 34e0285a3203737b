"""Reverse-mode plumbing: parameter storage, the op contract, gradient checks,
the momentum optimiser, reproducible random streams and checkpoints.

Tensors are plain ``numpy`` arrays. Every differentiable op saves what it
needs during ``forward`` and consumes it in ``backward``; there is no global
tape.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np


class EngineError(RuntimeError):
    pass


class NonFiniteError(EngineError):
    pass


# -- parameters ---------------------------------------------------------------


@dataclass(frozen=True)
class ParamSpec:
    shape: tuple[int, ...]
    init: str = "fan_in"  # fan_in | zeros | ones
    fan_in: int = 1
    trainable: bool = True


@dataclass
class _Entry:
    value: np.ndarray
    grad: np.ndarray
    velocity: np.ndarray
    trainable: bool


class ParameterStore:
    """Ordered name -> (value, gradient, velocity); insertion order is preserved."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._entries: "OrderedDict[str, _Entry]" = OrderedDict()

    def add(self, name: str, value, trainable: bool = True) -> np.ndarray:
        if name in self._entries:
            raise EngineError(f"duplicate parameter name {name!r}")
        v = np.array(value, dtype=self.dtype, copy=True)
        self._entries[name] = _Entry(v, np.zeros_like(v), np.zeros_like(v), trainable)
        return v

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self, trainable_only: bool = False) -> list[str]:
        return [k for k, e in self._entries.items() if e.trainable or not trainable_only]

    def value(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def grad(self, name: str) -> np.ndarray:
        return self._entries[name].grad

    def velocity(self, name: str) -> np.ndarray:
        return self._entries[name].velocity

    def is_trainable(self, name: str) -> bool:
        return self._entries[name].trainable

    def view(self, prefix: str, local_names) -> dict[str, np.ndarray]:
        return {k: self._entries[prefix + k].value for k in local_names}

    def accumulate(self, prefix: str, grads: Mapping[str, np.ndarray]) -> None:
        for k, g in grads.items():
            e = self._entries[prefix + k]
            if e.trainable:
                e.grad += g

    def zero_grad(self) -> None:
        for e in self._entries.values():
            e.grad[...] = 0.0

    def set_value(self, name: str, value) -> None:
        e = self._entries[name]
        value = np.asarray(value)
        if value.shape != e.value.shape:
            raise EngineError(f"{name}: shape {value.shape} != {e.value.shape}")
        e.value[...] = value

    def set_velocity(self, name: str, value) -> None:
        e = self._entries[name]
        value = np.asarray(value)
        if value.shape != e.velocity.shape:
            raise EngineError(f"{name}: velocity shape {value.shape} != {e.velocity.shape}")
        e.velocity[...] = value

    def count(self, trainable_only: bool = True) -> int:
        return sum(e.value.size for e in self._entries.values() if e.trainable or not trainable_only)

    def nbytes(self, trainable_only: bool = True) -> int:
        return sum(e.value.nbytes for e in self._entries.values() if e.trainable or not trainable_only)


def init_param(spec: ParamSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.init == "zeros":
        return np.zeros(spec.shape)
    if spec.init == "ones":
        return np.ones(spec.shape)
    bound = np.sqrt(6.0 / max(spec.fan_in, 1))
    return rng.uniform(-bound, bound, size=spec.shape)


# -- op contract --------------------------------------------------------------


class DiffOp:
    """Differentiable operation with explicit saved activations.

    Subclasses implement ``_forward(*inputs, params)`` returning the output
    and ``_backward(grad)`` returning ``(input_grads, param_grads)``.
    ``param_specs`` maps local parameter names to :class:`ParamSpec`.
    Ops that are non-differentiable somewhere override ``kink_state`` to
    report which side of each kink the last forward pass was on.
    """

    training = True

    def param_specs(self) -> dict[str, ParamSpec]:
        return {}

    def children(self) -> list["DiffOp"]:
        return []

    def train(self, mode: bool = True) -> "DiffOp":
        self.training = mode
        for c in self.children():
            c.train(mode)
        return self

    def eval(self) -> "DiffOp":
        return self.train(False)

    def forward(self, *inputs, params: Mapping[str, np.ndarray] | None = None):
        self._saved = True
        return self._forward(*inputs, params=params or {})

    def backward(self, grad):
        if not getattr(self, "_saved", False):
            raise EngineError(f"{type(self).__name__}.backward called without forward")
        self._saved = False
        return self._backward(grad)

    def kink_state(self) -> bytes:
        return b"".join(c.kink_state() for c in self.children())

    def _forward(self, *inputs, params):
        raise NotImplementedError

    def _backward(self, grad):
        raise NotImplementedError


def sub_params(params: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def prefixed(grads: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {prefix + k: v for k, v in grads.items()}


def collect_specs(children: Mapping[str, DiffOp]) -> dict[str, ParamSpec]:
    out: dict[str, ParamSpec] = {}
    for name, op in children.items():
        for k, s in op.param_specs().items():
            out[f"{name}.{k}"] = s
    return out


# -- gradient check -------------------------------------------------------------


def finite_difference_check(
    op: DiffOp,
    inputs,
    params: Mapping[str, np.ndarray] | None = None,
    eps: float = 1e-6,
    seed: int = 0,
    wrt_inputs=None,
) -> float:
    """Max relative error between ``op.backward`` and central differences.

    The scalar probed is ``sum(R * op(inputs))`` for a fixed random ``R``.
    Relative error per coordinate uses ``max(|analytic|, |numeric|, 1e-8)``
    as the denominator. Coordinates whose perturbation moves the op across
    one of its declared kinks are skipped. ``wrt_inputs`` restricts which
    inputs are probed (default: all floating-point inputs).
    """
    inputs = [np.array(x, dtype=np.float64) if _is_float(x) else x for x in inputs]
    params = {k: np.array(v, dtype=np.float64) for k, v in (params or {}).items()}
    out = op.forward(*inputs, params=params)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("forward produced non-finite output")
    proj = np.random.Generator(np.random.Philox(seed)).standard_normal(np.shape(out))
    base_kinks = op.kink_state()
    in_grads, p_grads = op.backward(proj)

    def scalar() -> tuple[float, bytes]:
        y = op.forward(*inputs, params=params)
        if not np.all(np.isfinite(y)):
            raise NonFiniteError("forward produced non-finite output")
        op._saved = False
        return float(np.sum(proj * y)), op.kink_state()

    targets = []
    for idx, x in enumerate(inputs):
        if wrt_inputs is not None and idx not in wrt_inputs:
            continue
        if _is_float(x) and in_grads[idx] is not None:
            targets.append((x, in_grads[idx]))
    for k, v in params.items():
        if k in p_grads:
            targets.append((v, p_grads[k]))

    worst = 0.0
    for arr, analytic in targets:
        flat = arr.reshape(-1)
        agrad = np.asarray(analytic, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp, kp = scalar()
            flat[i] = orig - eps
            fm, km = scalar()
            flat[i] = orig
            if kp != base_kinks or km != base_kinks:
                continue
            num = (fp - fm) / (2.0 * eps)
            denom = max(abs(agrad[i]), abs(num), 1e-8)
            worst = max(worst, abs(agrad[i] - num) / denom)
    return worst


def _is_float(x) -> bool:
    return isinstance(x, np.ndarray) and np.issubdtype(x.dtype, np.floating) or isinstance(x, float)


# -- optimisation ---------------------------------------------------------------


def sgd_momentum_step(store: ParameterStore, lr: float, momentum: float) -> None:
    """Classic momentum: ``v <- momentum * v + g``; ``p <- p - lr * v``; grads zeroed."""
    for name in store.names(trainable_only=True):
        if not np.all(np.isfinite(store.grad(name))):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    dt = store.dtype.type
    for name in store.names(trainable_only=True):
        v = store.velocity(name)
        v *= dt(momentum)
        v += store.grad(name)
        store.value(name)[...] -= dt(lr) * v
    store.zero_grad()


def lr_schedule(base: float, decay: float, epoch: int) -> float:
    if not 0.0 < decay <= 1.0:
        raise ValueError("decay must lie in (0, 1]")
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return base * decay ** epoch


# -- random streams ---------------------------------------------------------------


class SeededRNG:
    """Philox4x64 stream keyed by a 64-bit seed and a path of child ids.

    The key is the first 16 bytes of ``blake2b(seed, path)``, so a stream
    depends only on ``(seed, path)`` and is identical on every platform.
    ``split`` derives an independent child stream without consuming draws.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        h = hashlib.blake2b(digest_size=16)
        h.update(self.seed.to_bytes(8, "little"))
        for part in self.path:
            h.update(b"/" + str(part).encode())
        key = np.frombuffer(h.digest(), dtype="<u8")
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def split(self, child) -> "SeededRNG":
        return SeededRNG(self.seed, self.path + (child,))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


# -- checkpoints --------------------------------------------------------------

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


class CheckpointError(EngineError):
    pass


def _pack_tensors(tensors) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def encode_checkpoint(tensors, velocities) -> bytes:
    """``CKPT`` blob: header, tensors, velocity tensors, trailing CRC32."""
    body = CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + _pack_tensors(tensors) + _pack_tensors(velocities)
    return body + struct.pack("<I", zlib.crc32(body))


def _unpack_tensors(buf: bytes, pos: int):
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    out = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        out.append((name, data.copy()))
    return out, pos


def decode_checkpoint(buf: bytes):
    if len(buf) < 12:
        raise CheckpointError("checkpoint truncated")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    if body[:4] != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        tensors, pos = _unpack_tensors(body, 8)
        velocities, pos = _unpack_tensors(body, pos)
    except (struct.error, ValueError) as exc:
        raise CheckpointError("malformed checkpoint payload") from exc
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return tensors, velocities


def write_checkpoint(path, tensors, velocities) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors, velocities))


def read_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())

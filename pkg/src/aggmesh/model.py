"""CNN encoder, nested aggregation grid and DenseGCN mesh decoder.

The network is a fixed DAG compiled into an ordered list of steps. Forward
runs the steps in order and keeps every intermediate; backward walks them
in reverse, summing gradients where a node feeds several consumers.

Grid wiring (levels ``i = 1..L``, 1 = finest map):

* ``X[i, 0]`` is the encoder output at level ``i``;
* ``X[i, j] = ResBlock(concat(X[i, 0..j-1], up(X[i+1, j-1]), down(X[i-1, j-1])))``
  where ``up`` is bilinear x2 and ``down`` a stride-2 conv;
* the bridge into decoder stage ``i`` is ``X[i, L-i]``, raster-flattened so
  pixel ``(r, c)`` feeds vertex ``r * W + c`` of the matching mesh level.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .engine import (
    CheckpointError,
    DiffOp,
    EngineError,
    NonFiniteError,
    ParameterStore,
    SeededRNG,
    decode_checkpoint,
    encode_checkpoint,
    init_param,
)
from .layers import (
    BilinearUpsample2x,
    ChebConv,
    Concat,
    Conv2d,
    DenseGCNBlock,
    GraphUpsample,
    LeakyReLU,
    Linear,
    Reshape,
    ResidualBlock,
)
from .sampling import MeshHierarchy

AGGREGATION_MODES = ("full", "no_up", "no_down", "shallow", "none")


class ConfigError(ValueError):
    pass


@dataclass
class NetConfig:
    input_size: int = 64
    levels: int = 4
    encoder_channels: list[int] = field(default_factory=lambda: [16, 32, 32, 32])
    embedding_dim: int = 64
    embedding_hidden: int = 128
    decoder_channels: int = 32
    growth: int = 8
    head_channels: int = 32
    aggregation_mode: str = "full"
    cheb_order: int = 3
    precision: str = "float32"
    graph_bias: bool = True
    hierarchy: str | None = None

    def __post_init__(self):
        self.encoder_channels = [int(c) for c in self.encoder_channels]
        self.validate()

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.input_size != 4 * 2 ** self.levels:
            raise ConfigError(
                f"input_size {self.input_size} must equal 4 * 2**levels = {4 * 2 ** self.levels}"
            )
        if len(self.encoder_channels) != self.levels:
            raise ConfigError("need one encoder channel count per level")
        if self.aggregation_mode not in AGGREGATION_MODES:
            raise ConfigError(f"unknown aggregation mode {self.aggregation_mode!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")
        if self.cheb_order < 1:
            raise ConfigError("cheb_order must be >= 1")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def map_size(self, level: int) -> int:
        return self.input_size >> level

    def level_counts(self) -> list[int]:
        """Mesh vertex counts the decoder stages need, finest first."""
        return [self.map_size(i) ** 2 for i in range(1, self.levels + 1)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def full_scale_config(**overrides) -> NetConfig:
    base = dict(
        input_size=256,
        levels=6,
        encoder_channels=[16, 32, 64, 128, 128, 128],
        embedding_dim=256,
        embedding_hidden=512,
        decoder_channels=128,
        growth=32,
        head_channels=32,
    )
    base.update(overrides)
    return NetConfig(**base)


def grid_wiring(levels: int, mode: str) -> dict:
    """Which nodes each grid node concatenates, and the bridge per level.

    Returns ``{"nodes": {(i, j): [source names]}, "bridges": {i: node or None}}``
    where sources are ``"X{i},{j}"``, ``"up:X{i},{j}"`` or ``"down:X{i},{j}"``.
    """
    if mode not in AGGREGATION_MODES:
        raise ConfigError(f"unknown aggregation mode {mode!r}")
    nodes: dict[tuple[int, int], list[str]] = {}
    if mode in ("full", "no_up", "no_down"):
        for j in range(1, levels):
            for i in range(1, levels - j + 1):
                src = [f"X{i},{jj}" for jj in range(j)]
                if mode != "no_up":
                    src.append(f"up:X{i + 1},{j - 1}")
                if mode != "no_down" and i > 1:
                    src.append(f"down:X{i - 1},{j - 1}")
                nodes[(i, j)] = src
        bridges = {i: f"X{i},{levels - i}" for i in range(1, levels + 1)}
    elif mode == "shallow":
        bridges = {i: f"X{i},0" for i in range(1, levels + 1)}
    else:
        bridges = {i: None for i in range(1, levels + 1)}
    return {"nodes": nodes, "bridges": bridges}


@dataclass
class _Step:
    name: str
    op: DiffOp
    inputs: list[str]


class AggregationNet:
    """Image -> mesh-vertex regressor with parameters in a :class:`ParameterStore`."""

    def __init__(self, config: NetConfig, hierarchy: MeshHierarchy, seed: int = 0):
        config.validate()
        self.config = config
        self.hierarchy = hierarchy
        self.seed = seed
        counts = hierarchy.counts
        need = config.level_counts()
        if counts == need:
            self.offset = 0
        elif len(counts) == len(need) + 1 and counts[1:] == need and counts[0] > need[0]:
            self.offset = 1
        else:
            raise ConfigError(f"hierarchy counts {counts} do not match the config schedule {need}")
        self.steps: list[_Step] = []
        self.node_shapes: dict[str, tuple] = {}
        self._build()
        self.store = ParameterStore(config.dtype)
        rng = SeededRNG(seed, ("init",))
        for step in self.steps:
            for local, spec in step.op.param_specs().items():
                name = f"{step.name}.{local}"
                self.store.add(name, init_param(spec, rng.split(name).generator), spec.trainable)
        self._values: dict[str, np.ndarray] | None = None
        self.training = True

    # -- construction ----------------------------------------------------------

    @property
    def n_output(self) -> int:
        return self.hierarchy.counts[0]

    def _level_index(self, level: int) -> int:
        return self.offset + level - 1

    def _add(self, name, op, inputs, shape):
        self.steps.append(_Step(name, op, list(inputs)))
        self.node_shapes[name] = shape
        return name

    def _build(self) -> None:
        cfg = self.config
        L, ch = cfg.levels, cfg.encoder_channels
        size = cfg.input_size
        self.node_shapes["image"] = (size, size, 3)
        prev, c_prev = "image", 3
        for i in range(1, L + 1):
            m = cfg.map_size(i)
            prev = self._add(f"X{i},0", ResidualBlock(c_prev, ch[i - 1], 2), [prev], (m, m, ch[i - 1]))
            c_prev = ch[i - 1]

        wiring = grid_wiring(L, cfg.aggregation_mode)
        for (i, j), sources in sorted(wiring["nodes"].items(), key=lambda kv: (kv[0][1], kv[0][0])):
            m = cfg.map_size(i)
            inputs, width = [], 0
            for src in sources:
                if src.startswith("up:"):
                    node = src[3:]
                    c = self.node_shapes[node][2]
                    inputs.append(self._add(f"up{i},{j}", BilinearUpsample2x(), [node], (m, m, c)))
                elif src.startswith("down:"):
                    node = src[5:]
                    c = self.node_shapes[node][2]
                    inputs.append(self._add(f"down{i},{j}", Conv2d(c, c, 3, 2, bias=True), [node], (m, m, c)))
                else:
                    inputs.append(src)
                    c = self.node_shapes[src][2]
                width += c
            cat = self._add(f"cat{i},{j}", Concat(), inputs, (m, m, width))
            self._add(f"X{i},{j}", ResidualBlock(width, ch[i - 1], 1), [cat], (m, m, ch[i - 1]))

        # embedding head: flatten coarsest map -> FC -> FC
        flat = 16 * ch[-1]
        self._add("flat", Reshape((flat,)), [f"X{L},0"], (flat,))
        self._add("emb_fc1", Linear(flat, cfg.embedding_hidden), ["flat"], (cfg.embedding_hidden,))
        self._add("emb_act", LeakyReLU(), ["emb_fc1"], (cfg.embedding_hidden,))
        self._add("embedding", Linear(cfg.embedding_hidden, cfg.embedding_dim), ["emb_act"], (cfg.embedding_dim,))

        dec = cfg.decoder_channels
        n_coarse = cfg.map_size(L) ** 2
        self._add("seed_fc", Linear(cfg.embedding_dim, n_coarse * dec), ["embedding"], (n_coarse * dec,))
        self._add("seed_reshape", Reshape((n_coarse, dec)), ["seed_fc"], (n_coarse, dec))
        vert = self._add(f"V{L}", LeakyReLU(), ["seed_reshape"], (n_coarse, dec))

        h = self.hierarchy
        for i in range(L, 0, -1):
            k = self._level_index(i)
            n = h.counts[k]
            bridge = wiring["bridges"][i]
            if bridge is not None:
                c = self.node_shapes[bridge][2]
                b = self._add(f"B{i}", Reshape((n, c)), [bridge], (n, c))
                vin = self._add(f"cat_dec{i}", Concat(), [b, vert], (n, c + dec))
                width = c + dec
            else:
                vin, width = vert, dec
            block = DenseGCNBlock(width, cfg.growth, dec, h.laplacians[k], cfg.cheb_order)
            g = self._add(f"G{i}", block, [vin], (n, dec))
            if i > 1:
                vert = self._add(f"V{i - 1}", GraphUpsample(h.pairs[k - 1].q_up), [g], (h.counts[k - 1], dec))
            else:
                vert = g
        if self.offset:
            vert = self._add("V_out", GraphUpsample(h.pairs[0].q_up), [vert], (h.counts[0], dec))
        lap0 = h.laplacians[0]
        self._add("head1", ChebConv(dec, cfg.head_channels, lap0, cfg.cheb_order, cfg.graph_bias),
                  [vert], (h.counts[0], cfg.head_channels))
        self._add("head_act", LeakyReLU(), ["head1"], (h.counts[0], cfg.head_channels))
        self._add("out", ChebConv(cfg.head_channels, 3, lap0, cfg.cheb_order, cfg.graph_bias),
                  ["head_act"], (h.counts[0], 3))

    # -- execution --------------------------------------------------------------

    def train(self, mode: bool = True) -> "AggregationNet":
        self.training = mode
        for s in self.steps:
            s.op.train(mode)
        return self

    def eval(self) -> "AggregationNet":
        return self.train(False)

    def _params(self, step: _Step) -> dict[str, np.ndarray]:
        prefix = step.name + "."
        return self.store.view(prefix, step.op.param_specs().keys())

    def forward(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=self.config.dtype)
        size = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (size, size, 3):
            raise ConfigError(f"expected B x {size} x {size} x 3 images, got {x.shape}")
        values = {"image": x}
        for step in self.steps:
            y = step.op.forward(*(values[n] for n in step.inputs), params=self._params(step))
            if not np.all(np.isfinite(y)):
                raise NonFiniteError(f"non-finite activation in layer {step.name!r}")
            values[step.name] = y
        self._values = values
        return values["out"]

    def backward(self, grad_out) -> None:
        """Accumulate parameter gradients for the last forward pass."""
        if self._values is None:
            raise EngineError("backward called without a matching forward pass")
        grads: dict[str, np.ndarray] = {"out": np.asarray(grad_out, dtype=self.config.dtype)}
        for step in reversed(self.steps):
            g = grads.pop(step.name, None)
            if g is None:
                g = np.zeros_like(self._values[step.name])
            in_grads, p_grads = step.op.backward(g)
            self.store.accumulate(step.name + ".", p_grads)
            for name, gi in zip(step.inputs, in_grads):
                if name == "image":
                    continue
                if name in grads:
                    grads[name] = grads[name] + gi
                else:
                    grads[name] = gi
        self._values = None

    def kink_state(self) -> bytes:
        return b"".join(s.op.kink_state() for s in self.steps)

    # -- persistence ------------------------------------------------------------

    def checkpoint_bytes(self, meta: dict[str, float] | None = None) -> bytes:
        s = self.store
        tensors = [(n, s.value(n)) for n in s.names()]
        tensors += [(f"meta/{k}", np.array([v], dtype=np.float32)) for k, v in sorted((meta or {}).items())]
        velocities = [(n, s.velocity(n)) for n in s.names(trainable_only=True)]
        return encode_checkpoint(tensors, velocities)

    def save_checkpoint(self, path, meta: dict[str, float] | None = None) -> None:
        Path(path).write_bytes(self.checkpoint_bytes(meta))

    def load_state(self, buf: bytes) -> dict[str, float]:
        tensors, velocities = decode_checkpoint(buf)
        meta = {n[5:]: float(v[0]) for n, v in tensors if n.startswith("meta/")}
        tensors = [(n, v) for n, v in tensors if not n.startswith("meta/")]
        expected = self.store.names()
        if [n for n, _ in tensors] != expected:
            missing = set(expected) ^ {n for n, _ in tensors}
            raise CheckpointError(f"checkpoint tensors do not match the config: {sorted(missing)[:5]}")
        if [n for n, _ in velocities] != self.store.names(trainable_only=True):
            raise CheckpointError("checkpoint velocity tensors do not match the config")
        for n, v in tensors:
            if v.shape != self.store.value(n).shape:
                raise CheckpointError(f"shape mismatch for {n}: {v.shape} vs {self.store.value(n).shape}")
        for n, v in tensors:
            self.store.set_value(n, v)
        for n, v in velocities:
            self.store.set_velocity(n, v)
        return meta


def build_model(config: NetConfig, hierarchy: MeshHierarchy, seed: int = 0) -> AggregationNet:
    return AggregationNet(config, hierarchy, seed)


def load_checkpoint(config: NetConfig, hierarchy: MeshHierarchy, path) -> tuple[AggregationNet, dict]:
    model = AggregationNet(config, hierarchy)
    meta = model.load_state(Path(path).read_bytes())
    return model, meta


def save_checkpoint(model: AggregationNet, path, meta=None) -> None:
    model.save_checkpoint(path, meta)


def config_to_json(config: NetConfig) -> str:
    return json.dumps(config.to_dict(), indent=2)

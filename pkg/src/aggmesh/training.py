"""Mini-batch training and evaluation loops for :class:`AggregationNet`."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .data import SampleRecord, augment
from .engine import NonFiniteError, SeededRNG, lr_schedule, sgd_momentum_step
from .losses import EvalReport, LossSpec, RegressionLoss, dense_nme, nme
from .model import AggregationNet, ConfigError, NetConfig


@dataclass
class TrainConfig:
    """Optimisation settings. ``loss_scale`` multiplies the signed error
    before the loss, so the default expresses it in input pixels."""

    seed: int = 7
    batch_size: int = 48
    steps: int = 2000
    lr: float = 1e-3
    momentum: float = 0.9
    decay: float = 0.99
    loss: str = "paper_eq3"
    loss_w: float = 5.0
    loss_eps: float = 4.0
    loss_scale: float | None = None
    augment: bool = False
    log_every: int = 10
    ckpt_every: int = 500

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if self.log_every < 1 or self.ckpt_every < 1:
            raise ConfigError("log_every and ckpt_every must be >= 1")
        LossSpec(self.loss, self.loss_w, self.loss_eps)

    def loss_spec(self) -> LossSpec:
        return LossSpec(self.loss, self.loss_w, self.loss_eps)

    def scale_for(self, net: NetConfig) -> float:
        return net.input_size / 2.0 if self.loss_scale is None else float(self.loss_scale)


@dataclass
class RunConfig:
    """A full run: network plus optimisation settings, serialisable as JSON."""

    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {"net": self.net.to_dict(), "train": asdict(self.train)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"net", "train"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        known = {f.name for f in fields(TrainConfig)}
        bad = set(d.get("train", {})) - known
        if bad:
            raise ConfigError(f"unknown train keys: {sorted(bad)}")
        return cls(NetConfig.from_dict(d.get("net", {})), TrainConfig(**d.get("train", {})))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc


def desk_config(**train_overrides) -> RunConfig:
    """The small configuration used for the synthetic experiments."""
    train = dict(batch_size=8, steps=2000, seed=7)
    train.update(train_overrides)
    return RunConfig(NetConfig(), TrainConfig(**train))


def stack_batch(records: list[SampleRecord], dtype) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([r.image for r in records]).astype(dtype)
    verts = np.stack([r.gt_vertices for r in records]).astype(dtype)
    return images, verts


def check_records(records: list[SampleRecord], net: NetConfig, n_vertices: int) -> None:
    if not records:
        raise ConfigError("dataset is empty")
    for k, r in enumerate(records):
        if r.image.shape[0] != net.input_size:
            raise ConfigError(f"sample {k}: image is {r.image.shape[0]} px, config expects {net.input_size}")
        if r.gt_vertices.shape[0] != n_vertices:
            raise ConfigError(f"sample {k}: {r.gt_vertices.shape[0]} vertices, hierarchy has {n_vertices}")


def train(
    model: AggregationNet,
    records: list[SampleRecord],
    cfg: TrainConfig,
    *,
    start_step: int = 0,
    on_log: Callable[[int, float, float], None] | None = None,
    on_checkpoint: Callable[[int], None] | None = None,
) -> list[tuple[int, float, float]]:
    """Run ``cfg.steps`` optimiser steps; returns ``(step, lr, loss)`` rows.

    One epoch is ``len(records) // batch_size`` steps. Each epoch uses its
    own permutation drawn from ``(seed, "epoch", e)``, and augmentation for
    sample ``i`` at step ``s`` draws from ``(seed, "aug", s, i)``, so a resumed
    run replays exactly the batches of an uninterrupted one.
    """
    n = len(records)
    check_records(records, model.config, model.n_output)
    bsz = min(cfg.batch_size, n)
    per_epoch = max(n // bsz, 1)
    root = SeededRNG(cfg.seed, ("train",))
    loss_op = RegressionLoss(cfg.loss_spec())
    scale = np.asarray(cfg.scale_for(model.config), dtype=model.config.dtype)
    model.train()
    log = []
    perm, perm_epoch = None, -1
    for step in range(start_step, start_step + cfg.steps):
        epoch, slot = divmod(step, per_epoch)
        if epoch != perm_epoch:
            perm, perm_epoch = root.split(("epoch", epoch)).permutation(n), epoch
        idx = perm[slot * bsz:(slot + 1) * bsz]
        batch = [records[i] for i in idx]
        if cfg.augment:
            batch = [augment(r, root.split(("aug", step, int(i)))) for r, i in zip(batch, idx)]
        images, target = stack_batch(batch, model.config.dtype)
        pred = model.forward(images)
        loss = float(loss_op.forward(pred * scale, target * scale))
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite loss at step {step}")
        (g, _), _ = loss_op.backward(np.asarray(1.0, dtype=pred.dtype))
        model.backward(g * scale)
        lr = lr_schedule(cfg.lr, cfg.decay, epoch)
        sgd_momentum_step(model.store, lr, cfg.momentum)
        done = step + 1
        if done % cfg.log_every == 0 or done == start_step + cfg.steps:
            log.append((done, lr, loss))
            if on_log:
                on_log(done, lr, loss)
        if on_checkpoint and done % cfg.ckpt_every == 0:
            on_checkpoint(done)
    return log


def predict(model: AggregationNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    model.eval()
    outs = [model.forward(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return np.concatenate(outs, axis=0)


def dataset_loss(model: AggregationNet, records: list[SampleRecord], cfg: TrainConfig,
                 batch_size: int = 8) -> float:
    """Training objective over the whole of ``records`` with the model in eval mode.

    Unlike the last logged mini-batch loss this does not depend on which
    batch happened to come last, so it is the number to compare across runs.
    """
    check_records(records, model.config, model.n_output)
    images, target = stack_batch(records, model.config.dtype)
    pred = predict(model, images, batch_size)
    scale = cfg.scale_for(model.config)
    loss_op = RegressionLoss(cfg.loss_spec())
    return float(loss_op.forward(pred.astype(np.float64) * scale, target.astype(np.float64) * scale))


def evaluate(
    model: AggregationNet,
    records: list[SampleRecord],
    sample_ids: list[str] | None = None,
    *,
    mode: int = 3,
    landmarks_only: bool = False,
    batch_size: int = 8,
) -> EvalReport:
    """Per-sample NME in eval mode (running batch-norm statistics).

    Dense NME over every vertex by default; ``landmarks_only`` restricts the
    error to each record's landmark indices.
    """
    check_records(records, model.config, model.n_output)
    images, _ = stack_batch(records, model.config.dtype)
    pred = predict(model, images, batch_size)
    return report_from_predictions(pred, records, sample_ids, mode=mode, landmarks_only=landmarks_only)


def report_from_predictions(pred, records, sample_ids=None, *, mode=3, landmarks_only=False) -> EvalReport:
    ids = sample_ids or [f"{k:05d}" for k in range(len(records))]
    errs = []
    for p, r in zip(pred, records):
        gt = np.asarray(r.gt_vertices, dtype=np.float64)
        if landmarks_only:
            if not r.landmark_indices:
                raise ConfigError("landmarks_only requested but a sample has no landmark indices")
            li = np.asarray(r.landmark_indices)
            errs.append(nme(p[li], gt[li], mode))
        else:
            errs.append(dense_nme(p, gt, r.landmark_indices, mode))
    return EvalReport(list(ids), errs, [r.yaw_degrees for r in records])


class TrainLogWriter:
    """Appends ``step,lr,loss`` rows to ``train_log.csv``."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        fresh = not (append and self.path.exists())
        self._fh = open(self.path, "w" if fresh else "a", newline="")
        self._w = csv.writer(self._fh)
        if fresh:
            self._w.writerow(["step", "lr", "loss"])

    def __call__(self, step, lr, loss):
        self._w.writerow([step, repr(float(lr)), repr(float(loss))])
        self._fh.flush()

    def close(self):
        self._fh.close()


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0

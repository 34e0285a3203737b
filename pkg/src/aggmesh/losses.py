"""Regression losses and landmark-error metrics (NME, CED, yaw-binned means)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import DiffOp

LOSS_KINDS = ("paper_eq3", "l1", "l2", "smooth_l1")
YAW_BINS = ((0.0, 30.0), (30.0, 60.0), (60.0, 90.0))


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class LossSpec:
    """Loss choice. For ``paper_eq3``, ``w`` bounds the exponential region,
    ``epsilon`` sets its curvature, and ``c`` joins it to the linear tails."""

    kind: str = "paper_eq3"
    w: float = 5.0
    epsilon: float = 4.0
    beta: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "paper_eq3" and not (self.w > 0 and self.epsilon > 0):
            raise ValueError("w and epsilon must be positive")
        if self.kind == "smooth_l1" and not self.beta > 0:
            raise ValueError("beta must be positive")

    @property
    def c(self) -> float:
        return self.w - self.w * math.expm1(self.w / self.epsilon)


def _eq3_elementwise(x, spec: LossSpec):
    a = np.abs(x)
    inner = spec.w * np.expm1(np.minimum(a, spec.w) / spec.epsilon)
    return np.where(a < spec.w, inner, a - spec.c)


def _eq3_grad_elementwise(x, spec: LossSpec):
    a = np.abs(x)
    # at |x| == w the exponential branch is used
    inner = (spec.w / spec.epsilon) * np.exp(np.minimum(a, spec.w) / spec.epsilon)
    return np.sign(x) * np.where(a <= spec.w, inner, 1.0)


def loss_value(x, spec: LossSpec = LossSpec()) -> float:
    """Mean of the elementwise loss of signed errors ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == "paper_eq3":
        e = _eq3_elementwise(x, spec)
    elif spec.kind == "l1":
        e = np.abs(x)
    elif spec.kind == "l2":
        e = x * x
    else:
        a = np.abs(x)
        e = np.where(a < spec.beta, 0.5 * x * x / spec.beta, a - 0.5 * spec.beta)
    return float(np.mean(e))


def loss_gradient(x, spec: LossSpec = LossSpec()) -> np.ndarray:
    """Gradient of :func:`loss_value` w.r.t. ``x`` (mean reduction, sign(0) = 0)."""
    x = np.asarray(x)
    n = x.size
    if spec.kind == "paper_eq3":
        g = _eq3_grad_elementwise(x, spec)
    elif spec.kind == "l1":
        g = np.sign(x)
    elif spec.kind == "l2":
        g = 2.0 * x
    else:
        g = np.where(np.abs(x) < spec.beta, x / spec.beta, np.sign(x))
    return (g / n).astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)


def l1_loss(x) -> float:
    return loss_value(x, LossSpec("l1"))


def l2_loss(x) -> float:
    return loss_value(x, LossSpec("l2"))


def smooth_l1_loss(x, beta: float = 1.0) -> float:
    return loss_value(x, LossSpec("smooth_l1", beta=beta))


class RegressionLoss(DiffOp):
    """``loss(pred - target)`` as a differentiable op with a scalar output."""

    def __init__(self, spec: LossSpec = LossSpec()):
        self.spec = spec

    def _forward(self, pred, target, params):
        self._x = pred - target
        return np.asarray(loss_value(self._x, self.spec))

    def _backward(self, grad):
        g = loss_gradient(self._x, self.spec) * np.asarray(grad, dtype=self._x.dtype)
        return (g, -g), {}

    def kink_state(self):
        x = self._x
        bits = [x > 0, x < 0]
        if self.spec.kind == "paper_eq3":
            bits.append(np.abs(x) < self.spec.w)
        return b"".join(np.packbits(b).tobytes() for b in bits)


# -- metrics --------------------------------------------------------------------


def nme(pred, gt, mode: int = 3) -> float:
    """Mean point error normalised by ``sqrt(width * height)`` of the gt x-y box."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if mode not in (2, 3):
        raise MetricError("mode must be 2 or 3")
    if pred.shape != gt.shape or gt.ndim != 2 or gt.shape[1] < mode:
        raise MetricError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if len(gt) < 2:
        raise MetricError("need at least two landmarks")
    extent = gt[:, :2].max(axis=0) - gt[:, :2].min(axis=0)
    size = math.sqrt(extent[0] * extent[1])
    if not size > 0:
        raise MetricError("ground-truth landmarks span a zero-area box")
    dist = np.linalg.norm(pred[:, :mode] - gt[:, :mode], axis=1)
    return float(dist.mean() / size)


def dense_nme(pred, gt, landmark_indices=None, mode: int = 3) -> float:
    """NME over every vertex, with the box taken from the landmarks when known."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    box_pts = gt if landmark_indices is None else gt[np.asarray(landmark_indices)]
    extent = box_pts[:, :2].max(axis=0) - box_pts[:, :2].min(axis=0)
    size = math.sqrt(extent[0] * extent[1])
    if not size > 0:
        raise MetricError("ground-truth landmarks span a zero-area box")
    return float(np.linalg.norm(pred[:, :mode] - gt[:, :mode], axis=1).mean() / size)


def ced_curve(errors, thresholds) -> list[tuple[float, float]]:
    """Fraction of ``errors`` at or below each threshold."""
    errs = np.sort(np.asarray(errors, dtype=np.float64))
    th = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(th) < 0):
        raise MetricError("thresholds must be sorted ascending")
    if len(errs) == 0:
        return [(float(t), 0.0) for t in th]
    frac = np.searchsorted(errs, th, side="right") / len(errs)
    return [(float(t), float(f)) for t, f in zip(th, frac)]


def yaw_bin(yaw: float) -> int:
    a = abs(float(yaw))
    if a > 90.0:
        raise MetricError(f"yaw {yaw} outside [-90, 90]")
    return 0 if a < 30.0 else 1 if a < 60.0 else 2


def yaw_binned_report(nmes, yaws) -> dict[str, float]:
    """Mean NME per |yaw| bin; empty bins are omitted."""
    bins: dict[int, list[float]] = {}
    for e, y in zip(nmes, yaws):
        bins.setdefault(yaw_bin(y), []).append(float(e))
    out = {}
    for k, (lo, hi) in enumerate(YAW_BINS):
        if k in bins:
            out[f"{lo:g}-{hi:g}"] = float(np.mean(bins[k]))
    return out


@dataclass
class EvalReport:
    sample_ids: list[str]
    nmes: list[float]
    yaws: list[float | None] = field(default_factory=list)
    thresholds: list[float] = field(default_factory=lambda: list(np.linspace(0.0, 0.1, 101)))

    @property
    def mean_nme(self) -> float:
        return float(np.mean(self.nmes)) if self.nmes else float("nan")

    @property
    def ced(self):
        return ced_curve(self.nmes, self.thresholds)

    @property
    def yaw_means(self):
        pairs = [(e, y) for e, y in zip(self.nmes, self.yaws) if y is not None]
        return yaw_binned_report(*zip(*pairs)) if pairs else {}

    def write_csv(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        yaws = self.yaws or [None] * len(self.nmes)
        with open(out / "nme.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "nme", "yaw"])
            for sid, e, y in zip(self.sample_ids, self.nmes, yaws):
                w.writerow([sid, repr(float(e)), "" if y is None else repr(float(y))])
        with open(out / "ced.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fraction"])
            for t, f in self.ced:
                w.writerow([repr(t), repr(f)])

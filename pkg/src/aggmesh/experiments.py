"""The synthetic experiments at desk scale: an overfitting run and an
aggregation-mode ablation, both on deformed-sphere depth images."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .data import DeformSpec, SampleRecord, synth_dataset
from .model import AggregationNet, NetConfig
from .sampling import MeshHierarchy, build_hierarchy
from .shapes import fibonacci_sphere
from .training import TrainConfig, dataset_loss, desk_config, evaluate, train

DESK_SCHEDULE = [1024, 256, 64, 16]


@dataclass
class DeskTask:
    hierarchy: MeshHierarchy
    records: list[SampleRecord]

    @property
    def template(self):
        return self.hierarchy.levels[0]


def desk_task(count: int = 32, seed: int = 7, spec: DeformSpec = DeformSpec(),
              radius: float = 0.6) -> DeskTask:
    """Sphere hierarchy ``[1024, 256, 64, 16]`` plus ``count`` 64 px samples."""
    template = fibonacci_sphere(DESK_SCHEDULE[0], radius)
    hierarchy = build_hierarchy(template, DESK_SCHEDULE)
    return DeskTask(hierarchy, synth_dataset(template, spec, count, seed=seed, image_size=64))


def mean_shape_nme(task: DeskTask) -> float:
    """NME of always predicting the average training mesh, a floor to beat."""
    from .training import report_from_predictions

    gt = np.stack([r.gt_vertices for r in task.records])
    return report_from_predictions(np.broadcast_to(gt.mean(0), gt.shape), task.records).mean_nme


def overfit(task: DeskTask, steps: int = 2000, *, eval_every: int = 0,
            on_eval: Callable[[int, float], None] | None = None, **train_overrides):
    """Train the desk model on ``task`` and return ``(model, final training NME)``.

    With ``eval_every`` set, training pauses every that many steps to report
    the training-set NME through ``on_eval``; this does not change the
    trajectory because batches depend only on the step index.
    """
    run = desk_config(**train_overrides)
    model = AggregationNet(run.net, task.hierarchy, seed=run.train.seed)
    chunk = eval_every or steps
    done = 0
    while done < steps:
        n = min(chunk, steps - done)
        train(model, task.records, replace(run.train, steps=n), start_step=done)
        done += n
        if on_eval and done < steps:
            on_eval(done, evaluate(model, task.records).mean_nme)
    final = evaluate(model, task.records).mean_nme
    if on_eval:
        on_eval(done, final)
    return model, final


@dataclass
class AblationResult:
    mode: str
    seed: int
    loss: float
    nme: float
    seconds: float


def ablation(task: DeskTask, modes=("full", "shallow", "none"), seeds=(7, 8, 9), steps: int = 1000,
             on_result: Callable[[AblationResult], None] | None = None) -> list[AblationResult]:
    """Train one desk model per (mode, seed) for ``steps`` steps.

    The reported loss is the training objective over the whole training set
    in eval mode once training ends. The seed drives both initialisation and
    batch order; the dataset is shared.
    """
    out = []
    for seed in seeds:
        for mode in modes:
            run = desk_config(seed=seed, steps=steps)
            net = NetConfig(**{**run.net.to_dict(), "aggregation_mode": mode})
            t0 = time.perf_counter()
            model = AggregationNet(net, task.hierarchy, seed=seed)
            train(model, task.records, run.train)
            res = AblationResult(mode, seed, dataset_loss(model, task.records, run.train),
                                 evaluate(model, task.records).mean_nme, time.perf_counter() - t0)
            out.append(res)
            if on_result:
                on_result(res)
    return out


def ablation_means(results: list[AblationResult]) -> dict[str, float]:
    modes = dict.fromkeys(r.mode for r in results)
    return {m: float(np.mean([r.loss for r in results if r.mode == m])) for m in modes}

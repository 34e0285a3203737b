import json

import numpy as np
import pytest

from aggmesh.data import load_dataset
from aggmesh.model import AggregationNet, ConfigError
from aggmesh.sampling import load_hierarchy
from aggmesh.training import RunConfig, TrainConfig, evaluate, report_from_predictions, train


@pytest.fixture
def setup(micro_workspace):
    cfg = RunConfig.load(micro_workspace / "config.json")
    h = load_hierarchy(micro_workspace / "hierarchy")
    _, recs = load_dataset(micro_workspace / "data")
    return cfg, h, recs


def test_config_round_trip(setup):
    cfg, _, _ = setup
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))).to_dict() == cfg.to_dict()
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"learning_rate": 1.0}})
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


def test_training_reduces_loss(setup):
    cfg, h, recs = setup
    model = AggregationNet(cfg.net, h, seed=cfg.train.seed)
    tc = TrainConfig(**{**cfg.train.__dict__, "steps": 40, "log_every": 1})
    log = train(model, recs, tc)
    assert len(log) == 40
    first, last = np.mean([r[2] for r in log[:5]]), np.mean([r[2] for r in log[-5:]])
    assert last < first
    # two steps per epoch with 8 samples and batch 4
    assert log[1][1] == pytest.approx(1e-3) and log[2][1] == pytest.approx(0.99e-3)


def test_training_is_bit_reproducible(setup):
    cfg, h, recs = setup
    blobs = []
    for _ in range(2):
        model = AggregationNet(cfg.net, h, seed=cfg.train.seed)
        train(model, recs, cfg.train)
        blobs.append(model.checkpoint_bytes({"step": cfg.train.steps}))
    assert blobs[0] == blobs[1]


def test_resume_matches_uninterrupted(setup):
    cfg, h, recs = setup
    whole = AggregationNet(cfg.net, h, seed=cfg.train.seed)
    train(whole, recs, cfg.train)
    part = AggregationNet(cfg.net, h, seed=cfg.train.seed)
    train(part, recs, TrainConfig(**{**cfg.train.__dict__, "steps": 5}))
    blob = part.checkpoint_bytes({"step": 5})
    resumed = AggregationNet(cfg.net, h, seed=99)
    meta = resumed.load_state(blob)
    train(resumed, recs, TrainConfig(**{**cfg.train.__dict__, "steps": 7}), start_step=int(meta["step"]))
    assert resumed.checkpoint_bytes() == whole.checkpoint_bytes()


def test_augmented_training_runs(setup):
    cfg, h, recs = setup
    model = AggregationNet(cfg.net, h, seed=1)
    log = train(model, recs, TrainConfig(**{**cfg.train.__dict__, "steps": 4, "augment": True}))
    assert np.isfinite(log[-1][2])


def test_evaluate_and_perfect_predictions(setup):
    cfg, h, recs = setup
    model = AggregationNet(cfg.net, h)
    rep = evaluate(model, recs)
    assert len(rep.nmes) == len(recs) and rep.mean_nme > 0
    exact = report_from_predictions(np.stack([r.gt_vertices for r in recs]), recs)
    assert all(e == 0.0 for e in exact.nmes)
    lm = report_from_predictions(np.stack([r.gt_vertices for r in recs]), recs, landmarks_only=True, mode=2)
    assert lm.mean_nme == 0.0


def test_record_validation(setup):
    cfg, h, recs = setup
    model = AggregationNet(cfg.net, h)
    with pytest.raises(ConfigError):
        train(model, [], cfg.train)

import json

import numpy as np
import pytest

from roundrefine.datagen import DatasetManifest, generate_dataset
from roundrefine.model import ROUND0, ModelConfig
from roundrefine.train import ABLATIONS, TrainConfig, Trainer, run_training, stage_plan

from conftest import TINY


def test_stage_plans_share_total_epochs():
    plans = {a: stage_plan(TrainConfig(ablation=a)) for a in ABLATIONS}
    assert plans["full"] == [("warmup", 3), ("expert", 3), ("online", 10)]
    assert plans["multitask_only"] == plans["refinement_only"] == [("warmup", 16)]
    assert plans["offline_only"] == [("warmup", 8), ("expert", 8)]
    assert plans["online_only"] == [("online", 16)]
    assert {sum(e for _, e in p) for p in plans.values()} == {16}


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(ablation="everything")
    with pytest.raises(ValueError):
        TrainConfig(T=0)
    with pytest.raises(ValueError):
        TrainConfig(expert_loss="one")


def _mixed(small_data):
    return small_data["sparse"][:6] + small_data["dense"][:6]


def test_sparse_samples_never_get_ntp_weight(small_data):
    tr = Trainer(TrainConfig(seed=1), TINY)
    batch = _mixed(small_data)
    is_sparse = np.array([ep.reasoning is None for ep in batch])
    _, bd = tr.warmup_loss(batch)
    assert np.all(bd.ntp_weight[is_sparse] == 0.0) and np.all(bd.ntp[is_sparse] == 0.0)
    assert np.all(bd.ntp_weight[~is_sparse] == 1.0)
    _, bd = tr.online_loss(batch)
    rows = np.tile(is_sparse, tr.cfg.T)
    assert np.all(bd.ntp_weight[rows] == 0.0) and np.all(bd.ntp_weight[~rows] == 1.0)
    with pytest.raises(ValueError, match="sparse"):
        tr.expert_loss(batch)


def test_warmup_loss_matches_independent_sum(small_data):
    tr = Trainer(TrainConfig(seed=1), ModelConfig(hidden=8, dropout=0.0))
    batch = _mixed(small_data)
    loss, bd = tr.warmup_loss(batch)
    assert abs(float(loss.data) - (bd.bce.sum() + bd.ntp.sum()) / len(batch)) < 1e-12
    assert np.all(bd.bce >= 0) and np.all(bd.ntp >= 0)


def test_expert_contexts_hide_the_selected_task(small_data):
    tr = Trainer(TrainConfig(seed=2), TINY)
    dense = small_data["dense"]
    ctxs, tasks = tr.expert_contexts(dense, np.random.default_rng(0))
    for ep, c, t in zip(dense, ctxs, tasks):
        if t == "detect":
            assert c.prev_detection == "none" and c.prev_reasoning == tuple(tr.policy.vocab.encode(ep.reasoning))
        else:
            assert c.prev_detection == ep.label and c.prev_reasoning is None


def test_expert_task_selection_is_fair(small_data):
    tr = Trainer(TrainConfig(seed=2), TINY)
    ep = small_data["dense"][0]
    _, tasks = tr.expert_contexts([ep] * 10_000, np.random.default_rng(1))
    n = sum(t == "detect" for t in tasks)
    assert abs(n - 5000) <= 3 * np.sqrt(10_000 * 0.25)


def test_masked_task_expert_loss(small_data):
    tr = Trainer(TrainConfig(seed=3, expert_loss="masked_task"), TINY)
    _, bd = tr.expert_loss(small_data["dense"][:8])
    assert np.all((bd.bce == 0) | (bd.ntp_weight == 0))


def test_online_step_logs_each_round(small_data):
    tr = Trainer(TrainConfig(seed=4, T=3), TINY)
    tr.total_steps = 10
    tr.online_step(_mixed(small_data))
    recs = tr.records
    assert [r.round for r in recs] == [1, 2, 3] and all(r.phase == "online" for r in recs)
    assert recs[0].dense_fraction == 0.5
    assert tr._last_contexts[0] == [ROUND0] * 12


def test_memorization_sanity():
    data = generate_dataset(DatasetManifest(seed=21, counts={"sparse": 32, "dense": 32, "test": 2}))
    batch = data["sparse"] + data["dense"]
    tr = Trainer(TrainConfig(seed=0, warmup_ratio=0.0, weight_decay=0.0), ModelConfig(dropout=0.0))
    tr.total_steps = 10**9  # flat schedule
    first = None
    for _ in range(200):
        loss, _ = tr.warmup_loss(batch)
        first = float(loss.data) if first is None else first
        tr._apply(loss)
    final = float(tr.warmup_loss(batch)[0].data)
    assert final < 0.05 < first


def test_training_is_deterministic(small_data):
    def run():
        tr = Trainer(TrainConfig(seed=5), TINY)
        tr.total_steps = 6
        tr.warmup_step(_mixed(small_data))
        tr.expert_conditioned_step(small_data["dense"][:6])
        tr.online_step(_mixed(small_data))
        return tr.policy.params.checksum(), [r.to_json() for r in tr.records]

    assert run() == run()


def test_run_training_artifacts(tmp_path, small_data):
    cfg = TrainConfig(seed=6, offline_epochs=1, online_epochs=1, batch_size=32)
    res = run_training(cfg, small_data, tmp_path, TINY)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["final.ckpt", "stage1_warmup.ckpt", "stage2_expert.ckpt", "stage3_online.ckpt", "train_log.jsonl"]
    lines = [json.loads(x) for x in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert set(lines[0]) == {"step", "phase", "round", "loss_bce", "loss_ntp", "lr", "dense_fraction"}
    assert lines[0]["lr"] == 0.0
    steps = sorted({x["step"] for x in lines})
    assert steps == list(range(len(steps)))
    assert res.plan == [("warmup", 1), ("expert", 1), ("online", 1)]


def test_run_training_rejects_mislabelled_splits(small_data):
    bad = dict(small_data, sparse=small_data["dense"][:2])
    with pytest.raises(ValueError):
        run_training(TrainConfig(), bad, None, TINY)

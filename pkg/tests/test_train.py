import json
import math
from dataclasses import replace

import numpy as np
import pytest

from abrkit import synthetic, tinynet, train
from abrkit.errors import EmptyPool, SchemaError
from abrkit.policy import PpoConfig
from abrkit.qoe import LinWeights, default_dnn_spec
from abrkit.train import TrainConfig, Trainer

W = LinWeights(1.0, 25.0, 1.0, 2.0)


@pytest.fixture(scope="module")
def qoe_model():
    m = tinynet.init(default_dnn_spec(width=16), 0)
    m.meta = {"features": {"window": 7, "max_bitrate": 4.3, "rebuffer_clip": 10.0}}
    return m


def small_cfg(**kw):
    ppo = PpoConfig(agents=1, hidden=(16,), lambda_lr=1e-2)
    return replace(TrainConfig(epochs=6, ppo=ppo, validation_interval=0, checkpoint_interval=2), **kw)


def short_manifest():
    return synthetic.synth_manifest(0, n_chunks=8)


def test_pool_of_one_always_selected(qoe_model):
    traces = synthetic.synth_trace_pool(1, 0)
    t = Trainer(small_cfg(), traces, [short_manifest()], W, qoe_model)
    log = t.train()
    assert [r.trace_id for r in log] == [traces[0].id] * 6


def test_log_rows_are_well_formed(qoe_model):
    traces = synthetic.synth_trace_pool(3, 0)
    val = synthetic.synth_trace_pool(2, 9, prefix="val")
    t = Trainer(small_cfg(validation_interval=3), traces, [short_manifest()], W, qoe_model, val)
    log = t.train()
    assert [r.epoch for r in log] == list(range(1, 7))
    assert sorted({r.trace_id for r in log[:3]}) == sorted(x.id for x in traces)
    for r in log:
        assert 0.0 <= r.omega <= 1.0
        assert r.lam >= 0.0
        assert 0.0 <= r.mean_entropy <= math.log(6) + 1e-12
    assert [r.eval_qoe_lin is not None for r in log] == [False, False, True, False, False, True]
    lines = t.run_log_csv().splitlines()
    assert lines[0] == ",".join(train.RUN_LOG_COLUMNS)
    assert len(lines) == 7
    assert len(t.selection_csv().splitlines()) == 7


def test_initial_omega_is_near_one(qoe_model):
    t = Trainer(small_cfg(), synthetic.synth_trace_pool(2, 0), [short_manifest()], W, qoe_model)
    assert t.run_epoch().omega > 0.95


def test_fixed_omega_is_kept(qoe_model):
    t = Trainer(small_cfg(fixed_omega=0.0), synthetic.synth_trace_pool(2, 0), [short_manifest()], W,
                qoe_model)
    t.train()
    assert t.omega == 0.0


def test_uniform_draw_without_selector(qoe_model):
    t = Trainer(small_cfg(use_selector=False, epochs=4), synthetic.synth_trace_pool(3, 0),
                [short_manifest()], W, qoe_model)
    t.train()
    assert all(math.isnan(row[2]) for row in t.selection_log)


def test_same_seed_gives_identical_logs(qoe_model):
    logs = []
    for _ in range(2):
        t = Trainer(small_cfg(), synthetic.synth_trace_pool(3, 0), [short_manifest()], W, qoe_model)
        t.train()
        logs.append((t.run_log_csv(), t.selection_csv(), json.dumps(tinynet.to_dict(t.actor), sort_keys=True)))
    assert logs[0] == logs[1]


def test_resume_matches_uninterrupted_run(tmp_path, qoe_model):
    traces = synthetic.synth_trace_pool(3, 0)
    full = Trainer(small_cfg(), traces, [short_manifest()], W, qoe_model, out_dir=tmp_path / "full")
    full.train()
    part = Trainer(small_cfg(), traces, [short_manifest()], W, qoe_model, out_dir=tmp_path / "part")
    part.train(epochs=4)
    resumed = Trainer(small_cfg(), traces, [short_manifest()], W, qoe_model, out_dir=tmp_path / "part")
    resumed.restore(tmp_path / "part")
    assert resumed.epoch == 4
    resumed.train()
    assert resumed.run_log_csv() == full.run_log_csv()
    assert json.dumps(tinynet.to_dict(resumed.actor), sort_keys=True) == json.dumps(tinynet.to_dict(full.actor), sort_keys=True)
    assert (tmp_path / "part" / "run_log.csv").read_text() == (tmp_path / "full" / "run_log.csv").read_text()


def test_restore_rejects_other_pool(tmp_path, qoe_model):
    t = Trainer(small_cfg(epochs=2), synthetic.synth_trace_pool(2, 0), [short_manifest()], W, qoe_model,
                out_dir=tmp_path)
    t.train()
    other = Trainer(small_cfg(), synthetic.synth_trace_pool(3, 0), [short_manifest()], W, qoe_model)
    with pytest.raises(SchemaError):
        other.restore(tmp_path)


def test_empty_pool():
    with pytest.raises(EmptyPool):
        Trainer(small_cfg(), [], [short_manifest()], W, None)


def test_parameters_stay_finite(qoe_model):
    t = Trainer(small_cfg(epochs=10), synthetic.synth_trace_pool(2, 0), [short_manifest()], W, qoe_model)
    for _ in range(10):
        t.run_epoch()
        assert t.actor.all_finite() and t.critic.all_finite()


def test_config_round_trip():
    cfg = train.desk_config(epochs=7, fixed_omega=1.0)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg

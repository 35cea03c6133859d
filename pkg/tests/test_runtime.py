"""Closed-loop harness: bootstrap models, warm starts, run bookkeeping."""

import json

import numpy as np
import pytest

import gpdmpc.runtime as runtime
from gpdmpc.admm import IterationTrace
from gpdmpc.runtime import (
    AgentRuntime,
    initial_models,
    mean_predictive_variance,
    probe_inputs,
    probe_rmse,
    run_coordination,
    run_experiment,
    warm_start,
)
from gpdmpc.vehicle import ScenarioConfig, initial_formation_states, rollout_plan


def tiny_config(**kw):
    """Three vehicles, short horizon, few consensus rounds: fast but real."""
    base = dict(n_agents=3, horizon=3, k_max=2, window=30, seed=4)
    base.update(kw)
    return ScenarioConfig(**base)


@pytest.fixture(scope="module")
def boot():
    cfg = tiny_config()
    datasets, models = initial_models(cfg, n_points=12)
    return cfg, datasets, models


# ---------------------------------------------------------------------------
# bootstrap models


def test_initial_models_cover_every_agent_and_channel(boot):
    cfg, datasets, models = boot
    assert sorted(datasets) == sorted(models) == [0, 1, 2]
    for i in range(3):
        assert len(datasets[i]) == len(models[i]) == 3
        for ds in datasets[i]:
            assert len(ds) == 12
            assert ds.capacity == cfg.window
        assert datasets[i][0].input_dim == 4
        assert datasets[i][2].input_dim == 2


def test_initial_models_deterministic(boot):
    cfg, _, models = boot
    _, again = initial_models(cfg, n_points=12)
    for i in range(3):
        for c in range(3):
            a, b = models[i][c].config, again[i][c].config
            assert a.signal_variance == b.signal_variance
            assert a.noise_variance == b.noise_variance
            assert np.array_equal(a.lengthscales, b.lengthscales)


def test_initial_models_imperfect_on_held_out_probes(boot):
    """A handful of bootstrap points cannot pin the dynamics everywhere."""
    cfg, _, models = boot
    for i in range(3):
        rmse = probe_rmse(cfg, i, models[i])
        assert all(np.isfinite(rmse)) and len(rmse) == 3
        assert max(rmse) > 5e-4


def test_probe_set_is_fixed_and_admissible(boot):
    cfg = boot[0]
    ops, inputs = probe_inputs(cfg)
    ops2, _ = probe_inputs(cfg)
    assert np.array_equal(ops, ops2)
    assert ops.shape == (64, 4)
    theta, v, accel, steer = ops.T
    assert np.all((v >= cfg.v_min) & (v <= cfg.v_max))
    assert np.all(np.abs(steer) <= cfg.steer_max)
    assert np.all(v + cfg.dt * accel >= cfg.v_min - 1e-12)
    assert np.all(v + cfg.dt * accel <= cfg.v_max + 1e-12)
    assert inputs[0].shape == (64, 4) and inputs[2].shape == (64, 2)


def test_mean_predictive_variance_positive(boot):
    cfg, _, models = boot
    _, inputs = probe_inputs(cfg)
    var = mean_predictive_variance(models[0], inputs)
    assert var > 0.0


# ---------------------------------------------------------------------------
# warm starts


def _runtime_for(cfg, models, agent_id=0):
    states = initial_formation_states(cfg)
    return AgentRuntime(
        agent_id=agent_id,
        plant=None,
        state=states[agent_id],
        datasets=[],
        models=list(models[agent_id]),
    )


def test_cold_start_inputs_small_admissible_and_seeded(boot):
    cfg, _, models = boot
    rt = _runtime_for(cfg, models)
    plan = warm_start(cfg, rt)
    U, _, _ = cfg.layout.unpack(plan)
    assert np.all(U[:, 0] >= 0.0) and np.all(U[:, 0] <= 0.2 * cfg.accel_max)
    assert np.all(np.abs(U[:, 1]) <= 0.1 * cfg.steer_max)
    assert np.array_equal(plan, warm_start(cfg, _runtime_for(cfg, models)))
    other = warm_start(cfg, _runtime_for(cfg, models, agent_id=1))
    assert not np.array_equal(plan, other)


def test_warm_start_shifts_and_repeats_inputs(boot):
    cfg, _, models = boot
    rt = _runtime_for(cfg, models)
    U = np.array([[0.1, 0.0], [0.2, 0.05], [0.3, -0.05]])
    rt.plan = rollout_plan(cfg, rt.models, rt.state, U)
    shifted, _, _ = cfg.layout.unpack(warm_start(cfg, rt))
    assert np.allclose(shifted, [[0.2, 0.05], [0.3, -0.05], [0.3, -0.05]])


# ---------------------------------------------------------------------------
# closed loop


@pytest.fixture(scope="module")
def short_run():
    cfg = tiny_config()
    runlog, runtimes = run_experiment(cfg, steps=2, probe_every=0, n_initial=12)
    return cfg, runlog, runtimes


def test_experiment_records_every_step(short_run):
    cfg, runlog, _ = short_run
    assert [r.step for r in runlog.records] == [0, 1]
    for r in runlog.records:
        assert sorted(r.states) == [0, 1, 2]
        assert 0.0 <= r.accepted_fraction <= 1.0
        assert np.isfinite(r.consensus_residual)
        assert np.isfinite(r.lagrangian)
        assert r.plan_seconds > 0.0
    assert runlog.meta["mode"] == "experiment"
    # probes at start and end even with periodic probing off
    assert sorted(runlog.rmse) == [0, 2]
    assert sorted(runlog.variance) == [0, 2]


def test_experiment_appends_one_observation_per_step(short_run):
    _, _, runtimes = short_run
    for rt in runtimes.values():
        for ds in rt.datasets:
            assert len(ds) == 12 + 2


def test_window_caps_dataset_growth():
    cfg = tiny_config(window=13)
    _, runtimes = run_experiment(cfg, steps=2, probe_every=0, n_initial=12)
    for rt in runtimes.values():
        for ds in rt.datasets:
            assert len(ds) == 13  # 12 + 2 observations, oldest dropped


def test_runs_are_reproducible():
    cfg = tiny_config()
    log_a, _ = run_experiment(cfg, steps=2, probe_every=0, n_initial=12)
    log_b, _ = run_experiment(cfg, steps=2, probe_every=0, n_initial=12)
    for ra, rb in zip(log_a.records, log_b.records):
        assert ra.states == rb.states
        assert ra.inputs == rb.inputs
        assert ra.lagrangian == rb.lagrangian


def test_coordination_restarts_from_formation(short_run):
    cfg, _, runtimes = short_run
    moved = {i: rt.state for i, rt in runtimes.items()}
    _, back = run_coordination(cfg, steps=0, runtimes=runtimes)
    states = initial_formation_states(cfg)
    for i, rt in back.items():
        assert rt.state == states[i]
        assert rt.plan is None
        assert np.array_equal(rt.last_input, np.zeros(2))
        assert moved[i] != states[i]  # the experiment really had moved them


def test_coordination_does_not_learn(short_run):
    cfg, _, runtimes = short_run
    sizes = {i: len(rt.datasets[0]) for i, rt in runtimes.items()}
    runlog, after = run_coordination(cfg, steps=1, runtimes=runtimes)
    assert {i: len(rt.datasets[0]) for i, rt in after.items()} == sizes
    assert runlog.meta["mode"] == "coordination"


def test_non_finite_plan_falls_back_to_last_input(monkeypatch, caplog):
    cfg = tiny_config()

    class Broken:
        def __init__(self, dims):
            self.x = {i: np.full(d, np.nan) for i, d in dims.items()}
            self.trace = IterationTrace(records=[], initial_lagrangian=0.0, meta={})

    def fake_run(problem, params, init, mode="sequential", **kw):
        return Broken({i: v.size for i, v in init.items()})

    monkeypatch.setattr(runtime, "run_admm_c", fake_run)
    with caplog.at_level("WARNING", logger="gpdmpc.runtime"):
        runlog, runtimes = run_experiment(cfg, steps=1, probe_every=0, n_initial=12)
    assert "holding previous" in caplog.text
    for i, rt in runtimes.items():
        assert rt.plan is None  # never stored a poisoned plan
        assert runlog.records[0].inputs[i] == (0.0, 0.0)


# ---------------------------------------------------------------------------
# artifacts


def test_runlog_save_csv_and_json(short_run, tmp_path):
    cfg, runlog, _ = short_run
    csv_path = tmp_path / "traj.csv"
    runlog.save_csv(csv_path)
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0].split(",")[:4] == ["step", "agent", "x", "y"]
    assert len(lines) == 1 + 2 * cfg.n_agents

    json_path = tmp_path / "log.json"
    runlog.save_json(json_path)
    payload = json.loads(json_path.read_text())
    assert payload["meta"]["mode"] == "experiment"
    assert len(payload["steps"]) == 2
    assert "0" in payload["rmse"] and "2" in payload["rmse"]

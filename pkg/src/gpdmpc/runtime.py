"""Closed-loop simulation around the consensus planner.

Two modes share one loop:

- experiment: the information weight is active, every vehicle appends its
  noisy one-step increments to the channel windows and refits after each
  step (active data collection).
- coordination: the information weight is zero and the models are frozen
  (pure formation tracking with whatever was learned before).

Initial models are fitted on synthetic responses of the *nominal* geometry,
so they start deliberately wrong about each perturbed plant; held-out probes
against the true per-vehicle dynamics quantify how much the window of real
observations repairs them.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .admm import run_admm_c
from .gp import Dataset, KernelConfig, fit_gp, optimize_hyperparameters
from .problem import build_consensus
from .vehicle import (
    CHANNELS,
    ScenarioConfig,
    VehicleState,
    bicycle_step,
    build_vehicle_agents,
    initial_formation_states,
    plant_params,
    reference_point,
    rollout_plan,
)

__all__ = [
    "AgentRuntime",
    "RunLog",
    "StepRecord",
    "initial_models",
    "probe_inputs",
    "probe_rmse",
    "mean_predictive_variance",
    "warm_start",
    "run_experiment",
    "run_coordination",
]

log = logging.getLogger(__name__)

_PROBE_SIZE = 64
_REFIT_EVERY = 25  # hyperparameter re-optimization cadence during learning


@dataclass
class AgentRuntime:
    """Everything one vehicle carries through the loop."""

    agent_id: int
    plant: object  # true VehicleParams, never shown to the planner
    state: VehicleState
    datasets: list
    models: list
    plan: np.ndarray | None = None
    last_input: np.ndarray = field(default_factory=lambda: np.zeros(2))


@dataclass
class StepRecord:
    step: int
    states: dict  # agent id -> (x, y, theta, v) after applying the input
    inputs: dict  # agent id -> (accel, steer) applied
    reference: tuple
    lead_error: tuple  # per-axis |lead position - reference| after the step
    consensus_residual: float
    lagrangian: float
    accepted_fraction: float
    plan_seconds: float


@dataclass
class RunLog:
    records: list = field(default_factory=list)
    rmse: dict = field(default_factory=dict)  # step -> {agent: [per-channel rmse]}
    variance: dict = field(default_factory=dict)  # step -> {agent: mean predictive var}
    meta: dict = field(default_factory=dict)
    last_trace: object = None  # consensus trace of the final planning step

    def lead_errors(self) -> np.ndarray:
        return np.array([r.lead_error for r in self.records])

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["step", "agent", "x", "y", "theta", "v", "accel", "steer", "ref_x", "ref_y"]
            )
            for r in self.records:
                for i in sorted(r.states):
                    w.writerow(
                        [r.step, i, *r.states[i], *r.inputs[i], *r.reference]
                    )

    def save_json(self, path) -> None:
        payload = {
            "meta": self.meta,
            "rmse": {str(k): {str(i): v for i, v in d.items()} for k, d in self.rmse.items()},
            "variance": {
                str(k): {str(i): v for i, v in d.items()} for k, d in self.variance.items()
            },
            "steps": [
                {
                    "step": r.step,
                    "reference": list(r.reference),
                    "lead_error": list(r.lead_error),
                    "consensus_residual": r.consensus_residual,
                    "lagrangian": r.lagrangian,
                    "accepted_fraction": r.accepted_fraction,
                    "plan_seconds": r.plan_seconds,
                }
                for r in self.records
            ],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)


# ---------------------------------------------------------------------------
# model bootstrap


def _channel_targets(config: ScenarioConfig, params, theta, v, accel, steer):
    """True one-step increments of a plant at the sampled operating point."""
    state = VehicleState(0.0, 0.0, float(theta), float(v))
    nxt = bicycle_step(
        state,
        float(accel),
        float(steer),
        params,
        config.dt,
        v_min=config.v_min,
        v_max=config.v_max,
        accel_min=config.accel_min,
        accel_max=config.accel_max,
        steer_max=config.steer_max,
    )
    return np.array([nxt.x - state.x, nxt.y - state.y, nxt.theta - state.theta])


def _sample_operating_points(config: ScenarioConfig, n: int, rng) -> np.ndarray:
    theta = rng.uniform(-np.pi, np.pi, size=n)
    v = rng.uniform(config.v_min, config.v_max, size=n)
    # accel sampled so the speed update stays in bounds (as the planner enforces)
    lo = np.maximum(config.accel_min, (config.v_min - v) / config.dt)
    hi = np.minimum(config.accel_max, (config.v_max - v) / config.dt)
    accel = rng.uniform(lo, hi)
    steer = rng.uniform(-config.steer_max, config.steer_max, size=n)
    return np.column_stack([theta, v, accel, steer])


def _regressor_rows(theta, v, steer):
    pos = np.column_stack([np.cos(theta), np.sin(theta), v, steer])
    head = np.column_stack([v, steer])
    return pos, pos, head


def initial_models(config: ScenarioConfig, n_points: int = 40, optimize: bool = True):
    """Per-agent channel datasets and models fitted on prior operating data.

    Each agent starts from noisy one-step responses of its *own* plant at
    randomly sampled operating points (data from earlier operation), so the
    bootstrap rows stay consistent with everything observed later in closed
    loop.  Returns ``(datasets, models)``: dicts keyed by agent id holding
    one list per channel (dx, dy, dtheta order).
    """
    datasets, models = {}, {}
    for i in range(config.n_agents):
        rng = np.random.default_rng([config.seed, 1000 + i])
        ops = _sample_operating_points(config, n_points, rng)
        params = plant_params(config, i)
        targets = np.array([_channel_targets(config, params, *row) for row in ops])
        targets = targets + rng.normal(0.0, config.noise_std, size=targets.shape)
        pos, pos2, head = _regressor_rows(ops[:, 0], ops[:, 1], ops[:, 3])
        inputs = (pos, pos2, head)
        ds_list, m_list = [], []
        for c in range(3):
            ds = Dataset(inputs[c], targets[:, c], capacity=config.window)
            cfg = _initial_kernel(ds, config)
            if optimize:
                cfg = optimize_hyperparameters(cfg, ds, seed=config.seed + 97 * i + c)
            ds_list.append(ds)
            m_list.append(fit_gp(cfg, ds))
        datasets[i] = ds_list
        models[i] = m_list
    return datasets, models


def _initial_kernel(ds: Dataset, config: ScenarioConfig) -> KernelConfig:
    signal = max(float(np.var(ds.Y)), 1e-8)
    return KernelConfig(
        signal_variance=signal,
        lengthscales=np.ones(ds.input_dim),
        noise_variance=max(config.noise_std**2, 1e-10),
    )


# ---------------------------------------------------------------------------
# probes


def probe_inputs(config: ScenarioConfig, n: int = _PROBE_SIZE):
    """A fixed probe set (shared across the run so probes stay comparable)."""
    rng = np.random.default_rng([config.seed, 555])
    ops = _sample_operating_points(config, n, rng)
    pos, _, head = _regressor_rows(ops[:, 0], ops[:, 1], ops[:, 3])
    return ops, (pos, pos, head)


def probe_rmse(config: ScenarioConfig, agent_id: int, models, probes=None) -> list:
    """Held-out RMSE of each channel against the agent's true plant dynamics."""
    ops, inputs = probes if probes is not None else probe_inputs(config)
    params = plant_params(config, agent_id)
    truth = np.array([_channel_targets(config, params, *row) for row in ops])
    out = []
    for c in range(3):
        pred = models[c].predict_mean(inputs[c])
        out.append(float(np.sqrt(np.mean((pred - truth[:, c]) ** 2))))
    return out


def mean_predictive_variance(models, inputs) -> float:
    """Average posterior variance over the probe inputs, pooled over channels."""
    total, count = 0.0, 0
    for c in range(3):
        joint = models[c].joint_posterior(inputs[c])
        total += float(np.trace(joint.covariance))
        count += joint.covariance.shape[0]
    return total / count


# ---------------------------------------------------------------------------
# planning helpers


def warm_start(config: ScenarioConfig, rt: AgentRuntime) -> np.ndarray:
    """Shift the previous input plan, repeat its tail, re-roll through the models.

    Without a previous plan the inputs are seeded with small admissible random
    values rather than zeros: distinct query points keep the predictive
    covariance over the horizon well separated, so its gradients stay tame.
    """
    H = config.horizon
    if rt.plan is None:
        rng = np.random.default_rng([config.seed, 777, rt.agent_id])
        accel = rng.uniform(0.0, 0.2 * config.accel_max, size=H)
        steer = rng.uniform(-0.1 * config.steer_max, 0.1 * config.steer_max, size=H)
        U = np.column_stack([accel, steer])
    else:
        U_prev, _, _ = config.layout.unpack(rt.plan)
        U = np.vstack([U_prev[1:], U_prev[-1:]])
    return rollout_plan(config, rt.models, rt.state, U)


def _apply_and_observe(config: ScenarioConfig, rt: AgentRuntime, u: np.ndarray, rng):
    """Advance the true plant and return the noisy increment observation."""
    before = rt.state
    rt.state = bicycle_step(
        before,
        float(u[0]),
        float(u[1]),
        rt.plant,
        config.dt,
        v_min=config.v_min,
        v_max=config.v_max,
        accel_min=config.accel_min,
        accel_max=config.accel_max,
        steer_max=config.steer_max,
    )
    incr = np.array(
        [rt.state.x - before.x, rt.state.y - before.y, rt.state.theta - before.theta]
    )
    noisy = incr + rng.normal(0.0, config.noise_std, size=3)
    # pair the observation with the steering the plant actually applied
    steer = float(np.clip(u[1], -config.steer_max, config.steer_max))
    pos_in = np.array([np.cos(before.theta), np.sin(before.theta), before.v, steer])
    head_in = np.array([before.v, steer])
    return (pos_in, pos_in, head_in), noisy


# ---------------------------------------------------------------------------
# the loop


def _simulate(
    config: ScenarioConfig,
    steps: int,
    gamma: float,
    learn: bool,
    runtimes: dict,
    mode: str,
    probe_every: int,
    refit_hyperparameters: bool,
) -> RunLog:
    runlog = RunLog(meta={"mode": "experiment" if learn else "coordination", "steps": steps})
    probes = probe_inputs(config)
    noise_rng = np.random.default_rng([config.seed, 42 if learn else 43])
    params = config.admm_params()

    def record_probes(step):
        runlog.rmse[step] = {
            i: probe_rmse(config, i, runtimes[i].models, probes) for i in runtimes
        }
        runlog.variance[step] = {
            i: mean_predictive_variance(runtimes[i].models, probes[1]) for i in runtimes
        }

    record_probes(0)
    for t in range(steps):
        tic = time.perf_counter()
        states = {i: rt.state for i, rt in runtimes.items()}
        models = {i: rt.models for i, rt in runtimes.items()}
        agents, shared, graph = build_vehicle_agents(config, models, states, t, gamma=gamma)
        problem = build_consensus(agents, shared, graph)
        init = {i: warm_start(config, runtimes[i]) for i in runtimes}
        result = run_admm_c(problem, params, init, mode=mode)
        plan_seconds = time.perf_counter() - tic
        runlog.last_trace = result.trace

        inputs = {}
        for i in sorted(runtimes):
            rt = runtimes[i]
            plan = result.x[i]
            u0 = plan[config.layout.u_slice(0)]
            if not np.all(np.isfinite(u0)):
                log.warning("agent %d step %d: non-finite input, holding previous", i, t)
                u0 = rt.last_input
            else:
                rt.plan = plan
            inputs[i] = np.array(u0, dtype=float)
            rt.last_input = inputs[i]

        refit_now = refit_hyperparameters and (t + 1) % _REFIT_EVERY == 0
        for i in sorted(runtimes):
            rt = runtimes[i]
            chan_inputs, noisy = _apply_and_observe(config, rt, inputs[i], noise_rng)
            if learn:
                for c in range(3):
                    rt.datasets[c] = rt.datasets[c].append(chan_inputs[c], noisy[c])
                    cfg = rt.models[c].config
                    if refit_now:
                        cfg = optimize_hyperparameters(
                            cfg, rt.datasets[c], seed=config.seed + 131 * i + 7 * c + t
                        )
                    rt.models[c] = fit_gp(cfg, rt.datasets[c])

        ref = reference_point((t + 1) * config.dt, config.amplitude, config.period)
        lead = runtimes[config.lead].state
        rec = result.trace.records[-1] if len(result.trace) else None
        runlog.records.append(
            StepRecord(
                step=t,
                states={i: tuple(rt.state.as_array()) for i, rt in runtimes.items()},
                inputs={i: tuple(inputs[i]) for i in runtimes},
                reference=tuple(ref),
                lead_error=(abs(lead.x - ref[0]), abs(lead.y - ref[1])),
                consensus_residual=max(rec.residuals) if rec else 0.0,
                lagrangian=rec.lagrangian if rec else float("nan"),
                accepted_fraction=(
                    float(np.mean([a for r in result.trace.records for a in r.accepted]))
                    if len(result.trace)
                    else 0.0
                ),
                plan_seconds=plan_seconds,
            )
        )
        if probe_every and (t + 1) % probe_every == 0 and t + 1 != steps:
            record_probes(t + 1)
    if steps:
        record_probes(steps)
    return runlog


def _build_runtimes(config: ScenarioConfig, datasets, models) -> dict:
    states = initial_formation_states(config)
    return {
        i: AgentRuntime(
            agent_id=i,
            plant=plant_params(config, i),
            state=states[i],
            datasets=list(datasets[i]),
            models=list(models[i]),
        )
        for i in range(config.n_agents)
    }


def run_experiment(
    config: ScenarioConfig,
    steps: int,
    mode: str = "sequential",
    probe_every: int = 25,
    refit_hyperparameters: bool = True,
    n_initial: int = 40,
):
    """Active-learning run: information weight on, windows filling, models refit.

    Posterior updates happen every step; kernel hyperparameters are
    re-optimized every ``_REFIT_EVERY`` steps when ``refit_hyperparameters``
    is on, so lengthscales tuned to the sparse bootstrap adapt to the
    growing dataset.  Returns ``(runlog, runtimes)``; the runtimes carry the
    updated datasets and models for a subsequent coordination run.
    """
    datasets, models = initial_models(config, n_points=n_initial)
    runtimes = _build_runtimes(config, datasets, models)
    runlog = _simulate(
        config, steps, config.gamma, True, runtimes, mode, probe_every, refit_hyperparameters
    )
    return runlog, runtimes


def run_coordination(
    config: ScenarioConfig,
    steps: int,
    runtimes: dict | None = None,
    mode: str = "sequential",
    probe_every: int = 0,
):
    """Formation run: information weight zero, models frozen.

    ``runtimes`` usually comes from :func:`run_experiment`; vehicles restart
    from the initial formation with their learned models.  Without it, fresh
    bootstrap models are used.
    """
    if runtimes is None:
        datasets, models = initial_models(config)
        runtimes = _build_runtimes(config, datasets, models)
    else:
        states = initial_formation_states(config)
        for i, rt in runtimes.items():
            rt.state = states[i]
            rt.plan = None
            rt.last_input = np.zeros(2)
    runlog = _simulate(config, steps, 0.0, False, runtimes, mode, probe_every, False)
    return runlog, runtimes

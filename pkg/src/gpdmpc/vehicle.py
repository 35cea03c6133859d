"""Multi-vehicle formation benchmark on kinematic bicycle plants.

A chain of vehicles follows a figure-eight reference: the middle vehicle
tracks the reference directly, everyone else holds a fixed offset to its
chain neighbors through the shared coupling objective.  Each vehicle's
planner carries three learned increment channels (dx, dy, dtheta per step);
the speed update is a known integrator and stays an explicit equality row.

Plants are per-vehicle perturbations of the nominal geometry, so the learned
models genuinely differ from the nominal predictions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .problem import (
    AffineMap,
    AgentProblem,
    GpChannel,
    Graph,
    QuadraticFunction,
    SharedObjective,
    VariableLayout,
)

__all__ = [
    "VehicleParams",
    "VehicleState",
    "ScenarioConfig",
    "bicycle_step",
    "slip_angle",
    "perturb_params",
    "reference_point",
    "five_vehicles",
    "load_scenario",
    "plant_params",
    "initial_formation_states",
    "rollout_plan",
    "build_vehicle_agents",
    "formation_objectives",
    "PositionRegressor",
    "HeadingRegressor",
]

log = logging.getLogger(__name__)

CHANNELS = ("dx", "dy", "dtheta")


@dataclass(frozen=True)
class VehicleParams:
    """Kinematic bicycle geometry (rear/front axle distances in meters)."""

    l_r: float = 0.386
    l_f: float = 0.205


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    theta: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v])


def slip_angle(steer: float, params: VehicleParams) -> float:
    return math.atan(params.l_r / (params.l_f + params.l_r) * math.tan(steer))


def bicycle_step(
    state: VehicleState,
    accel: float,
    steer: float,
    params: VehicleParams,
    dt: float,
    *,
    v_min: float = 0.0,
    v_max: float = 2.0,
    accel_min: float = -2.0,
    accel_max: float = 2.0,
    steer_max: float = math.pi / 4,
) -> VehicleState:
    """One explicit-Euler step of the bicycle, clamping inputs and speed."""
    a = min(max(accel, accel_min), accel_max)
    s = min(max(steer, -steer_max), steer_max)
    if abs(a - accel) > 1e-6 or abs(s - steer) > 1e-6:
        log.debug("input clamp: accel %.3f -> %.3f, steer %.3f -> %.3f", accel, a, steer, s)
    beta = slip_angle(s, params)
    x = state.x + state.v * math.cos(state.theta + beta) * dt
    y = state.y + state.v * math.sin(state.theta + beta) * dt
    theta = state.theta + state.v / params.l_r * math.sin(beta) * dt
    v = state.v + a * dt
    v_clamped = min(max(v, v_min), v_max)
    if abs(v_clamped - v) > 1e-6:
        log.debug("speed clamp: %.3f -> %.3f", v, v_clamped)
    return VehicleState(x, y, theta, v_clamped)


def perturb_params(
    base: VehicleParams, agent_id: int, seed: int, fraction: float = 0.2
) -> VehicleParams:
    """Per-vehicle geometry: both lengths scaled by independent uniform factors."""
    rng = np.random.default_rng([seed, agent_id])
    f_r, f_f = rng.uniform(1.0 - fraction, 1.0 + fraction, size=2)
    return VehicleParams(l_r=base.l_r * f_r, l_f=base.l_f * f_f)


def reference_point(t: float, amplitude: float = 4.0, period: float = 80.0) -> np.ndarray:
    """Figure-eight (Gerono lemniscate) position at time ``t`` seconds."""
    s = 2.0 * math.pi * t / period
    return np.array([amplitude * math.sin(s), amplitude * math.sin(s) * math.cos(s)])


# ---------------------------------------------------------------------------
# scenario configuration


@dataclass(frozen=True)
class ScenarioConfig:
    """All knobs of the benchmark (sizes, bounds, weights, solver schedule)."""

    n_agents: int = 5
    horizon: int = 5
    dt: float = 0.2
    v_min: float = 0.0
    v_max: float = 2.0
    accel_min: float = -2.0
    accel_max: float = 2.0
    steer_max: float = math.pi / 4
    pos_bound: float = 10.0
    q_track: float = 500.0
    r_input: float = 0.1
    p_formation: float = 10.0
    gamma: float = 10.0
    tau: float = 1e3
    lam: float = 1e3
    rho: float = 100.0
    k_max: int = 10
    r0: float = 0.1
    beta_fail: float = 0.5
    beta_succ: float = 2.0
    eps0: float = 0.2
    eps1: float = 0.4
    eps2: float = 0.8
    window: int = 400
    noise_std: float = 1e-3
    amplitude: float = 4.0
    period: float = 80.0
    seed: int = 0
    perturb_fraction: float = 0.2
    spacing: tuple = (0.5, 0.5)

    def __post_init__(self):
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if self.n_agents < 1 or self.n_agents % 2 == 0:
            raise ValueError("n_agents must be odd so a middle lead exists")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")

    @property
    def lead(self) -> int:
        return self.n_agents // 2

    @property
    def layout(self) -> VariableLayout:
        return VariableLayout(horizon=self.horizon, n_u=2, n_z=4, n_y=3)

    def graph(self) -> Graph:
        return Graph.chain(self.n_agents)

    def formation_offset(self, i: int, j: int) -> np.ndarray:
        """Desired ``p_i - p_j``; antisymmetric by construction."""
        return (i - j) * np.asarray(self.spacing)

    def admm_params(self):
        from .admm import AdmmParams

        return AdmmParams(
            rho=self.rho,
            k_max=self.k_max,
            r0=self.r0,
            beta_fail=self.beta_fail,
            beta_succ=self.beta_succ,
            eps0=self.eps0,
            eps1=self.eps1,
            eps2=self.eps2,
        )

    def to_yaml(self, path) -> None:
        data = asdict(self)
        data["spacing"] = list(self.spacing)
        Path(path).write_text(yaml.safe_dump(data, sort_keys=True))

    @staticmethod
    def from_yaml(path) -> "ScenarioConfig":
        data = yaml.safe_load(Path(path).read_text())
        return ScenarioConfig(**data)


def five_vehicles() -> ScenarioConfig:
    return ScenarioConfig()


def load_scenario(name_or_path) -> ScenarioConfig:
    """Resolve a scenario: explicit file path, or a bundled name like ``five_vehicles``."""
    p = Path(name_or_path)
    if p.exists():
        return ScenarioConfig.from_yaml(p)
    ref = resources.files("gpdmpc").joinpath(f"scenarios/{name_or_path}.yaml")
    if ref.is_file():
        return ScenarioConfig(**yaml.safe_load(ref.read_text()))
    raise FileNotFoundError(f"no scenario file or bundled scenario named {name_or_path!r}")


def plant_params(config: ScenarioConfig, agent_id: int) -> VehicleParams:
    return perturb_params(VehicleParams(), agent_id, config.seed, config.perturb_fraction)


def initial_formation_states(config: ScenarioConfig) -> dict:
    """Vehicles at rest on their formation offsets, aligned with the route."""
    origin = reference_point(0.0, config.amplitude, config.period)
    ahead = reference_point(1e-6, config.amplitude, config.period)
    theta0 = math.atan2(ahead[1] - origin[1], ahead[0] - origin[0])
    out = {}
    for i in range(config.n_agents):
        p = origin + config.formation_offset(i, config.lead)
        out[i] = VehicleState(x=float(p[0]), y=float(p[1]), theta=theta0, v=0.0)
    return out


# ---------------------------------------------------------------------------
# regressors


@dataclass(frozen=True)
class PositionRegressor:
    """Builds ``[cos(theta), sin(theta), v, steer]`` for a position channel.

    ``theta`` and ``v`` come either from decision entries (previous predicted
    state) or, for the first step, from the measured state as constants.
    """

    dim: int
    steer_index: int
    theta_index: int | None = None
    v_index: int | None = None
    theta_value: float = 0.0
    v_value: float = 0.0

    def _theta(self, x):
        return x[self.theta_index] if self.theta_index is not None else self.theta_value

    def _v(self, x):
        return x[self.v_index] if self.v_index is not None else self.v_value

    def value(self, x: np.ndarray) -> np.ndarray:
        th = self._theta(x)
        return np.array([np.cos(th), np.sin(th), self._v(x), x[self.steer_index]])

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        J = np.zeros((4, self.dim))
        if self.theta_index is not None:
            th = self._theta(x)
            J[0, self.theta_index] = -np.sin(th)
            J[1, self.theta_index] = np.cos(th)
        if self.v_index is not None:
            J[2, self.v_index] = 1.0
        J[3, self.steer_index] = 1.0
        return J


@dataclass(frozen=True)
class HeadingRegressor:
    """Builds ``[v, steer]`` for the heading-increment channel."""

    dim: int
    steer_index: int
    v_index: int | None = None
    v_value: float = 0.0

    def value(self, x: np.ndarray) -> np.ndarray:
        v = x[self.v_index] if self.v_index is not None else self.v_value
        return np.array([v, x[self.steer_index]])

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        J = np.zeros((2, self.dim))
        if self.v_index is not None:
            J[0, self.v_index] = 1.0
        J[1, self.steer_index] = 1.0
        return J


def _step_regressor(layout: VariableLayout, channel: int, k: int, state: VehicleState):
    """Regressor for channel ``channel`` at step ``k`` (state sources from step k-1)."""
    steer = layout.u_slice(k).start + 1
    if k == 0:
        if channel == 2:
            return HeadingRegressor(layout.dim, steer, v_value=state.v)
        return PositionRegressor(
            layout.dim, steer, theta_value=state.theta, v_value=state.v
        )
    prev = layout.z_slice(k - 1).start
    if channel == 2:
        return HeadingRegressor(layout.dim, steer, v_index=prev + 3)
    return PositionRegressor(layout.dim, steer, theta_index=prev + 2, v_index=prev + 3)


# ---------------------------------------------------------------------------
# agent assembly


def _recursion_rows(config: ScenarioConfig, state: VehicleState):
    """Equality rows tying predicted states to increments and the integrator."""
    lay = config.layout
    H = config.horizon
    rows, rhs = [], []
    s0 = state.as_array()
    for k in range(H):
        z_k = lay.z_slice(k).start
        z_prev = lay.z_slice(k - 1).start if k else None
        for c in range(3):  # x, y, theta rows use a learned increment
            row = np.zeros(lay.dim)
            row[z_k + c] = 1.0
            row[lay.ybar_index(k, c)] = -1.0
            if k:
                row[z_prev + c] = -1.0
                rhs.append(0.0)
            else:
                rhs.append(-s0[c])
            rows.append(row)
        row = np.zeros(lay.dim)  # speed integrator row
        row[z_k + 3] = 1.0
        row[lay.u_slice(k).start] = -config.dt
        if k:
            row[z_prev + 3] = -1.0
            rhs.append(0.0)
        else:
            rhs.append(-state.v)
        rows.append(row)
    return np.array(rows), np.array(rhs)


def _box_rows(config: ScenarioConfig):
    """Inequality rows ``A x + b <= 0`` for speed, input and position boxes."""
    lay = config.layout
    rows, rhs = [], []

    def box(idx, lo, hi):
        up = np.zeros(lay.dim)
        up[idx] = 1.0
        rows.append(up)
        rhs.append(-hi)
        dn = np.zeros(lay.dim)
        dn[idx] = -1.0
        rows.append(dn)
        rhs.append(lo)

    for k in range(config.horizon):
        u = lay.u_slice(k).start
        z = lay.z_slice(k).start
        box(u, config.accel_min, config.accel_max)
        box(u + 1, -config.steer_max, config.steer_max)
        box(z, -config.pos_bound, config.pos_bound)
        box(z + 1, -config.pos_bound, config.pos_bound)
        box(z + 3, config.v_min, config.v_max)
    return np.array(rows), np.array(rhs)


def _objective_quad(config: ScenarioConfig, agent_id: int, t_index: int) -> QuadraticFunction:
    lay = config.layout
    Q = np.zeros((lay.dim, lay.dim))
    q = np.zeros(lay.dim)
    c = 0.0
    for k in range(config.horizon):
        u = lay.u_slice(k).start
        Q[u, u] += 2.0 * config.r_input
        Q[u + 1, u + 1] += 2.0 * config.r_input
    if agent_id == config.lead:
        for k in range(config.horizon):
            r = reference_point((t_index + 1 + k) * config.dt, config.amplitude, config.period)
            z = lay.z_slice(k).start
            for a in range(2):
                Q[z + a, z + a] += 2.0 * config.q_track
                q[z + a] += -2.0 * config.q_track * r[a]
                c += config.q_track * r[a] ** 2
    return QuadraticFunction(Q, q, c)


def _formation_quad(config: ScenarioConfig, owner: int, hood) -> QuadraticFunction:
    lay = config.layout
    dim = lay.dim * len(hood)
    offset = {j: s * lay.dim for s, j in enumerate(hood)}
    Q = np.zeros((dim, dim))
    q = np.zeros(dim)
    c = 0.0
    w = config.p_formation
    for j in hood:
        if j == owner:
            continue
        delta = config.formation_offset(owner, j)
        for k in range(config.horizon):
            for a in range(2):
                d = np.zeros(dim)
                d[offset[owner] + lay.z_slice(k).start + a] = 1.0
                d[offset[j] + lay.z_slice(k).start + a] = -1.0
                Q += 2.0 * w * np.outer(d, d)
                q += -2.0 * w * delta[a] * d
                c += w * delta[a] ** 2
    return QuadraticFunction(Q, q, c)


def formation_objectives(config: ScenarioConfig):
    """The coupling objectives alone (state-free, no models needed)."""
    g = config.graph()
    out = []
    for i in range(config.n_agents):
        hood = g.neighborhood(i)
        out.append(
            SharedObjective(
                owner=i,
                quad=_formation_quad(config, i, hood),
                references=tuple(j for j in hood if j != i),
            )
        )
    return out


def build_vehicle_agents(
    config: ScenarioConfig,
    models: dict,
    states: dict,
    t_index: int,
    gamma: float | None = None,
):
    """Assemble per-agent problems and couplings for one planning instant.

    Parameters
    ----------
    config : ScenarioConfig
    models : dict
        Agent id -> sequence of three fitted models in channel order
        (dx, dy, dtheta).
    states : dict
        Agent id -> measured :class:`VehicleState` at the planning time.
    t_index : int
        Simulation step index (time is ``t_index * dt``), anchors the lead's
        reference points.
    gamma : float, optional
        Override for the information weight (defaults to ``config.gamma``).

    Returns
    -------
    (agents, shared, graph)
    """
    g = config.graph()
    lay = config.layout
    gam = config.gamma if gamma is None else gamma
    agents = []
    for i in range(config.n_agents):
        eq_A, eq_b = _recursion_rows(config, states[i])
        in_A, in_b = _box_rows(config)
        chans = []
        for c in range(3):
            regs = tuple(_step_regressor(lay, c, k, states[i]) for k in range(config.horizon))
            idxs = tuple(lay.ybar_index(k, c) for k in range(config.horizon))
            chans.append(GpChannel(model=models[i][c], regressors=regs, ybar_indices=idxs))
        agents.append(
            AgentProblem(
                agent_id=i,
                layout=lay,
                objective=_objective_quad(config, i, t_index),
                channels=tuple(chans),
                eq_affine=AffineMap(eq_A, eq_b),
                ineq_affine=AffineMap(in_A, in_b),
                gamma=gam,
                tau=config.tau,
                lam=config.lam,
            )
        )
    return agents, formation_objectives(config), g


# ---------------------------------------------------------------------------
# plan assembly


def rollout_plan(config: ScenarioConfig, models, state: VehicleState, U) -> np.ndarray:
    """Pack a decision vector whose plan rows hold exactly under the models.

    Rolls the input sequence ``U`` (horizon x 2) through the learned
    increment channels and the speed integrator, mirroring the regressor
    wiring of :func:`build_vehicle_agents`, so the resulting vector zeroes
    every equality row and every channel residual.
    """
    H = config.horizon
    U = np.asarray(U, dtype=float).reshape(H, 2)
    Z = np.zeros((H, 4))
    Ybar = np.zeros((H, 3))
    th, v = state.theta, state.v
    px, py = state.x, state.y
    for k in range(H):
        a, s = U[k]
        pos_in = np.array([np.cos(th), np.sin(th), v, s])
        head_in = np.array([v, s])
        Ybar[k, 0] = models[0].predict_mean(pos_in)
        Ybar[k, 1] = models[1].predict_mean(pos_in)
        Ybar[k, 2] = models[2].predict_mean(head_in)
        px, py, th = px + Ybar[k, 0], py + Ybar[k, 1], th + Ybar[k, 2]
        v = v + config.dt * a
        Z[k] = (px, py, th, v)
    return config.layout.pack(U, Z, Ybar)

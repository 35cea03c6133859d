"""Consensus ADMM with convexified trust-region local steps.

Each round runs three steps per agent over the communication graph:

1. x-step: every agent averages the neighbor-sent blocks of ``z - y/rho``
   into a prox center, convexifies its penalized objective around its current
   iterate, and solves one trust-region prox QP.  The step is accepted or
   rejected by the ratio of actual to predicted reduction of the x-step
   objective (exact penalized objective plus prox term, versus its convex
   surrogate plus the same prox term), and the radius adapts accordingly.
2. z-step: every agent broadcasts its new iterate, assembles the stacked
   neighborhood vector, and takes a closed-form prox step on the quadratic
   shared objective.
3. y-step: plain dual ascent on the consensus gap.

There is no early stopping: exactly ``k_max`` rounds run (no coordinator
exists to test convergence).  Sequential and thread-parallel execution modes
produce bit-identical traces because each agent's arithmetic depends only on
the messages of the current phase, and phases are barrier-separated.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .linearize import build_local_model
from .network import PHASE_PROX, PHASE_X, Message, Network
from .problem import ConsensusProblem, EvaluationError
from .qp import assemble_prox_qp, prox_shared, solve_qp

__all__ = [
    "AdmmParams",
    "AgentAdmmState",
    "IterationRecord",
    "IterationTrace",
    "AdmmResult",
    "augmented_lagrangian",
    "augmented_lagrangian_local",
    "run_admm_c",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdmmParams:
    """Penalty, iteration budget and trust-region schedule."""

    rho: float = 100.0
    k_max: int = 10
    r0: float = 0.1
    beta_fail: float = 0.5
    beta_succ: float = 2.0
    eps0: float = 0.2
    eps1: float = 0.4
    eps2: float = 0.8
    radius_floor: float = 1e-8
    qp_max_iter: int = 20000
    qp_tol: float = 1e-6

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.k_max < 0:
            raise ValueError("k_max must be nonnegative")
        if self.r0 <= 0:
            raise ValueError("initial trust radius must be positive")
        if not 0 < self.beta_fail < 1 < self.beta_succ:
            raise ValueError("need 0 < beta_fail < 1 < beta_succ")
        if not 0 < self.eps0 < self.eps1 < self.eps2 < 1:
            raise ValueError("need 0 < eps0 < eps1 < eps2 < 1")


@dataclass
class AgentAdmmState:
    """Per-agent iterate: own block, stacked copy, stacked dual, trust radius."""

    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    radius: float
    f_value: float
    x_stack: np.ndarray | None = None


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    lagrangian: float
    residuals: tuple  # per agent, ||x_stack - z_stack||_inf
    radii: tuple
    accepted: tuple
    reductions: tuple  # per agent, actual x-step objective reduction (0 when rejected)
    messages: int
    step_norm_sq: float  # sum_i ||dx_i||^2 + ||dz_i||^2
    max_iterate_norm: float


@dataclass
class IterationTrace:
    records: list = field(default_factory=list)
    initial_lagrangian: float = float("nan")
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def to_json(self, path) -> None:
        payload = {
            "initial_lagrangian": self.initial_lagrangian,
            "meta": self.meta,
            "records": [
                {
                    "iteration": r.iteration,
                    "lagrangian": r.lagrangian,
                    "residuals": list(r.residuals),
                    "radii": list(r.radii),
                    "accepted": list(r.accepted),
                    "reductions": list(r.reductions),
                    "messages": r.messages,
                    "step_norm_sq": r.step_norm_sq,
                    "max_iterate_norm": r.max_iterate_norm,
                }
                for r in self.records
            ],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)

    @staticmethod
    def from_json(path) -> "IterationTrace":
        with open(path) as fh:
            payload = json.load(fh)
        trace = IterationTrace(
            initial_lagrangian=payload.get("initial_lagrangian", float("nan")),
            meta=payload.get("meta", {}),
        )
        for r in payload["records"]:
            trace.records.append(
                IterationRecord(
                    iteration=r["iteration"],
                    lagrangian=r["lagrangian"],
                    residuals=tuple(r["residuals"]),
                    radii=tuple(r["radii"]),
                    accepted=tuple(r["accepted"]),
                    reductions=tuple(r.get("reductions", ())),
                    messages=r["messages"],
                    step_norm_sq=r["step_norm_sq"],
                    max_iterate_norm=r["max_iterate_norm"],
                )
            )
        return trace


@dataclass(frozen=True)
class AdmmResult:
    x: dict  # agent id -> final own block
    x_stack: dict  # agent id -> final stacked neighborhood vector
    trace: IterationTrace
    states: dict  # agent id -> AgentAdmmState


# ---------------------------------------------------------------------------
# augmented Lagrangians


def augmented_lagrangian(problem: ConsensusProblem, xs: dict, zs: dict, ys: dict, rho: float) -> float:
    """Neighborhood-stacked form: sums ``f_i + f_Ni(z) + y'(x_Ni - z) + rho/2 ||.||^2``.

    ``x_Ni`` is assembled from the agents' own blocks in ``xs``.
    """
    total = 0.0
    for i in problem.agent_ids:
        x_stack = problem.assemble_stack(i, xs)
        gap = x_stack - zs[i]
        total += problem.agents[i].penalized_objective(xs[i])
        total += problem.shared_value(i, zs[i])
        total += float(ys[i] @ gap) + 0.5 * rho * float(gap @ gap)
    return total


def augmented_lagrangian_local(problem: ConsensusProblem, xs: dict, zs: dict, ys: dict, rho: float) -> float:
    """Per-agent split form: couplings regrouped through the selection maps.

    Algebraically identical to :func:`augmented_lagrangian` (swap the double
    sum over (i, j in N_i)); kept separate as an independent evaluation route.
    """
    total = 0.0
    for i in problem.agent_ids:
        total += problem.agents[i].penalized_objective(xs[i])
        total += problem.shared_value(i, zs[i])
        for j in problem.graph.neighborhood(i):
            F = problem.selection(i, j)
            diff = xs[i] - F.apply(zs[j])
            total += float(F.apply(ys[j]) @ diff) + 0.5 * rho * float(diff @ diff)
    return total


# ---------------------------------------------------------------------------
# engine


class _Worker:
    """One agent's per-round computations; state is touched only by its owner."""

    def __init__(self, problem: ConsensusProblem, aid: int, params: AdmmParams, net: Network):
        self.problem = problem
        self.aid = aid
        self.params = params
        self.net = net
        self.agent = problem.agents[aid]
        self.hood = problem.graph.neighborhood(aid)
        self.state: AgentAdmmState | None = None  # filled by init_state
        self.dx_sq = 0.0
        self.dz_sq = 0.0
        self.accepted = False
        self.reduction = 0.0
        self.residual = 0.0

    def init_state(self, inits: dict) -> None:
        x0 = np.asarray(inits[self.aid], dtype=float)
        z0 = self.problem.assemble_stack(self.aid, inits)
        self.state = AgentAdmmState(
            x=x0,
            z=z0,
            y=np.zeros(z0.size),
            radius=self.params.r0,
            f_value=self.agent.penalized_objective(x0),
            x_stack=z0.copy(),
        )

    # -- phase 1: send prox terms ------------------------------------------------
    def send_prox_terms(self, k: int) -> None:
        base = self.state.z - self.state.y / self.params.rho
        for j in self.hood:
            if j == self.aid:
                continue
            block = base[self.problem.block_slice(self.aid, j)]
            self.net.send(Message(self.aid, j, k, PHASE_PROX, block))

    # -- phase 2: x-step ---------------------------------------------------------
    def x_step(self, k: int) -> None:
        st = self.state
        own = (st.z - st.y / self.params.rho)[self.problem.block_slice(self.aid, self.aid)]
        msgs = self.net.receive_all(self.aid, k, PHASE_PROX)
        by_sender = {m.sender: m.payload for m in msgs}
        terms = [own if j == self.aid else by_sender[j] for j in self.hood]
        center = np.mean(terms, axis=0)
        weight = self.params.rho * len(self.hood)

        self.accepted = False
        self.reduction = 0.0
        prev_x = st.x
        if st.radius >= self.params.radius_floor:
            model = build_local_model(self.agent, st.x, st.radius)
            prob = assemble_prox_qp(model, center, weight, st.radius)
            sol = solve_qp(prob, self.params.qp_max_iter, self.params.qp_tol)
            if sol.status != "solved":
                log.warning(
                    "agent %d round %d: QP status %s, rejecting step", self.aid, k, sol.status
                )
                st.radius *= self.params.beta_fail
            else:
                delta = sol.x[: self.agent.dim]
                cand = st.x + delta
                prox0 = 0.5 * weight * float(np.sum((st.x - center) ** 2))
                prox1 = 0.5 * weight * float(np.sum((cand - center) ** 2))
                predicted = (st.f_value + prox0) - (model.evaluate(delta) + prox1)
                try:
                    f_cand = self.agent.penalized_objective(cand)
                    actual = (st.f_value + prox0) - (f_cand + prox1)
                except EvaluationError as err:
                    log.warning("agent %d round %d: %s, rejecting step", self.aid, k, err)
                    f_cand, actual, predicted = np.nan, -1.0, -1.0
                if predicted <= 0.0:
                    st.radius *= self.params.beta_fail
                else:
                    ratio = actual / predicted
                    p = self.params
                    if ratio < p.eps0:
                        st.radius *= p.beta_fail
                    else:
                        self.accepted = True
                        self.reduction = actual
                        st.x = cand
                        st.f_value = f_cand
                        if ratio < p.eps1:
                            st.radius *= p.beta_fail
                        elif ratio >= p.eps2:
                            st.radius *= p.beta_succ
        self.dx_sq = float(np.sum((st.x - prev_x) ** 2))

    # -- phase 3: broadcast x ----------------------------------------------------
    def send_x(self, k: int) -> None:
        for j in self.hood:
            if j != self.aid:
                self.net.send(Message(self.aid, j, k, PHASE_X, self.state.x))

    # -- phase 4: z-step and y-step ---------------------------------------------
    def zy_step(self, k: int) -> None:
        st = self.state
        msgs = self.net.receive_all(self.aid, k, PHASE_X)
        blocks = {m.sender: m.payload for m in msgs}
        blocks[self.aid] = st.x
        x_stack = self.problem.assemble_stack(self.aid, blocks)
        w = x_stack + st.y / self.params.rho
        if self.aid in self.problem.shared:
            z_new = prox_shared(self.problem.shared[self.aid], w, self.params.rho)
        else:
            z_new = w.copy()
        self.dz_sq = float(np.sum((z_new - st.z) ** 2))
        st.y = st.y + self.params.rho * (x_stack - z_new)
        st.z = z_new
        st.x_stack = x_stack
        self.residual = float(np.max(np.abs(x_stack - z_new)))


def _trace_lagrangian(problem: ConsensusProblem, workers: dict, rho: float) -> float:
    """Stacked-form Lagrangian from current states, reusing cached f_i values."""
    total = 0.0
    xs = {i: w.state.x for i, w in workers.items()}
    for i, w in workers.items():
        st = w.state
        x_stack = problem.assemble_stack(i, xs)
        gap = x_stack - st.z
        total += st.f_value
        total += problem.shared_value(i, st.z)
        total += float(st.y @ gap) + 0.5 * rho * float(gap @ gap)
    return total


def run_admm_c(
    problem: ConsensusProblem,
    params: AdmmParams,
    init: dict,
    mode: str = "sequential",
    log_messages: bool = False,
) -> AdmmResult:
    """Run ``k_max`` synchronous rounds from the nominal blocks in ``init``.

    Parameters
    ----------
    problem : ConsensusProblem
    params : AdmmParams
    init : dict
        Agent id -> nominal own block; also seeds ``z`` with the stacked
        nominal blocks (duals start at zero).
    mode : str
        "sequential" or "parallel" (one thread per agent); both produce
        bit-identical traces.
    log_messages : bool
        Keep a full message log on the returned network (in ``meta``).
    """
    if mode not in ("sequential", "parallel"):
        raise ValueError(f"unknown mode {mode!r}")
    ids = list(problem.agent_ids)
    missing = [i for i in ids if i not in init]
    if missing:
        raise ValueError(f"init missing agents {missing}")
    net = Network(problem.graph, log=log_messages)
    workers = {i: _Worker(problem, i, params, net) for i in ids}
    for w in workers.values():
        w.init_state(init)

    trace = IterationTrace(meta={"rho": params.rho, "k_max": params.k_max, "mode": mode})
    trace.initial_lagrangian = _trace_lagrangian(problem, workers, params.rho)

    pool = ThreadPoolExecutor(max_workers=len(ids)) if mode == "parallel" else None

    def run_phase(fn_name: str, k: int) -> None:
        if pool is None:
            for i in ids:
                getattr(workers[i], fn_name)(k)
        else:
            list(pool.map(lambda i: getattr(workers[i], fn_name)(k), ids))

    try:
        for k in range(params.k_max):
            net.open_phase(k, PHASE_PROX)
            run_phase("send_prox_terms", k)
            run_phase("x_step", k)
            net.open_phase(k, PHASE_X)
            run_phase("send_x", k)
            run_phase("zy_step", k)
            trace.records.append(
                IterationRecord(
                    iteration=k,
                    lagrangian=_trace_lagrangian(problem, workers, params.rho),
                    residuals=tuple(workers[i].residual for i in ids),
                    radii=tuple(workers[i].state.radius for i in ids),
                    accepted=tuple(workers[i].accepted for i in ids),
                    reductions=tuple(workers[i].reduction for i in ids),
                    messages=net.stats.messages_per_round.get(k, 0),
                    step_norm_sq=sum(workers[i].dx_sq + workers[i].dz_sq for i in ids),
                    max_iterate_norm=max(
                        max(
                            float(np.max(np.abs(workers[i].state.x))),
                            float(np.max(np.abs(workers[i].state.z))),
                            float(np.max(np.abs(workers[i].state.y))),
                        )
                        for i in ids
                    ),
                )
            )
    finally:
        if pool is not None:
            pool.shutdown()

    trace.meta["network"] = {
        "total_messages": net.stats.total_messages,
        "total_payload_scalars": net.stats.total_payload_scalars,
        "barrier_waits": net.stats.barrier_waits,
    }
    if log_messages:
        trace.meta["message_log"] = net.message_log
    return AdmmResult(
        x={i: workers[i].state.x for i in ids},
        x_stack={i: workers[i].state.x_stack for i in ids},
        trace=trace,
        states={i: workers[i].state for i in ids},
    )

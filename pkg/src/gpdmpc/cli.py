"""Command-line front end.

Subcommands::

    run        closed-loop simulation of a scenario, artifacts to a directory
    admm-test  one consensus solve on a built-in static problem
    diagnose   analyze a saved iteration trace
    gp-check   finite-difference audit of the model linearizations

Exit codes: 0 success, 1 a check failed, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .admm import AdmmParams, IterationTrace, run_admm_c
from .diagnostics import analyze_trace, shared_curvature_bound
from .gp import Dataset, KernelConfig, fit_gp
from .linearize import linearize_entropy, linearize_gp_mean
from .problem import (
    AffineRegressor,
    AgentProblem,
    GpChannel,
    Graph,
    QuadraticFunction,
    SharedObjective,
    VariableLayout,
    build_consensus,
)
from .runtime import run_coordination, run_experiment
from .vehicle import formation_objectives, load_scenario

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# run


def _apply_overrides(cfg, args):
    updates = {}
    if args.agents is not None:
        updates["n_agents"] = args.agents
    if args.seed is not None:
        updates["seed"] = args.seed
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _cmd_run(args) -> int:
    cfg = _apply_overrides(load_scenario(args.scenario), args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mode = "sequential" if args.sequential else "parallel"
    log.info(
        "run: %d vehicles, %d steps, %s phase, %s engine",
        cfg.n_agents, args.steps, args.mode, mode,
    )
    if args.mode == "experiment":
        runlog, _ = run_experiment(cfg, steps=args.steps, mode=mode)
    else:
        runlog, _ = run_coordination(cfg, steps=args.steps, mode=mode)

    runlog.save_csv(out / "trajectories.csv")
    runlog.save_json(out / "run.json")
    with open(out / "timing.csv", "w") as fh:
        fh.write("step,plan_seconds\n")
        for r in runlog.records:
            fh.write(f"{r.step},{r.plan_seconds:.6f}\n")

    if runlog.last_trace is None:
        log.warning("no planning round ran; skipping trace artifacts")
        return 0
    runlog.last_trace.to_json(out / "trace.json")
    report = analyze_trace(
        runlog.last_trace, l_bar=shared_curvature_bound(formation_objectives(cfg))
    )
    with open(out / "diagnostics.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=1)
    log.info("artifacts written to %s", out)
    ok = report.lagrangian_monotone and report.bounded
    if not ok:
        log.error("final-step trace failed its convergence checks: %s", report.to_dict())
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# admm-test


def _static_problem():
    """Two scalar agents pulled apart by their own costs, tied by a coupling.

    Closed form: the consensus optimum is x = (1/3, -1/3).
    """
    lay = VariableLayout(horizon=1, n_u=1)
    agents = [
        AgentProblem(0, lay, QuadraticFunction(np.array([[2.0]]), np.array([-2.0]), 1.0)),
        AgentProblem(1, lay, QuadraticFunction(np.array([[2.0]]), np.array([2.0]), 1.0)),
    ]
    half = QuadraticFunction(np.array([[1.0, -1.0], [-1.0, 1.0]]), np.zeros(2), 0.0)
    shared = [
        SharedObjective(owner=0, quad=half, references=(1,)),
        SharedObjective(owner=1, quad=half, references=(0,)),
    ]
    return build_consensus(agents, shared, Graph.chain(2))


def _cmd_admm_test(args) -> int:
    problem = _static_problem()
    params = AdmmParams(rho=args.rho, k_max=args.rounds)
    init = {0: np.zeros(1), 1: np.zeros(1)}
    result = run_admm_c(problem, params, init)
    report = analyze_trace(result.trace, problem=problem)
    print(json.dumps(report.to_dict(), indent=1))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        result.trace.to_json(out / "trace.json")
    gap = abs(result.x[0][0] - 1.0 / 3.0) + abs(result.x[1][0] + 1.0 / 3.0)
    log.info("iterate gap to closed-form optimum: %.3e", gap)
    ok = (
        report.lagrangian_monotone
        and report.bounded
        and report.final_residual <= args.tol
    )
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# diagnose


def _cmd_diagnose(args) -> int:
    path = Path(args.trace)
    if not path.is_file():
        print(f"error: no trace file at {path}", file=sys.stderr)
        return 2
    trace = IterationTrace.from_json(path)
    report = analyze_trace(trace)
    print(json.dumps(report.to_dict(), indent=1))
    return 0 if report.lagrangian_monotone and report.bounded else 1


# ---------------------------------------------------------------------------
# gp-check


def _random_channel(rng, dim, horizon=3):
    d = int(rng.integers(2, 5))
    X = rng.normal(size=(12, d))
    Y = np.sin(X @ rng.normal(size=d)) + 0.05 * rng.normal(size=12)
    cfg = KernelConfig(
        signal_variance=float(rng.uniform(0.5, 2.0)),
        lengthscales=rng.uniform(0.6, 1.8, size=d),
        noise_variance=1e-4,
    )
    model = fit_gp(cfg, Dataset(X, Y))
    regs = tuple(
        AffineRegressor(rng.normal(size=(d, dim)) / np.sqrt(dim), rng.normal(size=d))
        for _ in range(horizon)
    )
    return GpChannel(model=model, regressors=regs, ybar_indices=tuple(range(horizon)))


def _fd_gradient(f, x, h=1e-6):
    g = np.zeros(x.size)
    for j in range(x.size):
        e = np.zeros(x.size)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def _cmd_gp_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    dim = 6
    worst_mean, worst_entropy = 0.0, 0.0
    for _ in range(args.pairs):
        chan = _random_channel(rng, dim)
        x = rng.normal(size=dim)

        reg = chan.regressors[0]
        lin = linearize_gp_mean(chan.model, reg, x)
        fd = _fd_gradient(lambda v: float(chan.model.predict_mean(reg.value(v))), x)
        worst_mean = max(worst_mean, float(np.max(np.abs(lin.gradient - fd))))

        ent = linearize_entropy(chan, x)
        fd_e = _fd_gradient(chan.entropy, x)
        worst_entropy = max(worst_entropy, float(np.max(np.abs(ent.gradient - fd_e))))
    print(
        json.dumps(
            {
                "pairs": args.pairs,
                "max_mean_gradient_error": worst_mean,
                "max_entropy_gradient_error": worst_entropy,
            },
            indent=1,
        )
    )
    return 0 if worst_mean <= 1e-5 and worst_entropy <= 1e-4 else 1


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpdmpc", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="closed-loop simulation with artifact export")
    run.add_argument("--scenario", default="five_vehicles", help="bundled name or YAML path")
    run.add_argument("--mode", choices=("experiment", "coordination"), default="experiment")
    run.add_argument("--agents", type=int, default=None, help="override vehicle count")
    run.add_argument("--steps", type=int, default=100)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default="out")
    run.add_argument(
        "--sequential", action="store_true", help="serial agent phases instead of threads"
    )
    run.set_defaults(fn=_cmd_run)

    at = sub.add_parser("admm-test", help="consensus solve on a built-in static problem")
    at.add_argument("--rho", type=float, default=15.0)
    at.add_argument("--rounds", type=int, default=50)
    at.add_argument("--tol", type=float, default=1e-3)
    at.add_argument("--out", default=None)
    at.set_defaults(fn=_cmd_admm_test)

    di = sub.add_parser("diagnose", help="analyze a saved iteration trace")
    di.add_argument("trace", help="path to a trace JSON file")
    di.set_defaults(fn=_cmd_diagnose)

    gc = sub.add_parser("gp-check", help="finite-difference audit of linearizations")
    gc.add_argument("--pairs", type=int, default=25)
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(fn=_cmd_gp_check)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

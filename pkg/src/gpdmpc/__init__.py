"""Distributed model predictive control with Gaussian-process dynamics.

Agents learn residual dynamics with GP regression, coordinate through a
consensus ADMM scheme whose local steps are convexified trust-region QPs,
and run a receding-horizon loop that can trade tracking cost against an
information (entropy) objective for active learning.

The commonly used entry points are re-exported here; the full surface lives
in the submodules (``gpdmpc.gp``, ``gpdmpc.problem``, ``gpdmpc.qp``,
``gpdmpc.admm``, ``gpdmpc.vehicle``, ``gpdmpc.runtime``, ...).
"""

from .gp import Dataset, GpModel, KernelConfig, fit_gp, optimize_hyperparameters
from .problem import (
    AgentProblem,
    ConsensusProblem,
    Graph,
    SharedObjective,
    build_consensus,
)
from .linearize import build_local_model
from .qp import QpProblem, QpSolution, assemble_prox_qp, solve_qp
from .admm import (
    AdmmParams,
    AdmmResult,
    IterationTrace,
    augmented_lagrangian,
    run_admm_c,
)
from .vehicle import (
    ScenarioConfig,
    build_vehicle_agents,
    five_vehicles,
    load_scenario,
)
from .runtime import RunLog, run_coordination, run_experiment
from .diagnostics import DiagnosticsReport, analyze_trace

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "GpModel",
    "KernelConfig",
    "fit_gp",
    "optimize_hyperparameters",
    "AgentProblem",
    "ConsensusProblem",
    "Graph",
    "SharedObjective",
    "build_consensus",
    "build_local_model",
    "QpProblem",
    "QpSolution",
    "assemble_prox_qp",
    "solve_qp",
    "AdmmParams",
    "AdmmResult",
    "IterationTrace",
    "augmented_lagrangian",
    "run_admm_c",
    "ScenarioConfig",
    "build_vehicle_agents",
    "five_vehicles",
    "load_scenario",
    "RunLog",
    "run_coordination",
    "run_experiment",
    "DiagnosticsReport",
    "analyze_trace",
    "__version__",
]

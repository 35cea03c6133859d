"""Convergence diagnostics computed from consensus iteration traces.

The report turns the engine's theoretical guarantees into measurable checks:
the merit value must not increase across accepted rounds, its decrease per
round bounds a positive sufficient-descent constant, the penalty parameter
must clear the curvature of the coupling objectives, and iterates must stay
bounded.  Everything derives from a recorded trace; the curvature bound
additionally needs the coupling objectives themselves.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

__all__ = ["DiagnosticsReport", "analyze_trace", "shared_curvature_bound"]

_MONOTONE_TOL = 1e-8
_DENOM_FLOOR = 1e-12


@dataclass(frozen=True)
class DiagnosticsReport:
    """Measured convergence properties of one consensus run.

    Fields that need information beyond the trace (the coupling curvature
    ``l_bar`` and everything derived from it, or the step parameter ``rho``)
    are ``None`` when that information was not supplied.
    """

    iterations: int
    lagrangian_monotone: bool
    max_violation: float
    c1_hat: float | None  # min per-round decrease / squared step size
    c2_hat: float | None  # max scaled z-gradient / step size (stationarity proxy)
    max_residual: float
    final_residual: float
    max_iterate_norm: float
    bounded: bool
    accept_rate: float
    rho: float | None
    l_bar: float | None
    rho_margin_ok: bool | None

    def to_dict(self) -> dict:
        return asdict(self)


def shared_curvature_bound(shared) -> float:
    """Largest eigenvalue over the coupling objectives' Hessians (0 if none)."""
    top = 0.0
    for sh in shared:
        if sh is None:
            continue
        Q = np.asarray(sh.quad.Q, dtype=float)
        if Q.size:
            top = max(top, float(np.linalg.eigvalsh(Q)[-1]))
    return top


def analyze_trace(
    trace, problem=None, rho: float | None = None, l_bar: float | None = None
) -> DiagnosticsReport:
    """Build a :class:`DiagnosticsReport` from a recorded trace.

    Parameters
    ----------
    trace : IterationTrace
        Nonempty trace from the consensus engine.
    problem : ConsensusProblem, optional
        Supplies the coupling objectives for the curvature bound; without it
        (or an explicit ``l_bar``) the margin fields stay ``None``.
    rho : float, optional
        Step parameter; defaults to the value recorded in ``trace.meta``.
    l_bar : float, optional
        Precomputed curvature bound, for callers that have the coupling
        objectives but not a full problem object.

    The trace is only read, never modified.
    """
    records = list(trace.records)
    if not records:
        raise ValueError("cannot analyze an empty trace")
    if rho is None:
        rho = trace.meta.get("rho")

    lag = np.array([r.lagrangian for r in records])
    # the first recorded round establishes the certified merit value; compare
    # consecutive recorded rounds only
    deltas = lag[1:] - lag[:-1]
    max_violation = float(max(0.0, deltas.max())) if deltas.size else 0.0
    monotone = bool(max_violation <= _MONOTONE_TOL)

    c1_vals, c2_vals = [], []
    for k in range(1, len(records)):
        denom = records[k].step_norm_sq
        if denom > _DENOM_FLOOR:
            c1_vals.append((lag[k - 1] - lag[k]) / denom)
            if rho is not None:
                grad_z = rho * max(records[k].residuals)
                c2_vals.append(grad_z / np.sqrt(denom))
    c1_hat = float(min(c1_vals)) if c1_vals else None
    c2_hat = float(max(c2_vals)) if c2_vals else None

    residual_peaks = [max(r.residuals) for r in records]
    iter_norms = [r.max_iterate_norm for r in records]
    accepted = [a for r in records for a in r.accepted]

    if problem is not None:
        l_bar = shared_curvature_bound(getattr(problem, "shared", {}).values())
    rho_margin_ok = None
    if l_bar is not None and rho is not None:
        rho_margin_ok = bool(rho > 4.0 * l_bar + 2.0)

    return DiagnosticsReport(
        iterations=len(records),
        lagrangian_monotone=monotone,
        max_violation=max_violation,
        c1_hat=c1_hat,
        c2_hat=c2_hat,
        max_residual=float(max(residual_peaks)),
        final_residual=float(residual_peaks[-1]),
        max_iterate_norm=float(max(iter_norms)),
        bounded=bool(np.all(np.isfinite(iter_norms))),
        accept_rate=float(np.mean(accepted)) if accepted else 0.0,
        rho=None if rho is None else float(rho),
        l_bar=l_bar,
        rho_margin_ok=rho_margin_ok,
    )

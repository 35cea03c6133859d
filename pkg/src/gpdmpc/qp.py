"""Dense convex QP solver via ADMM operator splitting, plus problem assembly.

Canonical form::

    minimize   0.5 x'Px + q'x
    subject to l <= Ax <= u        (elementwise, l_i == u_i for equalities)

The splitting iteration factors one quasi-definite KKT matrix and reuses it,
uses over-relaxation, and finishes with an active-set polish solve so that
well-posed problems come back with KKT residuals near machine precision.
``P`` only needs to be positive semidefinite.  Everything is deterministic:
the same problem bits always produce the same solution bits.

The module also assembles the proximal trust-region QP used by the
distributed x-step: L1 penalty channels become split slacks ``s+ - s-``,
hinge penalties become one-sided slacks, and the infinity-norm trust region
becomes a box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

__all__ = [
    "QpProblem",
    "QpSolution",
    "solve_qp",
    "assemble_prox_qp",
    "prox_shared",
    "dump_qp",
    "load_qp",
]

_SIGMA = 1e-6          # primal regularization of the splitting
_ALPHA = 1.6           # over-relaxation
_RHO_BASE = 0.1        # step parameter for inequality rows
_RHO_EQ_SCALE = 1e3    # stiffening factor for equality rows
_CHECK_EVERY = 25
_ADAPT_TOL = 5.0       # residual imbalance that triggers a step-size rescale
_RHO_MIN = 1e-6
_RHO_MAX = 1e6
_POLISH_EVERY = 250    # mid-run polish attempts; rescues zigzagging duals


@dataclass(frozen=True)
class QpProblem:
    """A convex QP in canonical box-row form; ``meta`` is free-form caller data."""

    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        q = np.asarray(self.q, dtype=float).ravel()
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        l = np.asarray(self.l, dtype=float).ravel()
        u = np.asarray(self.u, dtype=float).ravel()
        n = q.size
        if P.shape != (n, n):
            raise ValueError(f"P has shape {P.shape}, expected {(n, n)}")
        if A.ndim != 2 or A.shape[1] != n:
            raise ValueError(f"A has shape {A.shape}, expected (*, {n})")
        m = A.shape[0]
        if l.shape != (m,) or u.shape != (m,):
            raise ValueError("bound vectors do not match the number of rows of A")
        if np.any(l > u):
            raise ValueError("found l > u; empty constraint interval")
        if not np.allclose(P, P.T, atol=1e-10):
            raise ValueError("P must be symmetric")
        for name, arr in (("P", P), ("q", q), ("A", A)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        object.__setattr__(self, "P", 0.5 * (P + P.T))
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "l", l)
        object.__setattr__(self, "u", u)

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.P @ x + self.q @ x)


@dataclass(frozen=True)
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: str  # "solved" | "max_iter" | "primal_infeasible"
    iterations: int
    primal_res: float
    dual_res: float
    objective: float
    polished: bool = False


def _residuals(prob: QpProblem, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    Ax = prob.A @ x
    viol = np.maximum(prob.l - Ax, 0.0) + np.maximum(Ax - prob.u, 0.0)
    r_prim = float(np.max(viol)) if viol.size else 0.0
    r_dual = float(np.max(np.abs(prob.P @ x + prob.q + prob.A.T @ y)))
    return r_prim, r_dual


def _infeasibility_certificate(prob: QpProblem, dy: np.ndarray) -> bool:
    """True when ``dy`` certifies that no x satisfies l <= Ax <= u."""
    scale = float(np.max(np.abs(dy)))
    if scale <= 1e-12:
        return False
    v = dy / scale
    vp = np.maximum(v, 0.0)
    vm = np.maximum(-v, 0.0)
    # directions pushing on an infinite bound can never certify
    if np.any(vp[np.isinf(prob.u)] > 1e-8) or np.any(vm[np.isinf(prob.l)] > 1e-8):
        return False
    atv = float(np.max(np.abs(prob.A.T @ v))) if prob.m else 0.0
    gap = float(np.sum(prob.u[vp > 0] * vp[vp > 0]) - np.sum(prob.l[vm > 0] * vm[vm > 0]))
    tol = 1e-8 * (1.0 + (float(np.max(np.abs(prob.A))) if prob.m else 0.0))
    return atv <= tol and gap < -1e-8


def _polish(prob: QpProblem, x: np.ndarray, y: np.ndarray):
    """Equality-constrained re-solve on the detected active set.

    Returns ``(x, y, True)`` when the polished point improves the worst KKT
    residual, otherwise the input point unchanged.
    """
    low = (prob.l == prob.u) | (y < -1e-9)
    upp = (prob.l == prob.u) | (y > 1e-9)
    active = low | upp
    idx = np.flatnonzero(active)
    n, na = prob.n, idx.size
    b = np.where(y[idx] < 0, prob.l[idx], prob.u[idx])
    b = np.where(prob.l[idx] == prob.u[idx], prob.l[idx], b)
    Aa = prob.A[idx]
    delta = 1e-9
    K = np.zeros((n + na, n + na))
    K[:n, :n] = prob.P + delta * np.eye(n)
    K[:n, n:] = Aa.T
    K[n:, :n] = Aa
    K[n:, n:] = -delta * np.eye(na)
    rhs = np.concatenate([-prob.q, b])
    try:
        lu = sla.lu_factor(K)
    except (ValueError, np.linalg.LinAlgError):
        return x, y, False
    sol = sla.lu_solve(lu, rhs)
    # a couple of iterative-refinement sweeps against the unregularized KKT
    K0 = K.copy()
    K0[:n, :n] = prob.P
    K0[n:, n:] = 0.0
    for _ in range(3):
        sol = sol + sla.lu_solve(lu, rhs - K0 @ sol)
    x_new = sol[:n]
    y_new = np.zeros(prob.m)
    y_new[idx] = sol[n:]
    if not np.all(np.isfinite(x_new)):
        return x, y, False
    r0 = max(_residuals(prob, x, y))
    r1 = max(_residuals(prob, x_new, y_new))
    if r1 < r0:
        return x_new, y_new, True
    return x, y, False


def _factor_kkt(prob: QpProblem, rho: np.ndarray):
    n, m = prob.n, prob.m
    K = np.zeros((n + m, n + m))
    K[:n, :n] = prob.P + _SIGMA * np.eye(n)
    K[:n, n:] = prob.A.T
    K[n:, :n] = prob.A
    K[n:, n:] = -np.diag(1.0 / rho)
    return sla.lu_factor(K)


def solve_qp(prob: QpProblem, max_iter: int = 20000, tol: float = 1e-6) -> QpSolution:
    """Solve a canonical-form QP by over-relaxed ADMM splitting with polish.

    The per-row step size starts at the base pattern (equality rows scaled up)
    and rescales itself when the scaled primal and dual residuals drift apart
    by more than a factor of five, refactoring the KKT system.
    """
    n, m = prob.n, prob.m
    if m == 0:
        # unconstrained: regularized least-squares stationary point
        x = np.linalg.solve(prob.P + _SIGMA * np.eye(n), -prob.q)
        r_p, r_d = _residuals(prob, x, np.zeros(0))
        return QpSolution(x, np.zeros(0), "solved", 0, r_p, r_d, prob.objective(x))

    rho = np.where(prob.l == prob.u, _RHO_BASE * _RHO_EQ_SCALE, _RHO_BASE).astype(float)
    lu = _factor_kkt(prob, rho)

    x = np.zeros(n)
    z = np.clip(np.zeros(m), prob.l, prob.u)
    y = np.zeros(m)
    y_mark = y.copy()
    status = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        rhs = np.concatenate([_SIGMA * x - prob.q, z - y / rho])
        sol = sla.lu_solve(lu, rhs)
        x_t, nu = sol[:n], sol[n:]
        z_t = z + (nu - y) / rho
        x = _ALPHA * x_t + (1.0 - _ALPHA) * x
        z_pre = _ALPHA * z_t + (1.0 - _ALPHA) * z
        z_new = np.clip(z_pre + y / rho, prob.l, prob.u)
        y = y + rho * (z_pre - z_new)
        z = z_new
        if it % _CHECK_EVERY == 0 or it == max_iter:
            r_p, r_d = _residuals(prob, x, y)
            eps_p = tol * (1.0 + max(_norm_inf(prob.A @ x), _norm_inf(z)))
            eps_d = tol * (1.0 + max(_norm_inf(prob.P @ x), _norm_inf(prob.A.T @ y), _norm_inf(prob.q)))
            if r_p <= eps_p and r_d <= eps_d:
                status = "solved"
                break
            if _infeasibility_certificate(prob, y - y_mark):
                r_p, r_d = _residuals(prob, x, y)
                return QpSolution(x, y, "primal_infeasible", it, r_p, r_d, prob.objective(x))
            y_mark = y.copy()
            if it % _POLISH_EVERY == 0:
                # The splitting can zigzag around a correct active set when
                # penalty slacks have no curvature; a successful polish of the
                # current guess finishes the job outright.
                px, py, pok = _polish(prob, x, y)
                if pok:
                    pr_p, pr_d = _residuals(prob, px, py)
                    if pr_p <= tol and pr_d <= tol:
                        return QpSolution(
                            px, py, "solved", it, pr_p, pr_d, prob.objective(px), True
                        )
            if it < max_iter:
                scaled_p = r_p / max(_norm_inf(prob.A @ x), _norm_inf(z), 1e-12)
                scaled_d = r_d / max(
                    _norm_inf(prob.P @ x), _norm_inf(prob.A.T @ y), _norm_inf(prob.q), 1e-12
                )
                factor = np.sqrt(scaled_p / max(scaled_d, 1e-16))
                if np.isfinite(factor) and (factor > _ADAPT_TOL or factor < 1.0 / _ADAPT_TOL):
                    rho = np.clip(rho * factor, _RHO_MIN, _RHO_MAX)
                    lu = _factor_kkt(prob, rho)

    x, y, polished = _polish(prob, x, y)
    r_p, r_d = _residuals(prob, x, y)
    if status != "solved" and r_p <= tol and r_d <= tol:
        status = "solved"
    return QpSolution(x, y, status, it, r_p, r_d, prob.objective(x), polished)


def _norm_inf(v: np.ndarray) -> float:
    return float(np.max(np.abs(v))) if v.size else 0.0


# ---------------------------------------------------------------------------
# proximal trust-region QP for the distributed x-step


def assemble_prox_qp(model, prox_center: np.ndarray, weight: float, radius: float) -> QpProblem:
    """Canonical QP for one convexified local step.

    Minimizes, over the step ``delta`` around ``model.nominal``::

        quad(delta) - gamma * entropy_lin(delta)
        + tau * sum|eq channels|  + lam * sum max(0, ineq channels)
        + (weight/2) * ||nominal + delta - prox_center||^2
        subject to ||delta||_inf <= radius

    with decision vector ``[delta; s+; s-; t]``: each absolute-value channel
    splits into ``s+ - s-`` (both nonnegative, both priced ``tau``), each
    hinge gets ``t >= 0, t >= channel`` priced ``lam``.

    Parameters
    ----------
    model : ConvexLocalModel
        Convexified local objective around its nominal point.
    prox_center : np.ndarray
        Proximal attraction point in the original (not delta) coordinates.
    weight, radius : float
        Proximal weight (rho times neighborhood size) and trust radius.
    """
    if weight <= 0 or radius <= 0:
        raise ValueError("prox weight and trust radius must be positive")
    n = model.nominal.size
    me = model.eq_b.size
    mi = model.in_b.size
    dim = n + 2 * me + mi
    c = np.asarray(prox_center, dtype=float) - model.nominal

    P = np.zeros((dim, dim))
    P[:n, :n] = model.quad_H + weight * np.eye(n)
    q = np.zeros(dim)
    q[:n] = model.quad_g - model.gamma * model.entropy_grad - weight * c
    q[n : n + 2 * me] = model.tau
    q[n + 2 * me :] = model.lam

    rows = me + mi + dim
    A = np.zeros((rows, dim))
    l = np.empty(rows)
    u = np.empty(rows)
    r = 0
    if me:
        A[r : r + me, :n] = model.eq_A
        A[r : r + me, n : n + me] = -np.eye(me)
        A[r : r + me, n + me : n + 2 * me] = np.eye(me)
        l[r : r + me] = -model.eq_b
        u[r : r + me] = -model.eq_b
        r += me
    if mi:
        A[r : r + mi, :n] = model.in_A
        A[r : r + mi, n + 2 * me :] = -np.eye(mi)
        l[r : r + mi] = -np.inf
        u[r : r + mi] = -model.in_b
        r += mi
    A[r : r + dim, :] = np.eye(dim)
    l[r : r + n] = -radius
    u[r : r + n] = radius
    l[r + n :] = 0.0
    u[r + n :] = np.inf

    meta = {"n_delta": n, "n_eq": me, "n_in": mi}
    return QpProblem(P, q, A, l, u, meta=meta)


def prox_shared(shared, center: np.ndarray, rho: float) -> np.ndarray:
    """Proximal point of a quadratic shared objective: ``(Q + rho I) z = rho*center - q``."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    n = shared.q.size
    cf = sla.cho_factor(shared.Q + rho * np.eye(n), lower=True)
    return sla.cho_solve(cf, rho * np.asarray(center, dtype=float) - shared.q)


# ---------------------------------------------------------------------------
# plain-text dump/load


def dump_qp(prob: QpProblem, path) -> None:
    """Write P, q, A, l, u as labeled plain-text blocks."""
    with open(path, "w") as fh:
        fh.write("qp-canonical 1\n")
        for label, arr in (("P", prob.P), ("q", prob.q), ("A", prob.A), ("l", prob.l), ("u", prob.u)):
            arr2 = np.atleast_2d(arr)
            fh.write(f"{label} {arr2.shape[0]} {arr2.shape[1]}\n")
            for row in arr2:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_qp(path) -> QpProblem:
    """Read a problem written by :func:`dump_qp`."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or not lines[0].startswith("qp-canonical"):
        raise ValueError("not a QP dump file")
    blocks = {}
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        label, nr, nc = lines[i].split()
        nr, nc = int(nr), int(nc)
        data = [[float(v) for v in lines[i + 1 + r].split()] for r in range(nr)]
        blocks[label] = np.asarray(data, dtype=float)
        i += 1 + nr
    missing = {"P", "q", "A", "l", "u"} - blocks.keys()
    if missing:
        raise ValueError(f"QP dump missing blocks: {sorted(missing)}")
    return QpProblem(
        blocks["P"], blocks["q"].ravel(), blocks["A"], blocks["l"].ravel(), blocks["u"].ravel()
    )

"""Convexification of the penalized local objective around a nominal point.

The local objective mixes a convex quadratic, affine penalty channels, and
two genuinely nonlinear ingredients: GP posterior means inside equality
channels and the joint-posterior entropy.  Convexification keeps every convex
term exact (the quadratic is only re-centered, affine channels and hinges are
untouched) and replaces the GP terms by first-order models at the nominal
point, chained through each regressor's jacobian.  The result agrees with the
exact objective at a zero step — that anchor is what the trust-region
acceptance test relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gp import GpModel, entropy_logdet
from .problem import AgentProblem, GpChannel

__all__ = [
    "Linearization",
    "ConvexLocalModel",
    "linearize_gp_mean",
    "linearize_entropy",
    "build_local_model",
]


@dataclass(frozen=True)
class Linearization:
    """First-order model ``value + gradient @ delta`` around ``nominal``."""

    value: float
    gradient: np.ndarray
    nominal: np.ndarray

    def __call__(self, delta: np.ndarray) -> float:
        return self.value + float(self.gradient @ delta)


def linearize_gp_mean(model: GpModel, regressor, x_nominal: np.ndarray) -> Linearization:
    """Linearize ``x -> predict_mean(regressor(x))`` at ``x_nominal``.

    The gradient chains the analytic mean gradient with the regressor
    jacobian: ``J_reg(x*)' grad_mean(reg(x*))``.
    """
    x_nominal = np.asarray(x_nominal, dtype=float)
    r = regressor.value(x_nominal)
    value = float(model.predict_mean(r))
    grad = regressor.jacobian(x_nominal).T @ model.predict_mean_gradient(r)
    return Linearization(value, grad, x_nominal)


def linearize_entropy(channel: GpChannel, x_nominal: np.ndarray) -> Linearization:
    """Linearize one channel's joint-posterior entropy over its horizon inputs."""
    x_nominal = np.asarray(x_nominal, dtype=float)
    X = channel.horizon_inputs(x_nominal)
    value = entropy_logdet(channel.model.joint_posterior(X))
    G = channel.model.entropy_gradient(X)  # (H, d)
    grad = np.zeros(x_nominal.size)
    for k, reg in enumerate(channel.regressors):
        grad += reg.jacobian(x_nominal).T @ G[k]
    return Linearization(value, grad, x_nominal)


@dataclass(frozen=True)
class ConvexLocalModel:
    """Convex surrogate of one agent's penalized objective, in step coordinates.

    For a step ``delta`` around ``nominal``::

        quad_c + quad_g @ delta + 0.5 delta' quad_H delta
        - gamma * (entropy_value + entropy_grad @ delta)
        + tau * sum |eq_b + eq_A delta|  + lam * sum max(0, in_b + in_A delta)

    Equality rows stack the linearized GP-mean channels first, then the exact
    affine equalities.  ``radius`` is the trust region the surrogate was built
    for (used by the QP assembly).
    """

    nominal: np.ndarray
    quad_H: np.ndarray
    quad_g: np.ndarray
    quad_c: float
    entropy_value: float
    entropy_grad: np.ndarray
    eq_A: np.ndarray
    eq_b: np.ndarray
    in_A: np.ndarray
    in_b: np.ndarray
    gamma: float
    tau: float
    lam: float
    radius: float

    def evaluate(self, delta: np.ndarray) -> float:
        """Surrogate objective at a step ``delta``."""
        delta = np.asarray(delta, dtype=float)
        val = self.quad_c + float(self.quad_g @ delta) + 0.5 * float(delta @ self.quad_H @ delta)
        if self.gamma > 0.0:
            val -= self.gamma * (self.entropy_value + float(self.entropy_grad @ delta))
        if self.eq_b.size:
            val += self.tau * float(np.sum(np.abs(self.eq_b + self.eq_A @ delta)))
        if self.in_b.size:
            val += self.lam * float(np.sum(np.maximum(0.0, self.in_b + self.in_A @ delta)))
        return val

    @property
    def value_at_zero(self) -> float:
        return self.evaluate(np.zeros(self.nominal.size))

    @property
    def smooth_gradient(self) -> np.ndarray:
        """Gradient at zero step of the smooth part (quadratic minus entropy)."""
        return self.quad_g - self.gamma * self.entropy_grad


def build_local_model(agent: AgentProblem, x_nominal: np.ndarray, radius: float) -> ConvexLocalModel:
    """Convexify ``agent``'s penalized objective around ``x_nominal``.

    GP-mean channels and (when ``gamma > 0``) the entropy are linearized; the
    quadratic objective and affine/hinge channels are carried over exactly.
    """
    x_nominal = np.asarray(x_nominal, dtype=float)
    n = agent.dim
    if x_nominal.shape != (n,):
        raise ValueError(f"nominal has shape {x_nominal.shape}, expected ({n},)")
    if radius <= 0:
        raise ValueError("trust radius must be positive")

    rows, rhs = [], []
    for ch in agent.channels:
        res = ch.residuals(x_nominal)
        for k, reg in enumerate(ch.regressors):
            r = reg.value(x_nominal)
            grad = np.zeros(n)
            grad[ch.ybar_indices[k]] = 1.0
            grad -= reg.jacobian(x_nominal).T @ ch.model.predict_mean_gradient(r)
            rows.append(grad)
            rhs.append(res[k])
    if agent.eq_affine.rows:
        rows.extend(agent.eq_affine.A)
        rhs.extend(agent.eq_affine.value(x_nominal))
    eq_A = np.vstack(rows) if rows else np.zeros((0, n))
    eq_b = np.asarray(rhs, dtype=float)

    ent_val, ent_grad = 0.0, np.zeros(n)
    if agent.gamma > 0.0:
        for ch in agent.channels:
            lin = linearize_entropy(ch, x_nominal)
            ent_val += lin.value
            ent_grad += lin.gradient

    return ConvexLocalModel(
        nominal=x_nominal,
        quad_H=agent.objective.Q,
        quad_g=agent.objective.gradient(x_nominal),
        quad_c=agent.objective.value(x_nominal),
        entropy_value=ent_val,
        entropy_grad=ent_grad,
        eq_A=eq_A,
        eq_b=eq_b,
        in_A=agent.ineq_affine.A if agent.ineq_affine.rows else np.zeros((0, n)),
        in_b=agent.ineq_affine.value(x_nominal),
        gamma=agent.gamma,
        tau=agent.tau,
        lam=agent.lam,
        radius=radius,
    )

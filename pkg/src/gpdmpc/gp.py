"""Gaussian-process regression core.

ARD squared-exponential models with a cached Cholesky factor, analytic
derivatives of the predictive mean, joint posteriors over query batches and
the log-determinant entropy of those posteriors (with gradients).  These are
the building blocks the receding-horizon controller differentiates through,
so everything here is deterministic and side-effect free: models are frozen
after ``fit`` and retraining builds a new model.

Conventions
-----------
* inputs ``X`` are ``(n, d)``, targets ``Y`` are ``(n,)``
* a single query is a ``(d,)`` vector, a query batch is ``(m, d)``
* hyperparameters live in :class:`KernelConfig` and are strictly positive
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg as sla
from scipy import optimize

__all__ = [
    "KernelConfig",
    "Dataset",
    "GpModel",
    "JointPrediction",
    "FactorizationError",
    "se_kernel",
    "fit_gp",
    "log_marginal_likelihood",
    "optimize_hyperparameters",
    "entropy_logdet",
    "load_dataset_csv",
    "save_dataset_csv",
]

# Jitter escalation: multiples of trace(K)/n tried in order when a Cholesky
# factorization fails, after first attempting the factorization untouched.
_JITTER_START = 1e-10
_JITTER_MAX = 1e-4


class FactorizationError(RuntimeError):
    """A kernel matrix stayed non-positive-definite after jitter escalation."""


@dataclass(frozen=True)
class KernelConfig:
    """Hyperparameters of an ARD squared-exponential kernel.

    Attributes
    ----------
    signal_variance : float
        Prior variance of the latent function, ``k(x, x)``.
    lengthscales : np.ndarray
        Per-dimension lengthscales, shape ``(d,)``.
    noise_variance : float
        Variance of the iid observation noise.
    """

    signal_variance: float
    lengthscales: np.ndarray
    noise_variance: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if not np.isfinite(self.signal_variance) or self.signal_variance <= 0:
            raise ValueError(f"signal_variance must be positive, got {self.signal_variance}")
        if ls.ndim != 1 or ls.size == 0 or not np.all(np.isfinite(ls)) or np.any(ls <= 0):
            raise ValueError("lengthscales must be a 1-d array of positive values")
        if not np.isfinite(self.noise_variance) or self.noise_variance <= 0:
            raise ValueError(f"noise_variance must be positive, got {self.noise_variance}")

    @property
    def input_dim(self) -> int:
        return self.lengthscales.size


@dataclass(frozen=True)
class Dataset:
    """Training data with an optional FIFO capacity.

    ``append`` returns a new dataset; once ``capacity`` rows are held the
    oldest row is dropped first.
    """

    X: np.ndarray
    Y: np.ndarray
    capacity: int | None = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Y = np.asarray(self.Y, dtype=float).ravel()
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
        if self.capacity is not None and self.capacity < 1:
            raise ValueError("capacity must be a positive integer")
        if self.capacity is not None and X.shape[0] > self.capacity:
            raise ValueError(f"{X.shape[0]} rows exceed capacity {self.capacity}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def append(self, x, y: float) -> "Dataset":
        """Return a new dataset with ``(x, y)`` appended, FIFO-evicting at capacity."""
        x = np.asarray(x, dtype=float).ravel()
        if len(self) and x.size != self.input_dim:
            raise ValueError(f"appended input has dim {x.size}, expected {self.input_dim}")
        X = np.vstack([self.X, x[None, :]]) if len(self) else x[None, :]
        Y = np.concatenate([self.Y, [float(y)]])
        if self.capacity is not None and X.shape[0] > self.capacity:
            X, Y = X[1:], Y[1:]
        return Dataset(X, Y, self.capacity)


def save_dataset_csv(dataset: Dataset, path) -> None:
    """Write a dataset as CSV with header ``x1,...,xd,y``."""
    d = dataset.input_dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i + 1}" for i in range(d)] + ["y"])
        for row, y in zip(dataset.X, dataset.Y):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(y))])


def load_dataset_csv(path, capacity: int | None = None) -> Dataset:
    """Read a dataset written by :func:`save_dataset_csv`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "y" or header[:-1] != [f"x{i + 1}" for i in range(len(header) - 1)]:
            raise ValueError(f"unexpected dataset header: {header!r}")
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.asarray(rows, dtype=float)
    if data.size == 0:
        raise ValueError(f"dataset file {path} holds no rows")
    return Dataset(data[:, :-1], data[:, -1], capacity)


def _scaled_sqdist(A: np.ndarray, B: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    """Pairwise squared distances of rows of A and B after lengthscale whitening."""
    As = A / lengthscales
    Bs = B / lengthscales
    d2 = (
        np.sum(As**2, axis=1)[:, None]
        + np.sum(Bs**2, axis=1)[None, :]
        - 2.0 * As @ Bs.T
    )
    return np.maximum(d2, 0.0)


def se_kernel(config: KernelConfig, A, B) -> np.ndarray:
    """ARD squared-exponential kernel matrix ``k(A, B)``, shape ``(nA, nB)``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    return config.signal_variance * np.exp(-0.5 * _scaled_sqdist(A, B, config.lengthscales))


def _chol_with_jitter(M: np.ndarray, label: str) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``M + delta*I`` under the escalation policy.

    Tries ``delta = 0`` first, then ``delta = c * trace(M)/n`` for
    ``c = 1e-10, 1e-9, ..., 1e-4``.  Raises :class:`FactorizationError` when
    every attempt fails.
    """
    n = M.shape[0]
    scale = float(np.trace(M)) / n
    if scale <= 0 or not np.isfinite(scale):
        scale = 1.0
    # nearly-zero traces (degenerate posteriors over duplicated queries) would
    # otherwise cap the escalation below float noise
    scale = max(scale, 1e-10)
    deltas = [0.0]
    c = _JITTER_START
    while c <= _JITTER_MAX * (1 + 1e-12):
        deltas.append(c * scale)
        c *= 10.0
    for delta in deltas:
        try:
            L = np.linalg.cholesky(M + delta * np.eye(n) if delta else M)
            return L, delta
        except np.linalg.LinAlgError:
            continue
    raise FactorizationError(
        f"{label} not positive definite after jitter escalation up to {deltas[-1]:.3e}"
    )


@dataclass(frozen=True)
class GpModel:
    """A fitted GP: hyperparameters, data, and the cached factorization.

    ``chol`` is the lower Cholesky factor of ``K + noise_variance*I`` (plus
    the recorded ``jitter`` on the diagonal when escalation was needed) and
    ``alpha`` solves ``(K + noise_variance*I) alpha = Y``.  Instances are
    immutable; refitting returns a new model.
    """

    config: KernelConfig
    data: Dataset
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0

    def predict_mean(self, x) -> float | np.ndarray:
        """Posterior mean at ``x``; ``(d,) -> float`` or ``(m, d) -> (m,)``."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        k = se_kernel(self.config, np.atleast_2d(x), self.data.X)
        out = k @ self.alpha
        return float(out[0]) if single else out

    def predict_mean_gradient(self, x) -> np.ndarray:
        """Gradient of the posterior mean at a single query, shape ``(d,)``.

        For the squared-exponential kernel
        ``d k(x, xi)/dx_j = -(x_j - xi_j)/l_j^2 * k(x, xi)``; the mean
        gradient is this stacked against the cached ``alpha`` weights.
        """
        x = np.asarray(x, dtype=float).ravel()
        k = se_kernel(self.config, x[None, :], self.data.X)[0]  # (n,)
        diff = (x[None, :] - self.data.X) / self.config.lengthscales**2  # (n, d)
        return -(diff * k[:, None]).T @ self.alpha

    def joint_posterior(self, Xq) -> "JointPrediction":
        """Joint posterior over a batch of queries.

        Returns means ``k(Xq, X) alpha`` and the symmetrized covariance
        ``K(Xq, Xq) - K(Xq, X) (K + s_n^2 I)^{-1} K(X, Xq)``.
        """
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        if Xq.shape[0] == 0:
            raise ValueError("query batch is empty")
        Kqx = se_kernel(self.config, Xq, self.data.X)
        means = Kqx @ self.alpha
        V = sla.cho_solve((self.chol, True), Kqx.T)
        cov = se_kernel(self.config, Xq, Xq) - Kqx @ V
        cov = 0.5 * (cov + cov.T)
        return JointPrediction(inputs=Xq, means=means, covariance=cov)

    def entropy_gradient(self, Xq) -> np.ndarray:
        """Gradient of :func:`entropy_logdet` w.r.t. each query input.

        Uses ``d logdet(S) = tr(S^{-1} dS)`` with the analytic kernel input
        derivatives; returns shape ``(m, d)``.  The same jitter rule as the
        entropy value keeps the two consistent.
        """
        pred = self.joint_posterior(Xq)
        Xq = pred.inputs
        m, d = Xq.shape
        Ls, _ = _chol_with_jitter(pred.covariance, "joint posterior covariance")
        W = sla.cho_solve((Ls, True), np.eye(m))  # inv(cov + delta I), symmetric

        ls2 = self.config.lengthscales**2
        Kqx = se_kernel(self.config, Xq, self.data.X)  # (m, n)
        A = sla.cho_solve((self.chol, True), Kqx.T)  # (n, m), = (K+s^2 I)^{-1} k_b
        Kqq = se_kernel(self.config, Xq, Xq)  # (m, m)

        grad = np.empty((m, d))
        for h in range(m):
            for j in range(d):
                # u_i = d k(X_i, x_h) / d x_{h,j}
                u = (self.data.X[:, j] - Xq[h, j]) / ls2[j] * Kqx[h]  # (n,)
                cross = u @ A  # (m,), u^T (K+s^2 I)^{-1} k_b
                # dS_{hb} for b != h: first-argument kernel derivative minus cross term
                dk = -(Xq[h, j] - Xq[:, j]) / ls2[j] * Kqq[h]  # (m,)
                row = dk - cross
                # dS_{hh}: k(x,x) is constant, both cross arguments move
                row_h = -2.0 * cross[h]
                acc = 2.0 * (W[h] @ row) - 2.0 * W[h, h] * row[h] + W[h, h] * row_h
                grad[h, j] = acc
        return grad


@dataclass(frozen=True)
class JointPrediction:
    """Joint posterior over a query batch: inputs ``(m, d)``, means ``(m,)``, covariance ``(m, m)``."""

    inputs: np.ndarray
    means: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        m = self.means.shape[0]
        if self.covariance.shape != (m, m) or self.inputs.shape[0] != m:
            raise ValueError("inconsistent joint prediction shapes")


def entropy_logdet(pred: JointPrediction) -> float:
    """``log det`` of the joint posterior covariance via its Cholesky factor.

    A diagonal jitter is escalated if the covariance is numerically singular;
    the value is then ``log det(cov + delta I)``.
    """
    L, _ = _chol_with_jitter(pred.covariance, "joint posterior covariance")
    return float(2.0 * np.sum(np.log(np.diag(L))))


def fit_gp(config: KernelConfig, dataset: Dataset) -> GpModel:
    """Factor ``K + noise_variance*I`` and cache ``alpha`` for prediction."""
    if len(dataset) == 0:
        raise ValueError("cannot fit a GP on an empty dataset")
    if dataset.input_dim != config.input_dim:
        raise ValueError(
            f"dataset dim {dataset.input_dim} != kernel dim {config.input_dim}"
        )
    K = se_kernel(config, dataset.X, dataset.X)
    Ky = K + config.noise_variance * np.eye(len(dataset))
    L, jitter = _chol_with_jitter(Ky, "K + noise_variance*I")
    alpha = sla.cho_solve((L, True), dataset.Y)
    return GpModel(config=config, data=dataset, chol=L, alpha=alpha, jitter=jitter)


def log_marginal_likelihood(config: KernelConfig, dataset: Dataset) -> float:
    """Log marginal likelihood of the data under ``config``."""
    model = fit_gp(config, dataset)
    n = len(dataset)
    return float(
        -0.5 * dataset.Y @ model.alpha
        - np.sum(np.log(np.diag(model.chol)))
        - 0.5 * n * np.log(2.0 * np.pi)
    )


def _nll_and_grad(log_params: np.ndarray, X: np.ndarray, Y: np.ndarray):
    """Negative LML and its gradient w.r.t. log hyperparameters.

    Layout of ``log_params``: ``[log sv, log l_1..log l_d, log s_n^2]``.
    Gradient uses ``d lml/d t = 0.5 tr((alpha alpha^T - Ky^{-1}) dKy/dt)``.
    """
    n, d = X.shape
    with np.errstate(over="ignore"):
        sv = np.exp(log_params[0])
        ls = np.exp(log_params[1 : 1 + d])
        noise = np.exp(log_params[1 + d])
    bad = (1e25, np.zeros_like(log_params))
    if not np.all(np.isfinite([sv, noise])) or not np.all(np.isfinite(ls)):
        return bad
    try:
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            config = KernelConfig(sv, ls, noise)
            K = se_kernel(config, X, X)
            Ky = K + noise * np.eye(n)
            if not np.all(np.isfinite(Ky)):
                return bad
            L, _ = _chol_with_jitter(Ky, "K + noise_variance*I")
            alpha = sla.cho_solve((L, True), Y, check_finite=False)
            nll = float(
                0.5 * Y @ alpha + np.sum(np.log(np.diag(L))) + 0.5 * n * np.log(2 * np.pi)
            )
            Kinv = sla.cho_solve((L, True), np.eye(n), check_finite=False)
            M = np.outer(alpha, alpha) - Kinv  # symmetric
            grad = np.empty_like(log_params)
            grad[0] = 0.5 * np.sum(M * K)
            for j in range(d):
                D = _scaled_sqdist(X[:, j : j + 1], X[:, j : j + 1], ls[j : j + 1])
                grad[1 + j] = 0.5 * np.sum(M * (K * D))
            grad[1 + d] = 0.5 * noise * np.trace(M)
        if not np.isfinite(nll) or not np.all(np.isfinite(grad)):
            return bad
        return nll, -grad
    except (FactorizationError, ValueError, FloatingPointError, np.linalg.LinAlgError):
        return bad


def optimize_hyperparameters(
    config: KernelConfig,
    dataset: Dataset,
    restarts: int = 5,
    seed: int = 0,
) -> KernelConfig:
    """Maximize the log marginal likelihood over log hyperparameters.

    Runs L-BFGS-B from ``config`` and from ``restarts - 1`` seeded log-uniform
    draws, keeping the best result.  Falls back to ``config`` (with a warning)
    if nothing improves on it.
    """
    if len(dataset) < 2:
        raise ValueError("hyperparameter fitting needs at least two data points")
    X, Y = dataset.X, dataset.Y
    d = dataset.input_dim
    x0 = np.concatenate(
        [
            [np.log(config.signal_variance)],
            np.log(config.lengthscales),
            [np.log(config.noise_variance)],
        ]
    )
    rng = np.random.default_rng(seed)
    starts = [x0]
    for _ in range(max(0, restarts - 1)):
        starts.append(rng.uniform(np.log(1e-3), np.log(1e2), size=x0.size))

    # generous but finite box: keeps irrelevant-feature lengthscales from
    # running off to overflow while leaving them effectively infinite
    bounds = [(np.log(1e-8), np.log(1e8))] * x0.size
    best_x, best_nll = None, np.inf
    for start in starts:
        try:
            res = optimize.minimize(
                _nll_and_grad,
                np.clip(start, np.log(1e-8), np.log(1e8)),
                args=(X, Y),
                jac=True,
                method="L-BFGS-B",
                bounds=bounds,
            )
        except (np.linalg.LinAlgError, FloatingPointError):
            continue
        if np.all(np.isfinite(res.x)) and res.fun < best_nll:
            best_x, best_nll = res.x, float(res.fun)

    init_nll, _ = _nll_and_grad(x0, X, Y)
    if best_x is None or best_nll > init_nll:
        warnings.warn("hyperparameter optimization did not improve on the initial config")
        return config
    return KernelConfig(
        signal_variance=float(np.exp(best_x[0])),
        lengthscales=np.exp(best_x[1 : 1 + d]),
        noise_variance=float(np.exp(best_x[1 + d])),
    )

"""Penalized local objectives and their consensus decomposition.

Each agent owns a decision vector laid out as ``[all inputs u | all states z |
all GP-output means ybar]`` over the horizon, a convex quadratic stage cost,
affine equality/inequality constraints, and GP equality channels tying each
``ybar`` entry to the posterior mean at a (possibly nonlinear) regressor built
from the same decision vector.  The exact local objective is

    f_i(x) = J_i(x) - gamma * sum_c H_c(x)
             + tau * (sum |mu| + sum |h|) + lam * sum max(0, g)

with ``mu`` the GP-mean residuals and ``H_c`` the joint-posterior entropy of
channel ``c`` over the horizon regressors.

Coupling lives only in per-neighborhood shared objectives: a convex quadratic
over the sorted stack of neighbor vectors.  By construction there is no slot
for constraints on shared variables — couplings are soft, which is what makes
the splitting steps exact.  Selection maps extract one agent's block out of a
neighbor's stacked copy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gp import GpModel, entropy_logdet

__all__ = [
    "VariableLayout",
    "QuadraticFunction",
    "AffineMap",
    "AffineRegressor",
    "GpChannel",
    "AgentProblem",
    "SharedObjective",
    "Graph",
    "SelectionMap",
    "ConsensusProblem",
    "build_consensus",
    "EvaluationError",
]


class EvaluationError(RuntimeError):
    """A term of the penalized objective came back non-finite."""

    def __init__(self, term: str, agent_id=None):
        self.term = term
        self.agent_id = agent_id
        where = f" (agent {agent_id})" if agent_id is not None else ""
        super().__init__(f"non-finite value in term '{term}'{where}")


@dataclass(frozen=True)
class VariableLayout:
    """Flat ordering ``[u_0..u_{H-1} | z_0..z_{H-1} | ybar_0..ybar_{H-1}]``."""

    horizon: int
    n_u: int
    n_z: int = 0
    n_y: int = 0

    def __post_init__(self):
        if self.horizon < 1 or self.n_u < 0 or self.n_z < 0 or self.n_y < 0:
            raise ValueError("layout sizes must be nonnegative with horizon >= 1")
        if self.n_u + self.n_z + self.n_y == 0:
            raise ValueError("layout has no variables")

    @property
    def dim(self) -> int:
        return self.horizon * (self.n_u + self.n_z + self.n_y)

    def u_slice(self, k: int) -> slice:
        return slice(k * self.n_u, (k + 1) * self.n_u)

    def z_slice(self, k: int) -> slice:
        base = self.horizon * self.n_u
        return slice(base + k * self.n_z, base + (k + 1) * self.n_z)

    def ybar_slice(self, k: int) -> slice:
        base = self.horizon * (self.n_u + self.n_z)
        return slice(base + k * self.n_y, base + (k + 1) * self.n_y)

    def ybar_index(self, k: int, channel: int) -> int:
        if not 0 <= channel < self.n_y:
            raise ValueError(f"channel {channel} out of range")
        return self.horizon * (self.n_u + self.n_z) + k * self.n_y + channel

    def pack(self, U, Z=None, Ybar=None) -> np.ndarray:
        x = np.empty(self.dim)
        U = np.asarray(U, dtype=float).reshape(self.horizon, self.n_u)
        for k in range(self.horizon):
            x[self.u_slice(k)] = U[k]
        if self.n_z:
            Z = np.asarray(Z, dtype=float).reshape(self.horizon, self.n_z)
            for k in range(self.horizon):
                x[self.z_slice(k)] = Z[k]
        if self.n_y:
            Ybar = np.asarray(Ybar, dtype=float).reshape(self.horizon, self.n_y)
            for k in range(self.horizon):
                x[self.ybar_slice(k)] = Ybar[k]
        return x

    def unpack(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        U = np.stack([x[self.u_slice(k)] for k in range(self.horizon)])
        Z = (
            np.stack([x[self.z_slice(k)] for k in range(self.horizon)])
            if self.n_z
            else np.zeros((self.horizon, 0))
        )
        Y = (
            np.stack([x[self.ybar_slice(k)] for k in range(self.horizon)])
            if self.n_y
            else np.zeros((self.horizon, 0))
        )
        return U, Z, Y


@dataclass(frozen=True)
class QuadraticFunction:
    """``0.5 x'Qx + q'x + c`` with PSD ``Q`` (validated, symmetrized)."""

    Q: np.ndarray
    q: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        q = np.asarray(self.q, dtype=float).ravel()
        if Q.shape != (q.size, q.size):
            raise ValueError(f"Q shape {Q.shape} does not match q size {q.size}")
        Q = 0.5 * (Q + Q.T)
        scale = max(1.0, float(np.max(np.abs(Q))))
        if q.size and float(np.min(np.linalg.eigvalsh(Q))) < -1e-8 * scale:
            raise ValueError("Q must be positive semidefinite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "q", q)

    @property
    def dim(self) -> int:
        return self.q.size

    def value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.Q @ x + self.q @ x + self.c)

    def gradient(self, x) -> np.ndarray:
        return self.Q @ np.asarray(x, dtype=float) + self.q

    @staticmethod
    def zero(dim: int) -> "QuadraticFunction":
        return QuadraticFunction(np.zeros((dim, dim)), np.zeros(dim))


@dataclass(frozen=True)
class AffineMap:
    """Rows of ``A x + b``; an empty map has zero rows."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.asarray(self.b, dtype=float).ravel()
        if A.shape[0] != b.size:
            raise ValueError("A and b row counts differ")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def rows(self) -> int:
        return self.b.size

    def value(self, x) -> np.ndarray:
        if self.rows == 0:
            return np.zeros(0)
        return self.A @ np.asarray(x, dtype=float) + self.b

    @staticmethod
    def empty(dim: int) -> "AffineMap":
        return AffineMap(np.zeros((0, dim)), np.zeros(0))


@dataclass(frozen=True)
class AffineRegressor:
    """GP regressor that is an affine read-out of the decision vector."""

    A: np.ndarray
    b: np.ndarray

    def value(self, x: np.ndarray) -> np.ndarray:
        return self.A @ x + self.b

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return self.A


@dataclass(frozen=True)
class GpChannel:
    """One GP output channel over the horizon.

    ``regressors[k]`` builds the model input for step ``k`` from the decision
    vector (exposing ``value`` and ``jacobian``), and ``ybar_indices[k]`` says
    which decision entry carries the channel's predicted mean at step ``k``.
    """

    model: GpModel
    regressors: tuple
    ybar_indices: tuple

    def __post_init__(self):
        object.__setattr__(self, "regressors", tuple(self.regressors))
        object.__setattr__(self, "ybar_indices", tuple(int(i) for i in self.ybar_indices))
        if len(self.regressors) != len(self.ybar_indices) or not self.regressors:
            raise ValueError("regressors and ybar_indices must align and be non-empty")

    @property
    def horizon(self) -> int:
        return len(self.regressors)

    def horizon_inputs(self, x: np.ndarray) -> np.ndarray:
        return np.stack([reg.value(x) for reg in self.regressors])

    def residuals(self, x: np.ndarray) -> np.ndarray:
        """GP-mean equality residuals ``ybar_k - mean(regressor_k)``.

        Means are evaluated one step at a time so plan vectors rolled out
        through the same single-query path zero these residuals exactly
        (a batched kernel product rounds differently).
        """
        means = np.array([self.model.predict_mean(reg.value(x)) for reg in self.regressors])
        return x[list(self.ybar_indices)] - means

    def entropy(self, x: np.ndarray) -> float:
        return entropy_logdet(self.model.joint_posterior(self.horizon_inputs(x)))


@dataclass(frozen=True)
class AgentProblem:
    """One agent's exact penalized optimal-control problem."""

    agent_id: int
    layout: VariableLayout
    objective: QuadraticFunction
    channels: tuple = ()
    eq_affine: AffineMap = None
    ineq_affine: AffineMap = None
    gamma: float = 0.0
    tau: float = 1e3
    lam: float = 1e3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.eq_affine is None:
            object.__setattr__(self, "eq_affine", AffineMap.empty(self.layout.dim))
        if self.ineq_affine is None:
            object.__setattr__(self, "ineq_affine", AffineMap.empty(self.layout.dim))
        n = self.layout.dim
        if self.objective.dim != n:
            raise ValueError("objective dimension does not match layout")
        if self.eq_affine.rows and self.eq_affine.A.shape[1] != n:
            raise ValueError("equality map dimension does not match layout")
        if self.ineq_affine.rows and self.ineq_affine.A.shape[1] != n:
            raise ValueError("inequality map dimension does not match layout")
        for ch in self.channels:
            if ch.horizon != self.layout.horizon:
                raise ValueError("channel horizon does not match layout")
        if self.tau <= 0 or self.lam <= 0:
            raise ValueError("penalty weights must be positive")
        if self.gamma < 0:
            raise ValueError("entropy weight must be nonnegative")

    @property
    def dim(self) -> int:
        return self.layout.dim

    def smooth_objective(self, x: np.ndarray) -> float:
        """``J_i - gamma * sum_c H_c`` (no penalty terms)."""
        val = self.objective.value(x)
        if not np.isfinite(val):
            raise EvaluationError("objective", self.agent_id)
        if self.gamma > 0.0:
            for ch in self.channels:
                ent = ch.entropy(x)
                if not np.isfinite(ent):
                    raise EvaluationError("entropy", self.agent_id)
                val -= self.gamma * ent
        return val

    def penalty(self, x: np.ndarray) -> float:
        """Exact-penalty part: ``tau*(sum|mu| + sum|h|) + lam*sum max(0, g)``."""
        acc = 0.0
        for ch in self.channels:
            r = ch.residuals(x)
            if not np.all(np.isfinite(r)):
                raise EvaluationError("gp residual", self.agent_id)
            acc += self.tau * float(np.sum(np.abs(r)))
        h = self.eq_affine.value(x)
        g = self.ineq_affine.value(x)
        if not (np.all(np.isfinite(h)) and np.all(np.isfinite(g))):
            raise EvaluationError("affine constraint", self.agent_id)
        acc += self.tau * float(np.sum(np.abs(h)))
        acc += self.lam * float(np.sum(np.maximum(0.0, g)))
        return acc

    def penalized_objective(self, x: np.ndarray) -> float:
        """The exact local objective ``f_i(x)``."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"x has shape {x.shape}, expected ({self.dim},)")
        return self.smooth_objective(x) + self.penalty(x)


@dataclass(frozen=True)
class Graph:
    """Undirected communication graph over integer agent ids."""

    nodes: tuple
    edges: frozenset

    @staticmethod
    def from_edges(nodes, edges) -> "Graph":
        nodes = tuple(sorted(int(v) for v in nodes))
        norm = set()
        for a, b in edges:
            a, b = int(a), int(b)
            if a == b:
                raise ValueError(f"self-loop on node {a}")
            if a not in nodes or b not in nodes:
                raise ValueError(f"edge ({a},{b}) references unknown node")
            norm.add((min(a, b), max(a, b)))
        return Graph(nodes, frozenset(norm))

    @staticmethod
    def chain(n: int) -> "Graph":
        return Graph.from_edges(range(n), [(i, i + 1) for i in range(n - 1)])

    def is_edge(self, a: int, b: int) -> bool:
        return (min(a, b), max(a, b)) in self.edges

    def neighborhood(self, i: int):
        """Closed neighborhood ``{i} union adj(i)``, sorted ascending."""
        if i not in self.nodes:
            raise ValueError(f"unknown node {i}")
        out = {i}
        for a, b in self.edges:
            if a == i:
                out.add(b)
            elif b == i:
                out.add(a)
        return tuple(sorted(out))


@dataclass(frozen=True)
class SharedObjective:
    """Convex quadratic coupling over the owner's stacked neighborhood vector.

    ``references`` lists the agent ids the quadratic actually couples; all of
    them must lie inside the owner's neighborhood.  There is deliberately no
    constraint slot here.
    """

    owner: int
    quad: QuadraticFunction
    references: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "references", tuple(int(r) for r in self.references))

    def value(self, z: np.ndarray) -> float:
        return self.quad.value(z)

    def gradient(self, z: np.ndarray) -> np.ndarray:
        return self.quad.gradient(z)

    @property
    def Q(self) -> np.ndarray:
        return self.quad.Q

    @property
    def q(self) -> np.ndarray:
        return self.quad.q


@dataclass(frozen=True)
class SelectionMap:
    """0/1 row-selection ``F``: picks one agent's block out of a stacked vector."""

    start: int
    stop: int
    in_dim: int

    def apply(self, stacked: np.ndarray) -> np.ndarray:
        stacked = np.asarray(stacked)
        if stacked.shape[-1] != self.in_dim:
            raise ValueError(f"stacked vector has dim {stacked.shape[-1]}, expected {self.in_dim}")
        return stacked[..., self.start : self.stop]

    @property
    def matrix(self) -> np.ndarray:
        F = np.zeros((self.stop - self.start, self.in_dim))
        F[np.arange(self.stop - self.start), np.arange(self.start, self.stop)] = 1.0
        return F


class ConsensusProblem:
    """Agents, shared couplings and the graph, with stacking bookkeeping.

    The stacked vector of neighborhood ``N_i`` concatenates the member blocks
    sorted by agent id.  ``selection(i, j)`` returns ``F_ij`` with
    ``F_ij @ stack_j == x_i``.
    """

    def __init__(self, agents: dict, shared: dict, graph: Graph):
        self.agents = agents
        self.shared = shared
        self.graph = graph
        self._offsets = {}
        for i in graph.nodes:
            off, acc = {}, 0
            for j in graph.neighborhood(i):
                off[j] = acc
                acc += agents[j].dim
            self._offsets[i] = off

    @property
    def agent_ids(self):
        return self.graph.nodes

    def dim(self, i: int) -> int:
        return self.agents[i].dim

    def stack_dim(self, i: int) -> int:
        return sum(self.agents[j].dim for j in self.graph.neighborhood(i))

    def block_slice(self, i: int, j: int) -> slice:
        """Slice of agent ``j``'s block inside the stack of neighborhood ``N_i``."""
        start = self._offsets[i][j]
        return slice(start, start + self.agents[j].dim)

    def selection(self, i: int, j: int) -> SelectionMap:
        """``F_ij`` extracting agent ``i``'s block from the stack of ``N_j``."""
        sl = self.block_slice(j, i)
        return SelectionMap(sl.start, sl.stop, self.stack_dim(j))

    def assemble_stack(self, i: int, blocks: dict) -> np.ndarray:
        """Concatenate ``blocks[j]`` for ``j in N_i`` in stacking order."""
        members = self.graph.neighborhood(i)
        missing = [j for j in members if j not in blocks]
        if missing:
            raise ValueError(f"missing blocks for agents {missing}")
        return np.concatenate([np.asarray(blocks[j], dtype=float) for j in members])

    def shared_value(self, i: int, z: np.ndarray) -> float:
        return self.shared[i].value(z) if i in self.shared else 0.0


def build_consensus(agents, shared, graph: Graph) -> ConsensusProblem:
    """Validate and assemble a consensus problem.

    Parameters
    ----------
    agents : iterable of AgentProblem
    shared : iterable of SharedObjective (at most one per owner)
    graph : Graph
    """
    by_id = {a.agent_id: a for a in agents}
    if set(by_id) != set(graph.nodes):
        raise ValueError(
            f"agent ids {sorted(by_id)} do not match graph nodes {list(graph.nodes)}"
        )
    shared_by_owner = {}
    for s in shared:
        if s.owner not in by_id:
            raise ValueError(f"shared objective owner {s.owner} is not an agent")
        if s.owner in shared_by_owner:
            raise ValueError(f"duplicate shared objective for owner {s.owner}")
        hood = graph.neighborhood(s.owner)
        outside = [r for r in s.references if r not in hood]
        if outside:
            raise ValueError(
                f"shared objective of agent {s.owner} references non-neighbors {outside}"
            )
        expect = sum(by_id[j].dim for j in hood)
        if s.quad.dim != expect:
            raise ValueError(
                f"shared objective of agent {s.owner} has dim {s.quad.dim}, expected {expect}"
            )
        shared_by_owner[s.owner] = s
    return ConsensusProblem(by_id, shared_by_owner, graph)

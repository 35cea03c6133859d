"""Tests for penalized local objectives and the consensus decomposition."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpdmpc.gp import Dataset, KernelConfig, fit_gp
from gpdmpc.problem import (
    AffineMap,
    AffineRegressor,
    AgentProblem,
    EvaluationError,
    GpChannel,
    Graph,
    QuadraticFunction,
    SharedObjective,
    VariableLayout,
    build_consensus,
)


def _toy_model(seed=0, d=2, n=8):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, d))
    Y = np.tanh(X @ np.ones(d))
    return fit_gp(KernelConfig(1.0, np.full(d, 0.8), 0.05), Dataset(X, Y))


def _quad_agent(agent_id, n, seed=None, gamma=0.0):
    rng = np.random.default_rng(0 if seed is None else seed)
    M = rng.standard_normal((n, n))
    return AgentProblem(
        agent_id=agent_id,
        layout=VariableLayout(horizon=1, n_u=n),
        objective=QuadraticFunction(M @ M.T, rng.standard_normal(n)),
        gamma=gamma,
    )


# ---------------------------------------------------------------------------
# layout


def test_layout_slices_partition_the_vector():
    lay = VariableLayout(horizon=3, n_u=2, n_z=4, n_y=3)
    assert lay.dim == 27
    seen = np.zeros(lay.dim, dtype=int)
    for k in range(3):
        for sl in (lay.u_slice(k), lay.z_slice(k), lay.ybar_slice(k)):
            seen[sl] += 1
    assert np.all(seen == 1)
    assert lay.ybar_index(1, 2) == 3 * (2 + 4) + 1 * 3 + 2


@given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 3), st.integers(0, 2))
@settings(max_examples=40, deadline=None)
def test_layout_pack_unpack_roundtrip(h, nu, nz, ny):
    lay = VariableLayout(h, nu, nz, ny)
    rng = np.random.default_rng(h * 100 + nu * 10 + nz + ny)
    U = rng.standard_normal((h, nu))
    Z = rng.standard_normal((h, nz))
    Y = rng.standard_normal((h, ny))
    x = lay.pack(U, Z if nz else None, Y if ny else None)
    U2, Z2, Y2 = lay.unpack(x)
    assert np.array_equal(U, U2)
    if nz:
        assert np.array_equal(Z, Z2)
    if ny:
        assert np.array_equal(Y, Y2)


# ---------------------------------------------------------------------------
# building blocks


def test_quadratic_function_value_and_gradient():
    Q = np.array([[2.0, 0.0], [0.0, 4.0]])
    f = QuadraticFunction(Q, np.array([1.0, -1.0]), c=3.0)
    x = np.array([2.0, 1.0])
    # by hand: 0.5*(2*4 + 4*1) + (2 - 1) + 3 = 6 + 1 + 3
    assert f.value(x) == pytest.approx(10.0)
    assert np.allclose(f.gradient(x), Q @ x + f.q)


def test_quadratic_function_rejects_indefinite():
    with pytest.raises(ValueError):
        QuadraticFunction(np.array([[1.0, 0.0], [0.0, -1.0]]), np.zeros(2))


def test_gp_channel_residual_zero_when_ybar_matches_mean():
    model = _toy_model()
    lay = VariableLayout(horizon=2, n_u=2, n_y=1)
    # regressor reads the step's input block directly
    regs = [AffineRegressor(np.eye(lay.dim)[lay.u_slice(k), :], np.zeros(2)) for k in range(2)]
    ch = GpChannel(model, regs, [lay.ybar_index(k, 0) for k in range(2)])
    x = np.zeros(lay.dim)
    x[lay.u_slice(0)] = [0.3, -0.2]
    x[lay.u_slice(1)] = [-0.5, 0.1]
    # residuals use the single-query mean path, so fill ybar the same way
    for k in range(2):
        x[lay.ybar_index(k, 0)] = model.predict_mean(regs[k].value(x))
    assert np.array_equal(ch.residuals(x), np.zeros(2))


# ---------------------------------------------------------------------------
# penalized objective


def test_penalized_equals_quadratic_when_feasible():
    agent = _quad_agent(0, 3)
    x = np.array([0.2, -0.1, 0.4])
    assert agent.penalized_objective(x) == pytest.approx(agent.objective.value(x), rel=1e-14)


def test_penalized_adds_hinge_violation():
    n = 2
    agent = AgentProblem(
        agent_id=0,
        layout=VariableLayout(1, n),
        objective=QuadraticFunction.zero(n),
        ineq_affine=AffineMap(np.array([[1.0, 0.0]]), np.array([-1.0])),  # x1 - 1 <= 0
        lam=1e3,
    )
    assert agent.penalized_objective(np.array([2.0, 0.0])) == pytest.approx(1e3 * 1.0)
    assert agent.penalized_objective(np.array([0.5, 0.0])) == 0.0


def test_penalized_adds_equality_absolute_value():
    n = 2
    agent = AgentProblem(
        agent_id=0,
        layout=VariableLayout(1, n),
        objective=QuadraticFunction.zero(n),
        eq_affine=AffineMap(np.array([[1.0, -1.0]]), np.array([0.0])),
        tau=10.0,
    )
    assert agent.penalized_objective(np.array([1.0, -0.5])) == pytest.approx(15.0)


def test_penalty_dominance_over_smooth_part():
    # penalized >= J - gamma*H everywhere, equality exactly on the feasible set
    model = _toy_model(seed=4)
    lay = VariableLayout(horizon=2, n_u=2, n_y=1)
    regs = [AffineRegressor(np.eye(lay.dim)[lay.u_slice(k), :], np.zeros(2)) for k in range(2)]
    ch = GpChannel(model, regs, [lay.ybar_index(k, 0) for k in range(2)])
    agent = AgentProblem(
        agent_id=0,
        layout=lay,
        objective=QuadraticFunction(np.eye(lay.dim), np.zeros(lay.dim)),
        channels=(ch,),
        gamma=0.5,
        tau=50.0,
    )
    rng = np.random.default_rng(8)
    for _ in range(20):
        x = rng.uniform(-1, 1, size=lay.dim)
        diff = agent.penalized_objective(x) - agent.smooth_objective(x)
        assert diff >= -1e-12
    # make it feasible: set ybar to the means
    x = rng.uniform(-1, 1, size=lay.dim)
    means = model.predict_mean(ch.horizon_inputs(x))
    x[lay.ybar_index(0, 0)] = means[0]
    x[lay.ybar_index(1, 0)] = means[1]
    assert agent.penalized_objective(x) == pytest.approx(agent.smooth_objective(x), rel=1e-14)


def test_entropy_term_matches_direct_recomposition():
    model = _toy_model(seed=5)
    lay = VariableLayout(horizon=3, n_u=2, n_y=1)
    regs = [AffineRegressor(np.eye(lay.dim)[lay.u_slice(k), :], np.zeros(2)) for k in range(3)]
    ch = GpChannel(model, regs, [lay.ybar_index(k, 0) for k in range(3)])
    agent = AgentProblem(
        agent_id=1,
        layout=lay,
        objective=QuadraticFunction(np.eye(lay.dim), np.zeros(lay.dim)),
        channels=(ch,),
        gamma=2.0,
    )
    x = np.random.default_rng(10).uniform(-1, 1, size=lay.dim)
    expected = agent.objective.value(x) - 2.0 * ch.entropy(x)
    assert agent.smooth_objective(x) == pytest.approx(expected, rel=1e-12)


def test_penalized_raises_on_nonfinite():
    agent = _quad_agent(0, 2)
    with pytest.raises(EvaluationError) as err:
        agent.penalized_objective(np.array([np.nan, 0.0]))
    assert err.value.term == "objective"


def test_penalized_rejects_wrong_shape():
    agent = _quad_agent(0, 2)
    with pytest.raises(ValueError):
        agent.penalized_objective(np.zeros(3))


# ---------------------------------------------------------------------------
# graph + consensus


def test_chain_graph_neighborhoods():
    g = Graph.chain(3)
    assert g.neighborhood(0) == (0, 1)
    assert g.neighborhood(1) == (0, 1, 2)
    assert g.neighborhood(2) == (1, 2)
    assert g.is_edge(0, 1) and g.is_edge(1, 0) and not g.is_edge(0, 2)


def test_graph_rejects_self_loops_and_unknown_nodes():
    with pytest.raises(ValueError):
        Graph.from_edges([0, 1], [(0, 0)])
    with pytest.raises(ValueError):
        Graph.from_edges([0, 1], [(0, 2)])
    with pytest.raises(ValueError):
        Graph.chain(3).neighborhood(7)


def _three_chain(dims=(2, 3, 2)):
    g = Graph.chain(3)
    agents = [_quad_agent(i, n, seed=i) for i, n in enumerate(dims)]
    return agents, g


def test_build_consensus_stacking_and_selection():
    agents, g = _three_chain()
    prob = build_consensus(agents, [], g)
    assert prob.stack_dim(1) == 7
    rng = np.random.default_rng(3)
    blocks = {i: rng.standard_normal(prob.dim(i)) for i in range(3)}
    stack1 = prob.assemble_stack(1, blocks)
    # stacking order is sorted by id: [x0 | x1 | x2]
    assert np.array_equal(stack1[:2], blocks[0])
    assert np.array_equal(stack1[2:5], blocks[1])
    assert np.array_equal(stack1[5:], blocks[2])
    # selection maps agree with explicit 0/1 matrix multiplication
    for i in (0, 1, 2):
        F = prob.selection(i, 1)  # pick x_i out of stack of N_1
        assert np.array_equal(F.apply(stack1), blocks[i])
        assert np.allclose(F.matrix @ stack1, blocks[i])


def test_selection_identity_for_isolated_agent():
    g = Graph.from_edges([0], [])
    prob = build_consensus([_quad_agent(0, 3)], [], g)
    F = prob.selection(0, 0)
    v = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(F.apply(v), v)
    assert np.array_equal(F.matrix, np.eye(3))


def test_build_consensus_validates_shared_objectives():
    agents, g = _three_chain()
    ok = SharedObjective(0, QuadraticFunction.zero(5), references=(0, 1))
    build_consensus(agents, [ok], g)
    with pytest.raises(ValueError):  # references non-neighbor
        build_consensus(agents, [SharedObjective(0, QuadraticFunction.zero(5), (0, 2))], g)
    with pytest.raises(ValueError):  # wrong stacked dimension
        build_consensus(agents, [SharedObjective(0, QuadraticFunction.zero(4), (0, 1))], g)
    with pytest.raises(ValueError):  # duplicate owner
        build_consensus(agents, [ok, ok], g)
    with pytest.raises(ValueError):  # ids do not cover graph nodes
        build_consensus(agents[:2], [], g)


def test_shared_value_defaults_to_zero():
    agents, g = _three_chain()
    prob = build_consensus(agents, [], g)
    assert prob.shared_value(1, np.ones(7)) == 0.0

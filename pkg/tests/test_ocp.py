import numpy as np
import pytest

from schloegl.actuation import FeedbackConfig
from schloegl.dynamics import ClosedLoop, ReactionParams, RecordOptions, TargetSpec, simulate
from schloegl.errors import ConfigurationError
from schloegl.ocp import (ControlSignal, ObservationQ, OcpProblem, OptimizerOptions,
                          clamp_project, cost, dpp_gap, forward, receding_horizon,
                          reduced_gradient, solve_adjoint, solve_ocp, stationarity_residual)

P = ReactionParams((-1.0, 0.0, 2.0))


def problem(desk, z0=None, s1=1.0, target=None, C_u=30.0, dt=1e-3, **kw):
    grid, ops, fam, Q, z = desk
    return OcpProblem(grid, ops, fam, P, Q, z if z0 is None else z0, 0.0, s1, dt, target, C_u, **kw)


def test_observation_projection_properties(desk, rng):
    grid, ops, fam, Q, _ = desk
    for _ in range(20):
        a, b = rng.standard_normal(grid.n_nodes), rng.standard_normal(grid.n_nodes)
        qa = Q.apply(a)
        np.testing.assert_allclose(Q.apply(qa), qa, atol=1e-10 * np.abs(qa).max())
        assert ops.inner(qa, b) == pytest.approx(ops.inner(a, Q.apply(b)), abs=1e-10)
        assert ops.inner(qa, qa) <= ops.inner(a, a) + 1e-10
        assert Q.norm_sq(a) == pytest.approx(ops.inner(qa, qa), rel=1e-10)


def test_identity_observation(desk, rng):
    grid, ops, *_ = desk
    Q = ObservationQ(ops, mode="identity")
    z = rng.standard_normal(grid.n_nodes)
    assert Q.norm_sq(z) == pytest.approx(ops.inner(z, z))
    with pytest.raises(ConfigurationError):
        ObservationQ(ops, mode="spectral")


def test_cost_examples(desk):
    grid, ops, fam, Q, _ = desk
    n = grid.n_nodes
    dt = 1e-2
    assert cost(np.zeros((101, n)), np.zeros((100, 4)), Q, dt) == (0.0, 0.0, 0.0)
    J, Js, Jc = cost(np.ones((101, n)), np.zeros((100, 4)), Q, dt)
    assert J == pytest.approx(0.5, rel=1e-12) and Jc == 0.0
    u = np.tile([1.0, 0, 0, 0], (200, 1))
    assert cost(np.zeros((201, n)), u, Q, dt)[0] == pytest.approx(1.0, rel=1e-12)
    with pytest.raises(ConfigurationError):
        cost(np.zeros((10, n)), np.zeros((10, 4)), Q, dt)


def test_clamp_examples():
    np.testing.assert_array_equal(clamp_project([40.0, -20, 0, 5], 30.0), [30.0, -20, 0, 5])
    v = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(clamp_project(v, 30.0), v)
    np.testing.assert_array_equal(clamp_project(v * 1e8, np.inf), v * 1e8)
    np.testing.assert_allclose(np.linalg.norm(clamp_project([30.0, 40.0], 5.0, "l2")), 5.0)
    rows = clamp_project(np.array([[40.0, 0], [1.0, 2.0]]), 30.0)
    np.testing.assert_array_equal(rows, [[30.0, 0], [1.0, 2.0]])


def test_control_signal(desk):
    u = ControlSignal(np.ones((10, 4)), 0.1, bound=0.5)
    assert u.norm() == pytest.approx(2.0)
    assert not u.is_feasible()
    with pytest.raises(ConfigurationError):
        ControlSignal(np.ones(4), 0.1)


def test_problem_validation(desk):
    grid, ops, fam, Q, z0 = desk
    for kw in ({"s1": 0.0}, {"C_u": 0.0}, {"state_weight": 0.0}):
        with pytest.raises(ConfigurationError):
            problem(desk, **kw)
    with pytest.raises(ConfigurationError):
        problem(desk, z0=np.full(grid.n_nodes, np.nan))


def test_adjoint_trivial_cases(desk):
    grid, *_ = desk
    pb = problem(desk, z0=np.zeros(grid.n_nodes), s1=0.2)
    u = pb.zero_control()
    Z = forward(u, pb)
    P_ = solve_adjoint(Z, pb)
    assert np.all(Z == 0) and np.all(P_ == 0)
    g, _, _ = reduced_gradient(u, pb)
    assert np.all(g == 0)
    P_ = solve_adjoint(forward(u, problem(desk, s1=0.2)), problem(desk, s1=0.2))
    assert np.all(P_[-1] == 0.0)


@pytest.mark.parametrize("target", [None, TargetSpec.separable_sin_cos()])
def test_gradient_matches_central_differences(desk, target):
    pb = problem(desk, s1=0.3, target=target)
    rng = np.random.default_rng(7)
    u = clamp_project(rng.uniform(-10, 10, (pb.n_steps, 4)), pb.C_u)
    g, _, _ = reduced_gradient(u, pb)
    eps = 1e-4
    for _ in range(3):
        d = rng.standard_normal(u.shape)
        jp = cost(forward(u + eps * d, pb), u + eps * d, pb.Q, pb.dt)[0]
        jm = cost(forward(u - eps * d, pb), u - eps * d, pb.Q, pb.dt)[0]
        fd = (jp - jm) / (2 * eps)
        assert pb.dt * np.sum(g * d) == pytest.approx(fd, rel=1e-6)


def test_gradient_with_state_weight(desk):
    pb = problem(desk, s1=0.2, state_weight=50.0)
    rng = np.random.default_rng(3)
    u = rng.standard_normal((pb.n_steps, 4))
    g, _, _ = reduced_gradient(u, pb)
    d = rng.standard_normal(u.shape)
    eps = 1e-4
    J = [cost(forward(u + s * eps * d, pb), u + s * eps * d, pb.Q, pb.dt, 50.0)[0] for s in (1, -1)]
    assert pb.dt * np.sum(g * d) == pytest.approx((J[0] - J[1]) / (2 * eps), rel=1e-6)


def test_zero_initial_error_is_optimal_immediately(desk):
    grid, *_ = desk
    res = solve_ocp(problem(desk, z0=np.zeros(grid.n_nodes)))
    assert res.J == 0.0 and res.iterations == 1 and res.converged
    assert np.all(res.u.values == 0)


def test_solution_beats_feasible_incumbents(desk):
    grid, ops, fam, Q, z0 = desk
    pb = problem(desk, s1=0.5, state_weight=1000.0, C_u=15.0)
    res = solve_ocp(pb)
    assert res.converged
    assert res.u.is_feasible()
    assert np.abs(res.u.values).max() <= 15.0
    zero = pb.zero_control().values
    assert res.J <= cost(forward(zero, pb), zero, Q, pb.dt, 1000.0)[0]
    fb = simulate(grid, ops, z0, 0.5, pb.dt, ClosedLoop(P, None, fam, FeedbackConfig(0.1, 15.0)))
    u_fb = fb.controls[:-1]
    assert res.J <= cost(forward(u_fb, pb), u_fb, Q, pb.dt, 1000.0)[0]
    g, _, _ = reduced_gradient(res.u, pb)
    assert stationarity_residual(res.u, g, pb) <= pb.options.tol


def test_non_convergence_returns_best_iterate(desk):
    pb = problem(desk, s1=0.5, state_weight=1000.0, options=OptimizerOptions(max_iters=2))
    res = solve_ocp(pb)
    assert not res.converged and res.iterations == 2
    assert res.J == min(res.history)


def test_warm_start_shape_checked(desk):
    pb = problem(desk, s1=0.1)
    with pytest.raises(ConfigurationError):
        solve_ocp(pb, np.zeros((5, 4)))


def test_receding_horizon_bookkeeping(desk):
    grid, ops, fam, Q, z0 = desk
    template = problem(desk, s1=0.5, dt=1e-3)
    trace, reports = receding_horizon(z0, 1.0, 0.5, 0.25, template)
    assert [r.s0 for r in reports] == pytest.approx([0.0, 0.25, 0.5, 0.75])
    assert [r.s1 for r in reports] == pytest.approx([0.5, 0.75, 1.0, 1.25])
    assert trace.times[-1] == pytest.approx(1.0) and len(trace.times) == 1001
    assert np.abs(trace.controls).max() <= 30.0
    assert set(reports[0].to_dict()) >= {"window", "iterations", "J", "J_state", "J_control",
                                         "stationarity_residual", "wall_time"}


def test_receding_horizon_handoff_is_exact(desk):
    grid, ops, fam, Q, z0 = desk
    template = problem(desk, s1=0.25, state_weight=100.0)
    trace, reports = receding_horizon(z0, 0.5, 0.25, 0.25, template,
                                      record=RecordOptions(snapshot_every=0.25, observation=Q))
    first = solve_ocp(problem(desk, s1=0.25, state_weight=100.0))
    k = 250
    assert np.sqrt(ops.inner(first.Z[-1], first.Z[-1])) == pytest.approx(trace.norm_H[k], abs=1e-12)
    np.testing.assert_allclose(trace.snapshots[1], first.Z[-1], atol=1e-12)


def test_receding_horizon_requires_valid_step(desk):
    grid, ops, fam, Q, z0 = desk
    with pytest.raises(ConfigurationError):
        receding_horizon(z0, 1.0, 0.5, 0.75, problem(desk, s1=0.5))


def test_dpp_gap_trivial_and_bad_split(desk):
    grid, *_ = desk
    pb = problem(desk, z0=np.zeros(grid.n_nodes), s1=0.4)
    assert dpp_gap(pb, 0.2) == 0.0
    with pytest.raises(ConfigurationError):
        dpp_gap(pb, 0.4)


def test_tail_reoptimization_does_not_improve(desk):
    pb = problem(desk, s1=0.4, state_weight=1000.0)
    full = solve_ocp(pb)
    k = 200
    tail = solve_ocp(pb.restricted(0.2, full.Z[k]), full.u.values[k:])
    restricted_tail_cost = cost(full.Z[k:], full.u.values[k:], pb.Q, pb.dt, 1000.0)[0]
    assert tail.J <= restricted_tail_cost + 1e-8 * full.J
    assert restricted_tail_cost - tail.J <= 10 * pb.options.tol * full.J

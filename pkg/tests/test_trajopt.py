import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from mabo_dmpc import trajopt as to
from mabo_dmpc.errors import InputError
from mabo_dmpc.plants import WMRModel


def integrator(N=3, x0=0.0, q=1.0, r=1.0, **kw):
    dyn = to.LinearDynamics([[1.0]], [[1.0]])
    return to.OCPSpec(
        N, dyn, [x0],
        stage_terms=(to.QuadTerm([[q]], Ex=[[1.0]]), to.QuadTerm([[r]], Eu=[[1.0]])),
        terminal_terms=(to.QuadTerm([[q]], Ex=[[1.0]]),), **kw,
    )


def as_nonlinear(spec):
    lin = spec.dynamics
    dyn = to.NonlinearDynamics(lambda x, u: x @ lin.A.T + u @ lin.B.T, lin.nx, lin.nu)
    return to.OCPSpec(**{**spec.__dict__, "dynamics": dyn})


def test_integrator_at_origin():
    traj = to.solve_ocp(integrator(x0=0.0))
    assert np.allclose(traj.states, 0) and np.allclose(traj.controls, 0)
    assert traj.objective_value == pytest.approx(0.0, abs=1e-12)


def test_two_step_lq_matches_dense_kkt():
    # variables (x1, x2, u0, u1); x0 = 1 fixed
    # cost x0^2 + u0^2 + x1^2 + u1^2 + x2^2, dynamics x1 = x0 + u0, x2 = x1 + u1
    H = 2 * np.eye(4)
    q = np.zeros(4)
    A = np.array([[1.0, 0, -1.0, 0], [-1.0, 1.0, 0, -1.0]])
    b = np.array([1.0, 0.0])
    K = np.block([[H, A.T], [A, np.zeros((2, 2))]])
    sol = np.linalg.solve(K, np.concatenate([-q, b]))
    x1, x2, u0, u1 = sol[:4]
    traj = to.solve_ocp(integrator(N=2, x0=1.0))
    np.testing.assert_allclose(traj.controls.ravel(), [u0, u1], atol=1e-8)
    np.testing.assert_allclose(traj.states.ravel(), [1.0, x1, x2], atol=1e-8)
    assert traj.objective_value == pytest.approx(1 + u0 ** 2 + x1 ** 2 + u1 ** 2 + x2 ** 2, abs=1e-8)


def test_forced_violation_uses_slack():
    # x0 = 1, x <= 0.5 softened with weight 3, |u| <= 0.2: every stage violates the bound
    p, pf = 3.0, 5.0
    spec = integrator(
        N=2, x0=1.0,
        stage_ineq=to.Inequalities([[1.0]], [-0.5], [p]),
        terminal_ineq=to.Inequalities([[1.0]], [-0.5], [pf]),
        u_lower=[-0.2], u_upper=[0.2],
    )
    traj = to.solve_ocp(spec)

    def cost(u):
        x1 = 1.0 + u[0]
        x2 = x1 + u[1]
        s = [max(0, 1.0 - 0.5), max(0, x1 - 0.5)]
        return 1 + u[0] ** 2 + x1 ** 2 + u[1] ** 2 + x2 ** 2 + p * sum(s) + pf * max(0, x2 - 0.5)

    grid = np.linspace(-0.2, 0.2, 81)
    best = min((cost((a, b)), (a, b)) for a in grid for b in grid)
    ref = minimize(cost, best[1], method="Nelder-Mead", bounds=[(-0.2, 0.2)] * 2,
                   options=dict(xatol=1e-10, fatol=1e-12))
    assert traj.objective_value == pytest.approx(ref.fun, abs=1e-7)
    assert np.all(traj.slacks > 0) and traj.terminal_slacks[0] > 0
    np.testing.assert_allclose(traj.slacks.ravel(), traj.states[:2, 0] - 0.5, atol=1e-9)


def test_slack_zero_where_not_needed():
    spec = integrator(N=3, x0=0.2, stage_ineq=to.Inequalities([[1.0]], [-0.5], [10.0]))
    traj = to.solve_ocp(spec)
    assert np.all(traj.slacks <= 1e-12)


def test_evaluate_cost_zero():
    spec = to.OCPSpec(2, to.LinearDynamics([[1.0]], [[1.0]]), [0.0])
    traj = to.Trajectory(np.zeros((3, 1)), np.zeros((2, 1)), np.zeros((3, 0)), np.zeros((2, 0)),
                         np.zeros((2, 0)), np.zeros(0))
    assert to.evaluate_cost(spec, traj) == 0.0


def test_evaluate_cost_constant_stage():
    c, N = 2.5, 4
    spec = to.OCPSpec(N, to.LinearDynamics([[1.0]], [[1.0]]), [0.0],
                      stage_terms=(to.QuadTerm([[1.0]], e0=[np.sqrt(c)]),))
    traj = to.Trajectory(np.zeros((N + 1, 1)), np.zeros((N, 1)), np.zeros((N + 1, 0)), np.zeros((N, 0)),
                         np.zeros((N, 0)), np.zeros(0))
    assert to.evaluate_cost(spec, traj) == pytest.approx(N * c, abs=1e-12)


def test_evaluate_cost_manual_discounted_sum():
    g = 0.9
    spec = integrator(N=3, x0=1.0, q=2.0, r=0.5, discount=g, lin_x=np.array([[0.1], [0.2], [0.3], [0.4]]))
    xs = np.array([[1.0], [0.5], [-0.25], [0.75]])
    us = np.array([[-0.5], [-0.75], [1.0]])
    traj = to.Trajectory(xs, us, np.zeros((4, 0)), np.zeros((3, 0)), np.zeros((3, 0)), np.zeros(0))
    total = 0.0
    for l in range(3):
        total += g ** l * (2.0 * xs[l, 0] ** 2 + 0.5 * us[l, 0] ** 2 + spec.lin_x[l, 0] * xs[l, 0])
    total += g ** 3 * (2.0 * xs[3, 0] ** 2 + spec.lin_x[3, 0] * xs[3, 0])
    assert abs(to.evaluate_cost(spec, traj) - total) <= 1e-12


def test_evaluate_cost_dimension_check():
    spec = integrator(N=2)
    traj = to.Trajectory(np.zeros((2, 1)), np.zeros((2, 1)), np.zeros((3, 0)), np.zeros((2, 0)),
                         np.zeros((2, 0)), np.zeros(0))
    with pytest.raises(InputError):
        to.evaluate_cost(spec, traj)


def coupled_spec(seed, mode="free", nonlinear=False, N=5):
    rng = np.random.default_rng(seed)
    nx, nu, nw = 2, 1, 2
    A = np.eye(2) + 0.1 * rng.normal(size=(2, 2))
    B = rng.normal(size=(2, 1))
    dyn = to.LinearDynamics(A, B)
    terms = (
        to.QuadTerm(np.eye(2), Ex=np.eye(2), e0=-rng.normal(size=2)),
        to.QuadTerm([[0.3]], Eu=[[1.0]]),
        to.QuadTerm(2 * np.eye(2), Ex=np.eye(2), Ew=-np.eye(2), e0=rng.normal(size=2)),
    )
    kw = dict(
        stage_terms=terms, terminal_terms=(to.QuadTerm(np.eye(2), Ex=np.eye(2)),
                                           to.QuadTerm(np.eye(2), Ex=np.eye(2), Ew=-np.eye(2))),
        discount=0.95, nw=nw, coupling_mode=mode,
        stage_ineq=to.Inequalities([[1.0, 0.0]], [-0.3], [50.0]),
        u_lower=[-0.8], u_upper=[0.8],
        lin_x=0.1 * rng.normal(size=(N + 1, nx)), lin_w=0.1 * rng.normal(size=(N + 1, nw)),
    )
    if mode == "increment":
        kw.update(initial_coupling=rng.normal(size=nw), smoothing=np.eye(nw))
        kw["terminal_terms"] = kw["terminal_terms"] + (to.QuadTerm(np.eye(2), Ew=np.eye(2)),)
    spec = to.OCPSpec(N, dyn, rng.normal(size=nx), **kw)
    return as_nonlinear(spec) if nonlinear else spec


@pytest.mark.parametrize("mode", ["free", "increment"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_nonlinear_path_matches_linear_path(mode, seed):
    lin = to.solve_ocp(coupled_spec(seed, mode))
    nl = to.solve_ocp(coupled_spec(seed, mode, nonlinear=True))
    assert abs(lin.objective_value - nl.objective_value) <= 1e-7 * max(1.0, abs(lin.objective_value))


@pytest.mark.parametrize("mode", ["free", "increment"])
def test_recursions_hold(mode):
    spec = coupled_spec(4, mode)
    traj = to.solve_ocp(spec)
    xs = to.simulate(spec.dynamics, spec.initial_state, traj.controls)
    np.testing.assert_allclose(traj.states, xs, atol=1e-10)
    if mode == "increment":
        np.testing.assert_allclose(
            traj.couplings, to.propagate_couplings(spec.initial_coupling, traj.coupling_increments), atol=1e-12
        )
        assert np.array_equal(traj.couplings[0], spec.initial_coupling)
    assert np.all(traj.controls >= -0.8 - 1e-12) and np.all(traj.controls <= 0.8 + 1e-12)


@pytest.mark.parametrize("seed", [0, 3])
def test_objective_matches_evaluate_cost(seed):
    spec = coupled_spec(seed, "increment")
    traj = to.solve_ocp(spec)
    assert traj.objective_value == pytest.approx(to.evaluate_cost(spec, traj), rel=1e-10, abs=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_control_perturbation_never_improves(seed):
    spec = coupled_spec(seed, "increment")
    traj = to.solve_ocp(spec)
    base = traj.objective_value
    si = spec.stage_ineq
    for l in range(spec.horizon):
        for sgn in (1.0, -1.0):
            u = traj.controls.copy()
            u[l, 0] = np.clip(u[l, 0] + sgn * 1e-3, -0.8, 0.8)
            xs = to.simulate(spec.dynamics, spec.initial_state, u)
            s = np.maximum(np.array([si.evaluate(xs[k]) for k in range(spec.horizon)]), 0.0)
            pert = to.Trajectory(xs, u, traj.couplings, traj.coupling_increments, s, traj.terminal_slacks)
            assert to.evaluate_cost(spec, pert) >= base - 1e-6


def wmr_spec(target, N=15, R=0.01, guess=None):
    m = WMRModel(1.0, 0.1)
    dyn = to.NonlinearDynamics(m.step, 3, 2)
    sel = np.diag([1.0, 1.0, 0.0])
    return to.OCPSpec(
        N, dyn, np.zeros(3),
        stage_terms=(to.QuadTerm(sel, Ex=np.eye(3), e0=-np.array(target)), to.QuadTerm(R * np.eye(2), Eu=np.eye(2))),
        terminal_terms=(to.QuadTerm(5 * sel, Ex=np.eye(3), e0=-np.array(target)),),
        u_lower=[-1, -1], u_upper=[1, 1], initial_guess=guess,
    )


def test_wmr_sqp_reaches_stationary_point():
    spec = wmr_spec([1.0, 0.5, 0.0])
    traj = to.solve_ocp(spec)
    assert traj.iterations > 0
    xs = to.simulate(spec.dynamics, spec.initial_state, traj.controls)
    np.testing.assert_allclose(traj.states, xs, atol=1e-12)
    base = to.evaluate_cost(spec, traj)
    rng = np.random.default_rng(0)
    for _ in range(20):
        u = np.clip(traj.controls + 1e-3 * rng.normal(size=traj.controls.shape), -1, 1)
        xs = to.simulate(spec.dynamics, spec.initial_state, u)
        pert = to.Trajectory(xs, u, traj.couplings, traj.coupling_increments, traj.slacks, traj.terminal_slacks)
        assert to.evaluate_cost(spec, pert) >= base - 1e-6


def test_fd_jacobians_match_linear():
    spec = coupled_spec(5, nonlinear=True)
    xs = np.random.default_rng(1).normal(size=(4, 2))
    us = np.random.default_rng(2).normal(size=(4, 1))
    A, B = spec.dynamics.jacobians(xs, us)
    lin = coupled_spec(5).dynamics
    np.testing.assert_allclose(A, np.broadcast_to(lin.A, A.shape), atol=1e-8)
    np.testing.assert_allclose(B, np.broadcast_to(lin.B, B.shape), atol=1e-8)


def test_weighted_hessian_of_unicycle():
    m = WMRModel(1.0, 0.1)
    dyn = to.NonlinearDynamics(m.step, 3, 2)
    rng = np.random.default_rng(0)
    z = rng.normal(size=5)
    w = rng.normal(size=3)
    M = dyn.weighted_hessians(z[None, :3], z[None, 3:], w[None])[0]
    f = lambda v: w @ m.step(v[:3], v[3:])
    h = 1e-3
    E = np.eye(5) * h
    ref = np.array([[(f(z + E[i] + E[j]) - f(z + E[i] - E[j]) - f(z - E[i] + E[j]) + f(z - E[i] - E[j])) / (4 * h * h)
                     for j in range(5)] for i in range(5)])
    np.testing.assert_allclose(M, ref, atol=1e-5)


def test_spec_validation():
    dyn = to.LinearDynamics([[1.0]], [[1.0]])
    with pytest.raises(InputError):
        to.OCPSpec(0, dyn, [0.0])
    with pytest.raises(InputError):
        to.OCPSpec(2, dyn, [0.0], discount=0.0)
    with pytest.raises(InputError):
        to.OCPSpec(2, dyn, [0.0], coupling_mode="other")
    with pytest.raises(InputError):
        to.OCPSpec(2, dyn, [0.0], u_lower=[1.0], u_upper=[0.0])
    with pytest.raises(InputError):
        to.Inequalities([[1.0]], [0.0], [0.0])


def test_warm_resolve_with_new_duals_matches_cold():
    spec = coupled_spec(6, "increment")
    solver = to.OCPSolver(spec)
    solver.solve()
    lin_x = spec.lin_x + 0.05
    warm = solver.solve(lin_x=lin_x)
    cold = to.solve_ocp(spec.with_duals(lin_x=lin_x))
    assert warm.objective_value == pytest.approx(cold.objective_value, abs=1e-9)

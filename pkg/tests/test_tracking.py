import itertools
import math

import numpy as np
import pytest

from nnilqr.geometry import Waypoint, fit_cubic_spline
from nnilqr.ilqr import OcProblem, SolverConfig
from nnilqr.plants import GemPlant, WarthogPlant
from nnilqr.tracking import (
    GEM_WEIGHTS,
    WARTHOG_WEIGHTS,
    BicycleParams,
    ErrorState,
    GemControl,
    GemErrorDynamics,
    GemPlatform,
    GemState,
    MpcConfig,
    TrackingCost,
    TrackingWeights,
    WarthogControl,
    WarthogErrorDynamics,
    WarthogPlatform,
    WarthogState,
    build_tracking_problem,
    compute_error_state,
    final_cost,
    full_state_step,
    gamma_step,
    mpc_step,
    stage_cost,
    warthog_error_state,
    warthog_full_state_step,
    warthog_gamma_step,
)

DT = 1 / 30


class Hold:
    """Model that keeps (v, phi_dot) unchanged."""

    def step(self, x, u, t=0):
        return np.asarray(x, dtype=float).copy()


def straight(speed=5.0, length=200.0):
    return fit_cubic_spline([Waypoint(0, 0, speed), Waypoint(length / 2, 0, speed), Waypoint(length, 0, speed)])


def fd_linearize(dyn, x, u, eps=1e-6):
    fx = np.empty((x.size, x.size))
    fu = np.empty((x.size, u.size))
    for j in range(x.size):
        e = np.zeros(x.size)
        e[j] = eps
        fx[:, j] = (dyn.step(x + e, u) - dyn.step(x - e, u)) / (2 * eps)
    for j in range(u.size):
        e = np.zeros(u.size)
        e[j] = eps
        fu[:, j] = (dyn.step(x, u + e) - dyn.step(x, u - e)) / (2 * eps)
    return fx, fu


# -- full state and error state -----------------------------------------------------


def test_full_state_step_straight_ahead():
    s = full_state_step(GemState(0, 0, 0, 0, 3.0, 0), GemControl(0, 0, 0), Hold(), BicycleParams())
    assert s.x == pytest.approx(0.1, abs=1e-15)
    assert s.y == 0.0 and s.theta == 0.0 and s.v == 3.0


def test_full_state_step_turning_and_steering_clamp():
    p = BicycleParams()
    s = full_state_step(GemState(0, 0, 0, 0.2, 3.0, 0.0), np.zeros(3), Hold(), p)
    assert s.theta == pytest.approx(3.0 * math.tan(0.2) / 1.75 * DT, abs=1e-15)
    s = full_state_step(GemState(0, 0, 0, 0.59, 0.0, 1.0), np.zeros(3), Hold(), p)
    assert s.phi == 0.6


def test_error_state_on_straight_reference():
    ref = straight(speed=2.0)
    s = GemState(10.0, 0.5, 0.1, 0.05, 3.0, 0.2)
    prev = ErrorState(0, 0, 0, 0, 0, 0, 2.7, 0, 0)
    psi, proj = compute_error_state(s, ref, prev)
    assert proj.s_star == pytest.approx(10.0, abs=1e-9)
    assert psi.d_e == pytest.approx(0.5, abs=1e-9)
    assert psi.theta_e == pytest.approx(0.1, abs=1e-12)
    assert psi.v_e == pytest.approx(1.0, abs=1e-12)
    assert psi.d_e_dot == pytest.approx(3.0 * math.sin(0.1), abs=1e-12)
    assert psi.theta_e_dot == pytest.approx(3.0 * math.tan(0.05) / 1.75, abs=1e-12)
    assert psi.v_e_dot == pytest.approx(0.3 * 30, abs=1e-9)
    assert (psi.v, psi.phi_dot, psi.phi) == (3.0, 0.2, 0.05)


def test_error_state_without_history_has_zero_speed_rate():
    psi, _ = compute_error_state(GemState(5.0, 0.0, 0.0, 0.0, 4.0, 0.0), straight())
    assert psi.v_e_dot == 0.0 and psi.v_e == pytest.approx(-1.0)


def test_gamma_matches_full_state_on_straight_line():
    ref = straight(speed=5.0)
    model = GemPlant()
    p = BicycleParams()
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = GemState(rng.uniform(20, 80), rng.uniform(-1, 1), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3),
                     rng.uniform(2, 8), rng.uniform(-0.5, 0.5))
        u = np.array([rng.uniform(0, 1), rng.uniform(0, 0.2), rng.uniform(-1, 1)])
        psi, _ = compute_error_state(s, ref, None, p)
        pred = gamma_step(psi.as_array(), u, model, p, v_p=5.0)
        nxt, _ = compute_error_state(full_state_step(s, u, model, p), ref, psi, p)
        # cross-track, heading, steering and the propagated speed states agree exactly
        assert pred[0] == pytest.approx(nxt.d_e, abs=1e-9)
        assert pred[1] == pytest.approx(nxt.theta_e, abs=1e-12)
        assert pred[6] == pytest.approx(nxt.v, abs=1e-12)
        assert pred[7] == pytest.approx(nxt.phi_dot, abs=1e-12)
        assert pred[8] == pytest.approx(nxt.phi, abs=1e-12)
        # v_e advances with the previous speed rate (zero here): off by one step of acceleration
        assert abs(pred[2] - nxt.v_e) <= abs(nxt.v - s.v) + 1e-12


def test_gamma_example():
    psi = np.array([0.5, 0.1, 1.0, 0.2, 0.05, 3.0, 4.0, 0.1, 0.02])
    out = gamma_step(psi, np.zeros(3), Hold(), BicycleParams(), v_p=3.0)
    w = 1.0 + 3.0 * DT + 3.0
    a = 0.1 + 0.05 * DT
    b = 0.02 + 0.1 * DT
    expect = [0.5 + 0.2 * DT, a, 1.0 + 3.0 * DT, w * math.sin(a), w * math.tan(b) / 1.75, 0.0, 4.0, 0.1, b]
    assert np.allclose(out, expect, atol=1e-14)


def test_gem_error_dynamics_jacobians_match_finite_differences():
    dyn = GemErrorDynamics(GemPlant(), BicycleParams(), np.full(5, 4.0))
    rng = np.random.default_rng(1)
    X = np.column_stack([rng.uniform(-1, 1, (4, 6)), rng.uniform(2, 8, 4), rng.uniform(-0.5, 0.5, 4),
                         rng.uniform(-0.3, 0.3, 4)])
    U = np.column_stack([rng.uniform(0, 1, 4), rng.uniform(0, 0.1, 4), rng.uniform(-1, 1, 4)])
    fx, fu = dyn.linearize(X, U)
    for i in range(4):
        nx, nu = fd_linearize(dyn, X[i], U[i])
        assert np.max(np.abs(fx[i] - nx)) < 1e-5
        assert np.max(np.abs(fu[i] - nu)) < 1e-5
    assert np.allclose(dyn.step_batch(X, U), [dyn.step(x, u) for x, u in zip(X, U)], atol=1e-12)


# -- costs --------------------------------------------------------------------------


def test_stage_cost_example():
    psi = np.zeros(9)
    psi[0] = 0.5
    l, lx, lu, lxx, luu, lux = stage_cost(psi, [0.2, 0.0, 0.0], GEM_WEIGHTS)
    assert l == pytest.approx(25.0 + 0.002, abs=1e-12)
    assert lx[0] == pytest.approx(100.0) and np.all(lx[1:] == 0)
    assert lu[0] == pytest.approx(0.02)
    assert np.allclose(np.diag(lxx), 2 * GEM_WEIGHTS.a) and np.allclose(np.diag(luu), 2 * GEM_WEIGHTS.b)
    assert not lux.any()
    lf, gf, hf = final_cost(psi, GEM_WEIGHTS)
    assert lf == pytest.approx(25.0) and gf[0] == pytest.approx(100.0)


def test_cost_derivatives_match_finite_differences():
    rng = np.random.default_rng(2)
    cost = TrackingCost(GEM_WEIGHTS)
    x, u = rng.normal(size=9), rng.normal(size=3)
    _, lx, lu, *_ = stage_cost(x, u, GEM_WEIGHTS)
    eps = 1e-6
    for j in range(9):
        e = np.zeros(9)
        e[j] = eps
        assert (cost.stage(x + e, u) - cost.stage(x - e, u)) / (2 * eps) == pytest.approx(lx[j], abs=1e-6)
    for j in range(3):
        e = np.zeros(3)
        e[j] = eps
        assert (cost.stage(x, u + e) - cost.stage(x, u - e)) / (2 * eps) == pytest.approx(lu[j], abs=1e-6)
    X, U = rng.normal(size=(5, 9)), rng.normal(size=(4, 3))
    assert cost.stage_total(X, U) == pytest.approx(sum(cost.stage(X[i], U[i]) for i in range(4)), rel=1e-12)
    d = cost.stage_derivatives(X, U)
    assert np.allclose(d.lx[2], stage_cost(X[2], U[2], GEM_WEIGHTS)[1])


@pytest.mark.parametrize(
    "A, B",
    [
        ((1, 1, 1, 1, 1, 1, 1, 0, 0), (1, 1, 1)),  # copied-state weight must be zero
        ((-1, 1, 1, 1, 1, 1, 0, 0, 0), (1, 1, 1)),
        ((1, 1, 1, 1, 1, 1, 0, 0, 0), (1, float("nan"), 1)),
    ],
)
def test_weight_invariants(A, B):
    with pytest.raises(ValueError):
        TrackingWeights(A=A, B=B)


def test_control_and_config_invariants():
    with pytest.raises(ValueError):
        GemControl(1.2, 0.0, 0.0)
    with pytest.raises(ValueError):
        GemControl(0.0, 0.0, 1.5)
    with pytest.raises(ValueError):
        WarthogControl(5.0, 0.0)
    with pytest.raises(ValueError):
        MpcConfig(horizon=3)
    with pytest.raises(ValueError):
        MpcConfig(horizon=10, replan_every=10)


# -- problem assembly and MPC -------------------------------------------------------


def on_path_psi(v):
    return np.array([0, 0, 0, 0, 0, 0, v, 0, 0], dtype=float)


def test_build_tracking_problem_shapes():
    problem, U0 = build_tracking_problem(on_path_psi(5.0), 0.0, straight(), GemPlant(), GEM_WEIGHTS, MpcConfig())
    assert isinstance(problem, OcProblem)
    assert problem.horizon == 40 and U0.shape == (39, 3)
    assert np.all(U0 == 0)
    assert np.allclose(problem.dynamics.v_p, 5.0)


def test_warm_start_shifts_previous_controls():
    cfg = MpcConfig(horizon=10)
    ref = straight()
    _, sol = mpc_step(GemState(20, 0.3, 0, 0, 5.0, 0), ref, GemPlant(), config=cfg, s_hint=20.0)
    problem, U0 = build_tracking_problem(on_path_psi(5.0), 20.2, ref, GemPlant(), GEM_WEIGHTS, cfg, previous=sol)
    assert np.array_equal(U0[:-1], sol.trajectory.U[1:])
    assert np.array_equal(U0[-1], sol.trajectory.U[-1])
    _, U_cold = build_tracking_problem(
        on_path_psi(5.0), 20.2, ref, GemPlant(), GEM_WEIGHTS, MpcConfig(horizon=10, warm_start=False), previous=sol
    )
    assert not U_cold.any()


def test_perfect_tracking_is_cheap_and_does_not_steer():
    u, sol = mpc_step(GemState(50.0, 0.0, 0.0, 0.0, 5.0, 0.0), straight(), GemPlant(), s_hint=50.0)
    assert sol.cost < 0.5
    assert abs(u[2]) < 1e-6
    assert u[1] < 1e-3


def test_overspeed_brakes_and_beats_constant_control_grid():
    ref = straight(speed=5.0)
    state = GemState(50.0, 0.0, 0.0, 0.0, 8.0, 0.0)
    u, sol = mpc_step(state, ref, GemPlant(), s_hint=50.0)
    assert u[0] < 1e-6 and u[1] > 0.0
    psi, _ = compute_error_state(state, ref)
    problem, _ = build_tracking_problem(psi.as_array(), 50.0, ref, GemPlant(), GEM_WEIGHTS, MpcConfig())
    grid = np.linspace(0, 1, 11)
    best = min(
        problem.cost(problem.rollout(np.tile(c, (39, 1))), np.tile(c, (39, 1)))
        for c in itertools.product(grid, grid, [-0.5, 0.0, 0.5])
    )
    assert sol.cost <= best


def test_cross_track_offset_steers_back():
    # left of a straight path, heading along it: steer right (negative phi_dot)
    u, _ = mpc_step(GemState(50.0, 1.0, 0.0, 0.0, 5.0, 0.0), straight(), GemPlant(), s_hint=50.0)
    assert u[2] < 0.0


def test_warm_start_needs_no_more_iterations():
    ref = straight()
    cfg = MpcConfig(solver=SolverConfig(max_iterations=50, cost_tolerance=1e-6))
    plat = GemPlatform()
    s = GemState(50.0, 0.5, 0.05, 0.0, 5.0, 0.0)
    u, sol = mpc_step(s, ref, GemPlant(), config=cfg, s_hint=50.0)
    s2 = plat.advance(s, u, GemPlant())
    _, cold = mpc_step(s2, ref, GemPlant(), config=cfg, s_hint=50.0)
    _, warm = mpc_step(s2, ref, GemPlant(), config=cfg, s_hint=50.0, previous_solution=sol)
    assert warm.iterations <= cold.iterations
    assert warm.cost <= cold.cost * (1 + 1e-3)


# -- Warthog ------------------------------------------------------------------------


def test_warthog_full_state_and_error_state():
    s = warthog_full_state_step(WarthogState(0, 0, 0, 2.0, 0.5), np.zeros(2), Hold())
    assert s.x == pytest.approx(0.1) and s.theta == pytest.approx(0.025)
    psi, _ = warthog_error_state(WarthogState(10.0, -0.4, -0.2, 3.0, 0.1), straight(speed=2.5))
    assert psi.d_e == pytest.approx(-0.4, abs=1e-9)
    assert psi.theta_e == pytest.approx(-0.2, abs=1e-12)
    assert psi.v_e == pytest.approx(0.5, abs=1e-12)
    assert psi.d_e_dot == pytest.approx(3.0 * math.sin(-0.2), abs=1e-12)


def test_warthog_gamma_example():
    out = warthog_gamma_step(np.array([0.3, 0.1, 0.5, 0.2, 3.0, 0.4]), np.zeros(2), Hold(), 0.05, v_p=2.5)
    assert np.allclose(out, [0.31, 0.12, 0.5, 3.0 * math.sin(0.12), 3.0, 0.4], atol=1e-14)


def test_warthog_error_dynamics_jacobians_match_finite_differences():
    dyn = WarthogErrorDynamics(WarthogPlant(), 0.05, np.full(5, 2.0))
    rng = np.random.default_rng(3)
    for _ in range(4):
        x = np.concatenate([rng.uniform(-1, 1, 4), [rng.uniform(0.5, 3.5), rng.uniform(-1, 1)]])
        u = np.array([rng.uniform(0.5, 4.0), rng.uniform(-2, 2)])
        fx, fu = dyn.linearize(x[None], u[None])
        nx, nu = fd_linearize(dyn, x, u)
        assert np.max(np.abs(fx[0] - nx)) < 1e-5 and np.max(np.abs(fu[0] - nu)) < 1e-5


def test_warthog_mpc_slows_when_too_fast():
    ref = straight(speed=2.0)
    s = WarthogState(50.0, 0.0, 0.0, 3.5, 0.0)
    u, sol = mpc_step(s, ref, WarthogPlant(), WARTHOG_WEIGHTS, platform=WarthogPlatform(), s_hint=50.0)
    assert u[0] < 3.5
    assert abs(u[1]) < 1e-6
    assert np.all(sol.trajectory.U[:, 0] >= 0.0)


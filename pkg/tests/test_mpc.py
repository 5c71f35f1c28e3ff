"""QP solver and controller against dense-solve and clamped analytic oracles."""

import math

import numpy as np
import pytest

from koopmanip.koopman import KoopmanModel
from koopmanip.lifting import EncoderNetwork
from koopmanip.mpc import (
    CondensedMpc,
    MpcConfig,
    MpcController,
    QpProblem,
    build_qp,
    solve_qp,
)


def double_integrator(dt=0.01):
    enc = EncoderNetwork.create(input_dim=2, hidden=(), feature_dim=0, seed=0)
    A = np.array([[1.0, dt], [0.0, 1.0]])
    return KoopmanModel(variant="proposed", convention="momentum", n=1, m=1,
                        dt=dt, A=A, encoder=enc)


def random_box_qp(rng, d):
    Q = rng.normal(size=(d, d))
    evals = np.exp(rng.uniform(np.log(1e-1), np.log(1e2), size=d))
    V, _ = np.linalg.qr(Q)
    H = (V * evals) @ V.T
    H = 0.5 * (H + H.T)
    f = rng.normal(size=d) * 5
    lb = rng.uniform(-2, 0, size=d)
    ub = rng.uniform(0.1, 2, size=d)
    return QpProblem(H=H, f=f, lb=lb, ub=ub)


class TestSolveQp:
    def test_unconstrained_matches_dense_solve(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            d = rng.integers(2, 20)
            qp = random_box_qp(rng, d)
            qp = QpProblem(H=qp.H, f=qp.f, lb=-math.inf, ub=math.inf)
            sol = solve_qp(qp, tol=1e-10)
            expected = np.linalg.solve(qp.H, -qp.f)
            assert sol.status == "optimal"
            assert np.max(np.abs(sol.x - expected)) < 1e-6

    def test_clamped_scalar_analytic(self):
        # min 0.5 h x^2 + f x with optimum -f/h above the upper bound
        qp = QpProblem(H=[[2.0]], f=[-4.0], lb=[-1.0], ub=[0.5])
        sol = solve_qp(qp, tol=1e-10)
        assert sol.status == "optimal"
        assert sol.x[0] == 0.5                      # exactly at the bound
        assert sol.y_box[0] >= 0                    # active upper bound multiplier

    def test_zero_cost_feasible_origin(self):
        qp = QpProblem(H=np.zeros((3, 3)), f=np.zeros(3), lb=-1.0, ub=1.0)
        sol = solve_qp(qp, tol=1e-10)
        np.testing.assert_allclose(sol.x, 0.0, atol=1e-9)

    def test_random_boxed_suite_kkt(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            d = int(rng.integers(2, 40))
            qp = random_box_qp(rng, d)
            sol = solve_qp(qp, tol=1e-9)
            assert sol.status == "optimal"
            assert sol.primal_residual < 1e-6
            assert sol.dual_residual < 1e-6
            assert np.all(sol.x >= qp.lb) and np.all(sol.x <= qp.ub)

    def test_cost_monotone_up_to_tolerance(self):
        # non-increasing up to the concurrent KKT residual scale: transient
        # wiggles must vanish as the residuals vanish
        rng = np.random.default_rng(2)
        for _ in range(10):
            qp = random_box_qp(rng, int(rng.integers(4, 25)))
            sol = solve_qp(qp, tol=1e-10, record_costs=True)
            hist = np.array(sol.cost_history)
            costs, rp, rd = hist[:, 0], hist[:, 1], hist[:, 2]
            increases = np.diff(costs)
            allowed = (rp[:-1] + rd[:-1]) * (1.0 + np.abs(costs[:-1]))
            assert np.all(increases <= allowed + 1e-12)
            assert abs(costs[-1] - np.min(costs)) <= 1e-6 * (1 + abs(costs[-1]))

    def test_active_bounds_exact(self):
        rng = np.random.default_rng(3)
        qp = random_box_qp(rng, 15)
        qp = QpProblem(H=qp.H, f=qp.f - 50.0, lb=qp.lb, ub=qp.ub)  # push at bounds
        sol = solve_qp(qp, tol=1e-9)
        active = np.abs(sol.x - qp.ub) < 1e-7
        assert np.any(active)
        assert np.all(sol.x[active] == qp.ub[active])

    def test_infeasible_box_detected(self):
        qp = QpProblem.__new__(QpProblem)             # bypass ordered-bounds guard
        qp.H = np.eye(2)
        qp.f = np.zeros(2)
        qp.lb = np.array([1.0, 0.0])
        qp.ub = np.array([0.0, 1.0])
        qp.G = None
        qp.h = None
        sol = solve_qp(qp)
        assert sol.status == "infeasible"

    def test_infeasible_affine_detected(self):
        # x >= 0.5 via box, x <= -1 via affine row
        qp = QpProblem(H=[[1.0]], f=[0.0], lb=[0.5], ub=[2.0],
                       G=[[1.0]], h=[-1.0])
        sol = solve_qp(qp, max_iter=2000)
        assert sol.status == "infeasible"

    def test_max_iter_reports_inaccurate(self):
        rng = np.random.default_rng(4)
        qp = random_box_qp(rng, 20)
        sol = solve_qp(qp, tol=1e-12, max_iter=3)
        assert sol.status == "inaccurate"
        assert np.isfinite(sol.primal_residual) and np.isfinite(sol.dual_residual)

    def test_affine_rows_respected(self):
        # minimize distance to (2, 2) subject to x1 + x2 <= 1
        qp = QpProblem(H=2 * np.eye(2), f=[-4.0, -4.0], lb=-10.0, ub=10.0,
                       G=[[1.0, 1.0]], h=[1.0])
        sol = solve_qp(qp, tol=1e-10)
        assert sol.status == "optimal"
        np.testing.assert_allclose(sol.x, [0.5, 0.5], atol=1e-6)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        qp = random_box_qp(rng, 10)
        a = solve_qp(qp, tol=1e-9)
        b = solve_qp(qp, tol=1e-9)
        assert np.array_equal(a.x, b.x) and a.iterations == b.iterations


class TestBuildQp:
    def test_one_step_scalar_hand_arithmetic(self):
        dt = 0.1
        model = double_integrator(dt)
        cfg = MpcConfig(horizon=1, position_weight=3.0, momentum_weight=2.0,
                        input_weight=0.5)
        z0 = np.array([1.0, -1.0])
        ref = np.array([[0.5, 0.0]])
        d_hat = np.array([0.0, 0.2])
        qp = build_qp(model, z0, ref, d_hat, cfg)
        B = np.array([0.0, dt])
        Q = np.diag([3.0, 2.0])
        c = model.A @ z0 + d_hat * dt - ref[0]
        H_hand = 2.0 * (B @ Q @ B + 0.5)
        f_hand = 2.0 * (B @ Q @ c)
        assert qp.H.shape == (1, 1)
        assert abs(qp.H[0, 0] - H_hand) < 1e-12
        assert abs(qp.f[0] - f_hand) < 1e-12

    def test_zero_dhat_equals_plain_lq(self):
        model = double_integrator()
        cfg = MpcConfig(horizon=5)
        z0 = np.array([0.3, 0.1])
        refs = np.zeros((5, 2))
        qp0 = build_qp(model, z0, refs, np.zeros(2), cfg)
        sol = solve_qp(qp0, tol=1e-10)
        # dense LQ oracle: stack dynamics and solve the normal equations
        cond = CondensedMpc(model, cfg)
        Hh = cond.Gamma.T @ np.diag(cond.qdiag) @ cond.Gamma \
            + 0.01 / 2 * 2 * np.eye(5)
        rhs = -cond.Gamma.T @ (cond.qdiag * (cond.Phi @ z0))
        expected = np.linalg.solve(2 * Hh, 2 * rhs)
        np.testing.assert_allclose(sol.x, expected, atol=1e-7)

    def test_disturbance_enters_dynamics_not_input_offset(self):
        # compensation shifts the predicted state by Omega w, which maps
        # through Gamma^T Q, not by subtracting d from u directly
        model = double_integrator()
        cfg = MpcConfig(horizon=4)
        z0 = np.zeros(2)
        refs = np.zeros((4, 2))
        d = np.array([0.0, 1.0])
        qp = build_qp(model, z0, refs, d, cfg)
        cond = CondensedMpc(model, cfg)
        expected_f = 2.0 * cond.Gamma.T @ (cond.qdiag * (cond.Omega @ (d * model.dt)))
        np.testing.assert_allclose(qp.f, expected_f, atol=1e-14)
        assert not np.allclose(qp.f, 0.0)

    def test_unordered_bounds_rejected_at_build(self):
        model = double_integrator()
        cfg = MpcConfig(horizon=3, u_min=1.0, u_max=-1.0)
        with pytest.raises(ValueError):
            build_qp(model, np.zeros(2), np.zeros((3, 2)), np.zeros(2), cfg)

    def test_state_bounds_become_affine_rows(self):
        model = double_integrator()
        cfg = MpcConfig(horizon=3, x_min=np.array([-1.0, -math.inf]),
                        x_max=np.array([1.0, math.inf]))
        qp = build_qp(model, np.zeros(2), np.zeros((3, 2)), np.zeros(2), cfg)
        assert qp.G is not None
        assert qp.G.shape[0] == 6        # one upper + one lower row per step
        sol = solve_qp(qp, tol=1e-9)
        assert sol.status == "optimal"


def simulate_loop(model, controller, steps, g0=0.0, x0=(0.0, 0.0),
                  ref=np.zeros(2)):
    """Exact double-integrator plant qddot = u + g0; returns state/input logs."""
    dt = model.dt
    x = np.array(x0, dtype=float)
    xs, us = [x.copy()], []
    s = controller.cfg.horizon
    window = np.tile(ref, (s + 1, 1))
    for _ in range(steps):
        u = controller.step(x, window)
        a = u[0] + g0
        x = np.array([x[0] + dt * x[1] + 0.5 * dt * dt * a, x[1] + dt * a])
        xs.append(x.copy())
        us.append(u.copy())
    return np.array(xs), np.array(us)


class TestController:
    def test_rest_reference_no_forcing_u_zero(self):
        model = double_integrator()
        ctl = MpcController(model, MpcConfig(horizon=10), use_geso=True)
        xs, us = simulate_loop(model, ctl, 100)
        assert np.max(np.abs(us[-10:])) < 1e-8
        assert np.max(np.abs(xs[-1])) < 1e-8

    def test_constant_load_compensation_emerges(self):
        # plant qddot = u + g0; at the held reference u must settle at -g0
        model = double_integrator()
        g0 = 2.5
        ctl = MpcController(model, MpcConfig(horizon=20, terminal_scale=500.0),
                            k1=40.0, k2=800.0, use_geso=True)
        xs, us = simulate_loop(model, ctl, 400, g0=g0)
        settled = us[-100:, 0]
        assert np.max(np.abs(settled + g0)) / g0 < 0.02
        assert np.max(np.abs(xs[-50:, 0])) < 1e-3

    def test_geso_off_matches_manual_qp_loop(self):
        model = double_integrator()
        cfg = MpcConfig(horizon=6)
        ctl = MpcController(model, cfg, use_geso=False)
        xs, us = simulate_loop(model, ctl, 30, g0=0.7, x0=(0.4, 0.0))
        # replay: plain Koopman-MPC with d identically zero, no observer
        cond = CondensedMpc(model, cfg)
        x = np.array([0.4, 0.0])
        for k in range(30):
            qp = cond.make_qp(model.lift(x), np.zeros((6, 2)), np.zeros(2))
            warm = None
            if k > 0:
                warm = np.concatenate([prev[1:], prev[-1:]])
            sol = solve_qp(qp, tol=cfg.solver_tol, max_iter=cfg.max_iter,
                           warm_x=warm)
            prev = sol.x
            u = sol.x[0]
            np.testing.assert_allclose(us[k, 0], u, atol=1e-12)
            a = u + 0.7
            x = np.array([x[0] + 0.01 * x[1] + 0.5e-4 * a, x[1] + 0.01 * a])

    def test_input_bounds_always_respected(self):
        model = double_integrator()
        cfg = MpcConfig(horizon=8, u_min=-0.5, u_max=0.5)
        ctl = MpcController(model, cfg, use_geso=True)
        xs, us = simulate_loop(model, ctl, 200, g0=0.0, x0=(2.0, 0.0))
        assert np.all(us >= -0.5) and np.all(us <= 0.5)
        assert np.any(np.abs(us) > 0.49)        # saturates on the way

    def test_warm_start_reduces_iterations(self):
        model = double_integrator()
        ctl = MpcController(model, MpcConfig(horizon=15), use_geso=False)
        xs, us = simulate_loop(model, ctl, 40, x0=(1.0, 0.0))
        iters = [lg.solve_iters for lg in ctl.logs]
        assert np.mean(iters[20:]) <= np.mean(iters[:3])

    def test_log_csv_shape(self):
        model = double_integrator()
        ctl = MpcController(model, MpcConfig(horizon=4), use_geso=True)
        simulate_loop(model, ctl, 5)
        text = ctl.log_csv()
        lines = text.strip().split("\n")
        assert lines[0].startswith("t,q_ref1,q1,u1,d_hat1")
        assert len(lines) == 6

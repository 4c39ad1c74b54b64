import math

import numpy as np
import pytest

from ltvrobust.benchmarks import (
    RobotParams,
    Trajectory,
    build_uncertain_robot,
    close_loop_with_delta,
    finite_horizon_lqr,
    lti_benchmark,
    normalize_lti_gain,
    random_stable_lti,
    reference_trajectory,
    linearize_along_trajectory,
    robot_dynamics,
    sample_delta_validate,
    worst_delta_candidate,
)
from ltvrobust.ltv import (
    LtvSystem,
    MatrixSignal,
    TimeGrid,
    VectorSignal,
    simulate,
)
from ltvrobust.riccati import GainKind, bisect_gain, lifted_l2_gain_oracle


class TestLtiBenchmark:
    def test_matrix_entries(self):
        plant = lti_benchmark(10.0)
        assert plant.A.eval(0.0)[0, 0] == -0.8
        assert plant.D11.eval(0.0)[0, 0] == -0.3

    def test_dimensions(self):
        plant = lti_benchmark(1.0)
        assert (plant.n, plant.n_w, plant.n_d, plant.n_v, plant.n_e) == (4, 1, 1, 1, 1)

    def test_plant_is_hurwitz(self):
        plant = lti_benchmark(1.0)
        eigs = np.linalg.eigvals(plant.A.eval(0.0))
        assert np.max(eigs.real) < 0.0


class TestRobotDynamics:
    def test_derived_parameters(self):
        p = RobotParams()
        assert p.alpha == pytest.approx(0.4425)
        assert p.beta == pytest.approx(0.09)
        assert p.delta == pytest.approx(0.105)

    def test_rest_is_equilibrium(self):
        p = RobotParams()
        assert np.allclose(robot_dynamics(np.zeros(4), np.zeros(2), p), 0.0)

    def test_mass_matrix_at_straight_elbow(self):
        p = RobotParams()
        M = p.mass_matrix(0.0)
        assert np.allclose(M, [[0.6225, 0.195], [0.195, 0.105]])

    def test_energy_conservation_without_torque(self):
        from scipy.integrate import solve_ivp

        p = RobotParams()
        eta0 = np.array([0.3, 1.0, -0.4, -2.0])

        def rhs(t, eta):
            return robot_dynamics(eta, np.zeros(2), p)

        sol = solve_ivp(rhs, (0.0, 2.0), eta0, rtol=1e-11, atol=1e-13,
                        t_eval=np.linspace(0.0, 2.0, 21))

        def kinetic(eta):
            dq = np.array([eta[1], eta[3]])
            return 0.5 * dq @ p.mass_matrix(eta[2]) @ dq

        energies = [kinetic(sol.y[:, i]) for i in range(sol.y.shape[1])]
        assert np.max(np.abs(np.diff(energies))) < 1e-6 * energies[0]


class TestTrajectory:
    def test_boundary_conditions(self):
        traj = reference_trajectory()
        assert traj.eta[0] == pytest.approx([0.0, 0.0, math.pi / 4, 0.0])
        assert traj.eta[-1] == pytest.approx([math.pi / 2, 0.0, -math.pi / 4, 0.0],
                                             abs=1e-12)

    def test_rejects_inconsistent_rates(self):
        traj = reference_trajectory(n_points=101)
        bad_eta = traj.eta.copy()
        bad_eta[:, 1] += 1.0
        with pytest.raises(ValueError):
            Trajectory(traj.grid, bad_eta, traj.tau)

    def test_inverse_dynamics_consistency(self):
        # applying the stored torque reproduces the reference motion
        p = RobotParams()
        traj = reference_trajectory(p)
        from scipy.integrate import solve_ivp

        tau_sig = VectorSignal(traj.grid, traj.tau)

        def rhs(t, eta):
            return robot_dynamics(eta, tau_sig.eval(t), p)

        sol = solve_ivp(rhs, (0.0, traj.T), traj.eta[0], rtol=1e-10, atol=1e-12)
        assert np.max(np.abs(sol.y[:, -1] - traj.eta[-1])) < 1e-5


class TestLinearization:
    def test_input_jacobian_is_mass_matrix_inverse(self):
        p = RobotParams()
        traj = reference_trajectory(p)
        A, B = linearize_along_trajectory(traj, p, n_points=51)
        eta_sig = VectorSignal(traj.grid, traj.eta)
        for t in (0.0, 2.5, 5.0):
            th2 = eta_sig.eval(t)[2]
            Minv = np.linalg.inv(p.mass_matrix(th2))
            Bt = B.eval(t)
            assert np.max(np.abs(Bt[[1, 3], :] - Minv)) < 1e-6
            assert np.max(np.abs(Bt[[0, 2], :])) < 1e-9

    def test_stationary_trajectory_gives_constant_A(self):
        p = RobotParams()
        grid = TimeGrid.uniform(2.0, 51)
        eta = np.tile([0.2, 0.0, 0.4, 0.0], (51, 1))
        tau = np.zeros((51, 2))
        traj = Trajectory(grid, eta, tau)
        A, B = linearize_along_trajectory(traj, p, n_points=11)
        assert np.max(np.abs(A.samples - A.samples[0])) < 1e-9

    def test_jacobian_step_insensitivity(self):
        # halving the relative step changes the Jacobian at the 1e-6 level only
        from ltvrobust.benchmarks import _central_jacobian

        p = RobotParams()
        eta0 = np.array([0.3, 0.7, -0.2, 0.4])
        tau0 = np.array([0.5, -0.3])
        J1 = _central_jacobian(lambda e: robot_dynamics(e, tau0, p), eta0, 1e-6)
        J2 = _central_jacobian(lambda e: robot_dynamics(e, tau0, p), eta0, 5e-7)
        assert np.max(np.abs(J1 - J2)) < 1e-6 * (1.0 + np.max(np.abs(J1)))

    def test_first_order_prediction(self):
        # the LTV prediction error is quadratic in the perturbation size
        p = RobotParams()
        traj = reference_trajectory(p)
        A, B = linearize_along_trajectory(traj, p, n_points=200)
        from scipy.integrate import solve_ivp

        tau_sig = VectorSignal(traj.grid, traj.tau)
        direction = np.array([0.01, 0.0, -0.01, 0.02])

        def nonlin(delta):
            def rhs(t, eta):
                return robot_dynamics(eta, tau_sig.eval(t), p)

            sol = solve_ivp(rhs, (0.0, traj.T), traj.eta[0] + delta * direction,
                            rtol=1e-10, atol=1e-12)
            return sol.y[:, -1] - traj.eta[-1]

        def lin(delta):
            lin_sys = LtvSystem(A, B, MatrixSignal.constant(np.eye(4), traj.T),
                                MatrixSignal.constant(np.zeros((4, 2)), traj.T))
            d0 = VectorSignal.constant([0.0, 0.0], traj.T)
            x, _ = simulate(lin_sys, d0, delta * direction, rtol=1e-10, atol=1e-12)
            return x.eval(traj.T)

        errs = []
        for delta in (1.0, 0.5):
            errs.append(np.linalg.norm(nonlin(delta) - lin(delta)))
        ratio = errs[0] / errs[1]
        assert 3.0 < ratio < 5.0


class TestFiniteHorizonLqr:
    def test_scalar_closed_form(self):
        T = 1.0
        A = MatrixSignal.constant([[0.0]], T)
        B = MatrixSignal.constant([[1.0]], T)
        K = finite_horizon_lqr(A, B, np.eye(1), np.eye(1), F=np.zeros((1, 1)))
        assert K.eval(0.0)[0, 0] == pytest.approx(math.tanh(1.0), abs=1e-6)

    def test_terminal_weight_pins_final_state(self):
        T = 2.0
        A = MatrixSignal.constant([[0.0, 1.0], [0.0, 0.0]], T)
        B = MatrixSignal.constant([[0.0], [1.0]], T)
        norms = []
        for f in (1.0, 10.0, 100.0):
            K = finite_horizon_lqr(A, B, 0.01 * np.eye(2), np.eye(1), F=f * np.eye(2))
            grid = TimeGrid.uniform(T, 201)
            Acl = MatrixSignal(grid, np.stack([
                A.eval(t) - B.eval(t) @ K.eval(t) for t in grid.points]))
            cl = LtvSystem(Acl, MatrixSignal.constant(np.zeros((2, 1)), T),
                           MatrixSignal.constant(np.eye(2), T),
                           MatrixSignal.constant(np.zeros((2, 1)), T))
            d0 = VectorSignal.constant([0.0], T)
            x, _ = simulate(cl, d0, [1.0, 0.0], rtol=1e-9, atol=1e-12)
            norms.append(np.linalg.norm(x.eval(T)))
        assert norms[0] > norms[1] > norms[2]

    def test_rejects_bad_weights(self):
        T = 1.0
        A = MatrixSignal.constant([[0.0]], T)
        B = MatrixSignal.constant([[1.0]], T)
        with pytest.raises(ValueError):
            finite_horizon_lqr(A, B, np.eye(1), -np.eye(1))
        with pytest.raises(ValueError):
            finite_horizon_lqr(A, B, np.eye(1), np.eye(1), F=-np.eye(1))


class TestUncertainRobot:
    def _model(self):
        p = RobotParams()
        traj = reference_trajectory(p, n_points=201)
        A, B = linearize_along_trajectory(traj, p, n_points=50)
        K = finite_horizon_lqr(A, B, np.diag([100.0, 10, 100, 10]),
                               np.diag([0.1, 0.1]), F=np.diag([1.0, 0.1, 1, 0.1]))
        return A, B, K

    def test_dimensions(self):
        A, B, K = self._model()
        plant = build_uncertain_robot(A, B, K)
        assert (plant.n_w, plant.n_v, plant.n_d, plant.n_e) == (1, 1, 2, 2)

    def test_zero_delta_recovers_closed_loop(self):
        # evaluate at grid knots, where sampled matrix products are exact
        A, B, K = self._model()
        plant = build_uncertain_robot(A, B, K)
        zero_delta = (np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((1, 0)),
                      np.zeros((1, 1)))
        closed = close_loop_with_delta(plant, zero_delta)
        for t in closed.grid.points[::17]:
            expected = A.eval(t) - B.eval(t) @ K.eval(t)
            assert np.max(np.abs(closed.A.eval(t) - expected)) < 1e-9

    def test_full_negative_delta_scales_the_joint_path(self):
        A, B, K = self._model()
        plant = build_uncertain_robot(A, B, K)
        neg_delta = (np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((1, 0)),
                     -np.ones((1, 1)))
        closed = close_loop_with_delta(plant, neg_delta)
        t = closed.grid.points[len(closed.grid) // 3]
        At, Bt, Kt = A.eval(t), B.eval(t), K.eval(t)
        expected = At - Bt @ Kt + 0.8 * Bt[:, 1:2] @ Kt[1:2, :]
        assert np.max(np.abs(closed.A.eval(t) - expected)) < 1e-9


class TestDeltaSampling:
    def test_worst_delta_candidate_norm(self):
        ss = worst_delta_candidate()
        sys = LtvSystem(*(MatrixSignal.constant(M, 80.0) for M in ss))
        gain = lifted_l2_gain_oracle(sys, 2000)
        assert gain <= 1.0 + 1e-3
        assert gain >= 0.99

    def test_worst_delta_transfer_function(self):
        A, B, C, D = worst_delta_candidate()
        for s in (0.0, 1.0j, 10.0j):
            tf = (C @ np.linalg.solve(s * np.eye(2) - A, B) + D)[0, 0]
            ref = ((-0.7861 * s ** 2 - 3.383 * s - 3.631)
                   / (0.8 * s ** 2 + 3.414 * s + 3.631))
            assert abs(tf - ref) < 1e-10

    def test_normalized_random_blocks_are_admissible(self):
        rng = np.random.default_rng(0)
        for k in (0, 1, 3):
            ss = normalize_lti_gain(random_stable_lti(rng, k))
            sys = LtvSystem(*(MatrixSignal.constant(np.atleast_2d(M), 40.0)
                              for M in ss))
            assert lifted_l2_gain_oracle(sys, 1000) <= 1.0

    def test_sampling_report(self):
        p = RobotParams()
        traj = reference_trajectory(p, n_points=201)
        A, B = linearize_along_trajectory(traj, p, n_points=50)
        K = finite_horizon_lqr(A, B, np.diag([100.0, 10, 100, 10]),
                               np.diag([0.1, 0.1]), F=np.diag([1.0, 0.1, 1, 0.1]))
        plant = build_uncertain_robot(A, B, K)
        # small smoke run against a generous pseudo-bound
        report = sample_delta_validate(plant, gamma_robust=1.0,
                                       kind=GainKind.L2_TO_EUCLIDEAN,
                                       n_samples=3, seed=1,
                                       include_deltas=[worst_delta_candidate()])
        assert len(report.samples) == 4
        assert all(s.status == "ok" for s in report.samples)
        assert report.max_gain > 0.0
        jsonable = report.to_jsonable()
        assert jsonable["max_gain"] == report.max_gain

    def test_empty_report(self):
        plant = lti_benchmark(1.0)
        report = sample_delta_validate(plant, 1.0, GainKind.INDUCED_L2, n_samples=0)
        assert report.samples == []
        assert report.max_gain == 0.0
        assert report.all_below_bound

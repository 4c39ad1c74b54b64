"""Acceptance suite: every criterion at its stated tolerance, one line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
pass/fail lines.  The two benchmark studies are computed once per session and
shared across the criteria that consume them.
"""

import math
import time

import numpy as np
import pytest
from scipy.linalg import expm

from ltvrobust.benchmarks import (
    build_uncertain_robot,
    finite_horizon_lqr,
    linearize_along_trajectory,
    lti_benchmark,
    normalize_lti_gain,
    random_stable_lti,
    reference_trajectory,
    sample_delta_validate,
    worst_delta_candidate,
)
from ltvrobust.dlmi import assemble_robust_sdp, build_spline_basis, solve_robust_sdp, SdpStatus
from ltvrobust.iqc import empty_iqc, extend_system, iqc_integral, unit_norm_lti_iqc
from ltvrobust.iteration import IterationConfig, gain_vs_horizon, robust_gain_iterate
from ltvrobust.ltv import (
    LtvSystem,
    MatrixSignal,
    TimeGrid,
    VectorSignal,
    as_partitioned,
    l2_gain_cost,
    l2_norm,
    simulate,
)
from ltvrobust.riccati import (
    GainKind,
    bisect_gain,
    gramian_l2e_oracle,
    integrate_rde_backward,
    lifted_l2_gain_oracle,
    rdi_residual,
)
from ltvrobust.worst_case import (
    build_hamiltonian,
    transition_blocks,
    worst_case_disturbance,
)

HORIZONS = [1.0, 2.0, 5.0, 10.0, 20.0, 30.0, 40.0, 50.0, 100.0]


def report(criterion, passed, detail):
    print(f"\n[acceptance] criterion {criterion}: "
          f"{'PASS' if passed else 'FAIL'} ({detail})")


def random_ltv(rng, nx, nd, ne, T, n_pts=201, zero_feedthrough=True):
    """Genuinely time-varying stable system: a damped base matrix with a
    bounded sinusoidal modulation, sampled on a uniform grid."""
    grid = TimeGrid.uniform(T, n_pts)
    A0 = rng.standard_normal((nx, nx))
    A0 = A0 - (np.max(np.linalg.eigvals(A0).real) + 0.8) * np.eye(nx)
    A1 = 0.3 * rng.standard_normal((nx, nx))
    w = rng.uniform(0.5, 2.0)
    As = np.stack([A0 + np.sin(w * t) * A1 for t in grid.points])
    B0 = rng.standard_normal((nx, nd))
    B1 = 0.3 * rng.standard_normal((nx, nd))
    Bs = np.stack([B0 + np.cos(w * t) * B1 for t in grid.points])
    C0 = rng.standard_normal((ne, nx))
    Cs = np.stack([C0 * (1.0 + 0.2 * np.sin(0.7 * w * t)) for t in grid.points])
    D = np.zeros((ne, nd)) if zero_feedthrough else 0.2 * rng.standard_normal((ne, nd))
    return LtvSystem(
        MatrixSignal(grid, As), MatrixSignal(grid, Bs), MatrixSignal(grid, Cs),
        MatrixSignal.constant(D, T),
    )


@pytest.fixture(scope="session")
def lti_study():
    plant = lti_benchmark(HORIZONS[-1])
    iqc = unit_norm_lti_iqc(1, 10.0)
    t0 = time.perf_counter()
    table = gain_vs_horizon(plant, iqc, GainKind.INDUCED_L2, HORIZONS,
                            IterationConfig())
    return table, time.perf_counter() - t0


@pytest.fixture(scope="session")
def robot_study():
    traj = reference_trajectory()
    A, B = linearize_along_trajectory(traj)
    K = finite_horizon_lqr(A, B, np.diag([100.0, 10.0, 100.0, 10.0]),
                           np.diag([0.1, 0.1]), F=np.diag([1.0, 0.1, 1.0, 0.1]))
    closed = build_uncertain_robot(A, B, K)
    open_loop = build_uncertain_robot(A, B, None)
    iqc = unit_norm_lti_iqc(1, 10.0)
    t0 = time.perf_counter()
    res_cl = robust_gain_iterate(closed, iqc, GainKind.L2_TO_EUCLIDEAN,
                                 IterationConfig())
    res_ol = robust_gain_iterate(open_loop, iqc, GainKind.L2_TO_EUCLIDEAN,
                                 IterationConfig())
    validation = sample_delta_validate(closed, res_cl.gamma,
                                       GainKind.L2_TO_EUCLIDEAN, n_samples=100,
                                       seed=0, include_deltas=[worst_delta_candidate()])
    return res_cl, res_ol, validation, time.perf_counter() - t0


class TestCriterion1:
    def test_long_horizon_gain_near_reference(self, lti_study):
        table, elapsed = lti_study
        gamma_100 = dict((T, res.gamma) for T, res in table)[100.0]
        rel_err = abs(gamma_100 - 1.49) / 1.49
        passed = rel_err <= 0.05
        report(1, passed, f"gamma(T=100) = {gamma_100:.4f}, "
                          f"|rel err vs 1.49| = {rel_err:.3%}")
        assert passed


class TestCriterion2:
    def test_curve_nondecreasing_within_budget(self, lti_study):
        table, elapsed = lti_study
        gammas = [res.gamma for _, res in table]
        monotone = all(b >= a * (1.0 - 0.01) for a, b in zip(gammas, gammas[1:]))
        in_budget = elapsed <= 30 * 60
        passed = monotone and in_budget
        report(2, passed, "gammas = ["
               + ", ".join(f"{g:.4f}" for g in gammas)
               + f"], sweep took {elapsed:.0f}s (budget 1800s)")
        assert passed


class TestCriterion3:
    def test_each_horizon_converges_quickly(self, lti_study):
        table, _ = lti_study
        ok = True
        details = []
        for T, res in table:
            records = res.log.records
            last = records[-1]
            gap = abs(last.gamma_sdp - last.gamma_rde)
            conv = (res.log.termination == "converged"
                    and gap < 5e-3 * last.gamma_sdp and len(records) <= 5)
            details.append(f"T={T:g}: {len(records)} its")
            ok = ok and conv
        report(3, ok, "; ".join(details))
        assert ok


class TestCriterion4:
    def test_nominal_oracle_equivalence(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        worst_l2e = 0.0
        for _ in range(20):
            nx = int(rng.integers(1, 5))
            sys = random_ltv(rng, nx, int(rng.integers(1, 3)), int(rng.integers(1, 3)), 3.0)
            oracle = gramian_l2e_oracle(sys)
            bound = bisect_gain(sys, GainKind.L2_TO_EUCLIDEAN, rel_tol=2e-4)
            worst_l2e = max(worst_l2e, abs(bound.gamma - oracle) / oracle)
        worst_l2 = 0.0
        for _ in range(10):
            nx = int(rng.integers(1, 5))
            sys = random_ltv(rng, nx, 1, 1, 3.0)
            lifted = lifted_l2_gain_oracle(sys, 4000)
            bound = bisect_gain(sys, GainKind.INDUCED_L2, rel_tol=1e-4)
            worst_l2 = max(worst_l2, abs(bound.gamma - lifted) / lifted)
        elapsed = time.perf_counter() - t0
        passed = worst_l2e <= 1e-3 and worst_l2 <= 1e-2 and elapsed <= 300
        report(4, passed, f"max L2E dev = {worst_l2e:.2e} (tol 1e-3), "
                          f"max L2 dev = {worst_l2:.2e} (tol 1e-2), {elapsed:.0f}s")
        assert passed


class TestCriterion5:
    def test_sdp_consistency_with_rde(self):
        rng = np.random.default_rng(7)
        ok = True
        details = []
        for _ in range(5):
            nx = int(rng.integers(1, 4))
            T = 10.0
            grid = TimeGrid.uniform(T, 101)
            A0 = rng.standard_normal((nx, nx))
            A0 = A0 - (np.max(np.linalg.eigvals(A0).real) + 0.8) * np.eye(nx)
            sys = LtvSystem(
                MatrixSignal.constant(A0, T),
                MatrixSignal.constant(rng.standard_normal((nx, 1)), T),
                MatrixSignal.constant(rng.standard_normal((1, nx)), T),
                MatrixSignal.constant(np.zeros((1, 1)), T),
            )
            gamma_rde = bisect_gain(sys, GainKind.INDUCED_L2, rel_tol=1e-5).gamma
            filt, mparam = empty_iqc()
            ext = extend_system(as_partitioned(sys), filt)
            basis = build_spline_basis(np.linspace(0.0, T, 10))
            sdp = assemble_robust_sdp(ext, GainKind.INDUCED_L2, mparam, basis, [],
                                      np.linspace(0.0, T, 20))
            out = solve_robust_sdp(sdp)
            assert out.status is SdpStatus.OPTIMAL
            ratio = out.gamma / gamma_rde
            in_band = 1.0 <= ratio <= 1.05
            PT = out.storage_fn.eval(T)
            terminal_ok = float(np.min(np.linalg.eigvalsh(PT))) >= -1e-8
            margin = rdi_residual(out.storage_fn, l2_gain_cost(sys, out.gamma),
                                  sys.A, sys.B, TimeGrid(sdp.t_dlmi))
            margin_ok = margin <= -sdp.eps / 2
            ok = ok and in_band and terminal_ok and margin_ok
            details.append(f"ratio={ratio:.4f}")
        report(5, ok, ", ".join(details) + " (band [1, 1.05])")
        assert ok


class TestCriterion6:
    def test_appendix_machinery(self):
        rng = np.random.default_rng(31)
        # transition-block ratio vs backward RDE on random systems
        ratio_ok = True
        for _ in range(5):
            nx = int(rng.integers(1, 4))
            sys = random_ltv(rng, nx, 1, 1, 2.0, n_pts=101)
            gain = bisect_gain(sys, GainKind.INDUCED_L2, rel_tol=1e-4).gamma
            cost = l2_gain_cost(sys, 1.05 * gain)
            sol = integrate_rde_backward(sys.A, sys.B, cost, rtol=1e-10, atol=1e-13)
            ham = build_hamiltonian(sys.A, sys.B, cost)
            blocks = transition_blocks(ham, cost.F)
            for t in rng.uniform(0.0, 2.0, size=5):
                Y = sol.eval(t)
                dev = np.linalg.norm(blocks.riccati_ratio(t) - Y, "fro")
                ratio_ok = ratio_ok and dev <= 1e-5 * (1.0 + np.linalg.norm(Y, "fro"))

        # constant-Hamiltonian transition vs matrix exponential
        n = 3
        sysc = random_ltv(rng, n, 1, 1, 1.5, n_pts=2)
        A0 = MatrixSignal.constant(sysc.A.eval(0.0), 1.5)
        B0 = MatrixSignal.constant(sysc.B.eval(0.0), 1.5)
        C0 = MatrixSignal.constant(sysc.C.eval(0.0), 1.5)
        sysc = LtvSystem(A0, B0, C0, MatrixSignal.constant(np.zeros((1, 1)), 1.5))
        gain = bisect_gain(sysc, GainKind.INDUCED_L2, rel_tol=1e-4).gamma
        cost = l2_gain_cost(sysc, 1.1 * gain)
        ham = build_hamiltonian(sysc.A, sysc.B, cost)
        blocks = transition_blocks(ham, cost.F, rtol=1e-12, atol=1e-14)
        H0 = ham.eval(0.0)
        stack_T = np.vstack([np.eye(n), cost.F])
        expm_ok = True
        for t in (0.0, 0.4, 1.0):
            X1, X2 = blocks.eval(t)
            ref = expm(H0 * (t - 1.5)) @ stack_T
            expm_ok = expm_ok and np.max(np.abs(np.vstack([X1, X2]) - ref)) <= 1e-8

        # worst-case construction on scalar and two-state systems
        wc_ok = True
        cases = []
        scalar = LtvSystem(
            MatrixSignal.constant([[-1.0]], 5.0), MatrixSignal.constant([[1.0]], 5.0),
            MatrixSignal.constant([[1.0]], 5.0), MatrixSignal.constant([[0.0]], 5.0))
        cases.append((scalar, GainKind.INDUCED_L2))
        two_state = LtvSystem(
            MatrixSignal.constant([[-0.4, 1.0], [-1.0, -0.6]], 4.0),
            MatrixSignal.constant([[0.0], [1.0]], 4.0),
            MatrixSignal.constant([[1.0, 0.0]], 4.0),
            MatrixSignal.constant([[0.0]], 4.0))
        cases.append((two_state, GainKind.INDUCED_L2))
        cases.append((two_state, GainKind.L2_TO_EUCLIDEAN))
        wc_details = []
        for sys_case, kind in cases:
            gain = bisect_gain(sys_case, kind, rel_tol=1e-5).gamma
            gt = 0.999 * gain
            wc = worst_case_disturbance(sys_case, kind, gt)
            norm_sq = l2_norm(wc.d) ** 2
            this_ok = (wc.achieved_ratio >= 0.99 * gt
                       and abs(wc.cost_value) <= 1e-4 * norm_sq)
            wc_ok = wc_ok and this_ok
            wc_details.append(f"{wc.achieved_ratio / gt:.4f}")

        passed = ratio_ok and expm_ok and wc_ok
        report(6, passed, f"ratio-vs-RDE ok={ratio_ok}, expm ok={expm_ok}, "
                          f"worst-case ratios/target = {wc_details}")
        assert passed


class TestCriterion7:
    def test_robot_study(self, robot_study):
        res_cl, res_ol, validation, elapsed = robot_study
        separation = res_ol.gamma / res_cl.gamma
        a_ok = res_cl.certified and res_ol.certified and separation >= 10.0
        ok_samples = [s for s in validation.samples if s.status == "ok"]
        b_ok = (len(ok_samples) == 101
                and all(s.gain <= res_cl.gamma + 1e-6 for s in ok_samples))
        c_ok = validation.max_gain >= 0.5 * res_cl.gamma
        in_budget = elapsed <= 20 * 60
        passed = a_ok and b_ok and c_ok and in_budget
        report(7, passed,
               f"gamma_cl = {res_cl.gamma:.4g}, gamma_ol = {res_ol.gamma:.4g} "
               f"({separation:.0f}x), max sampled = {validation.max_gain:.4g} "
               f"({validation.max_gain / res_cl.gamma:.2f} of bound), "
               f"{len(ok_samples)} samples ok, {elapsed:.0f}s (budget 1200s)")
        assert passed


class TestCriterion8:
    def test_iqc_soundness_sampling(self):
        rng = np.random.default_rng(5150)
        filt, mparam = unit_norm_lti_iqc(1, 10.0)
        T = 8.0
        grid = TimeGrid.uniform(T, 801)
        worst = np.inf
        for _ in range(50):
            n_states = int(rng.integers(0, 7))
            Ad, Bd, Cd, Dd = normalize_lti_gain(random_stable_lti(rng, n_states))
            # band-limited excitation
            coef = rng.standard_normal(4)
            freqs = rng.uniform(0.2, 2.5, size=4)
            v_samples = sum(c * np.sin(f * grid.points + rng.uniform(0, 2 * np.pi))
                            for c, f in zip(coef, freqs))
            v = VectorSignal(grid, v_samples[:, None])
            if n_states == 0:
                w = VectorSignal(grid, v.samples * Dd[0, 0])
            else:
                delta_sys = LtvSystem(
                    MatrixSignal.constant(Ad, T), MatrixSignal.constant(Bd, T),
                    MatrixSignal.constant(Cd, T), MatrixSignal.constant(Dd, T))
                _, w = simulate(delta_sys, v, np.zeros(n_states),
                                rtol=1e-9, atol=1e-12)
            G = rng.standard_normal((2, 2))
            M = mparam.assemble({"M11": G.T @ G}, T)
            value = iqc_integral(filt, M, v, w)
            worst = min(worst, value / l2_norm(v) ** 2)
        passed = worst >= -1e-6
        report(8, passed, f"min scaled integral = {worst:.3e} (floor -1e-6)")
        assert passed

"""Bundled benchmark studies: a 4-state LTI plant with one uncertainty channel,
and a two-link robot arm tracking a finite-time trajectory under joint
uncertainty and torque disturbances.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .ltv import LtvSystem, MatrixSignal, PartitionedLtvSystem, TimeGrid
from .riccati import (
    GainKind,
    RdeStatus,
    bisect_gain,
    integrate_rde_backward,
    lifted_l2_gain_oracle,
)

__all__ = [
    "lti_benchmark",
    "RobotParams",
    "robot_dynamics",
    "Trajectory",
    "reference_trajectory",
    "linearize_along_trajectory",
    "finite_horizon_lqr",
    "build_uncertain_robot",
    "worst_delta_candidate",
    "random_stable_lti",
    "normalize_lti_gain",
    "close_loop_with_delta",
    "DeltaSample",
    "ValidationReport",
    "sample_delta_validate",
]


def lti_benchmark(horizon):
    """4-state LTI plant with one uncertainty channel (w, v), one disturbance,
    and one error output, posed on [0, horizon]."""
    A = np.array([
        [-0.8, -1.3, -2.1, -2.5],
        [2.0, -0.9, -8.4, 0.7],
        [2.0, 8.6, -0.5, 12.5],
        [2.1, -0.3, -12.6, -0.6],
    ])
    B = np.array([
        [-0.6, 1.0],
        [0.0, 0.2],
        [0.0, 0.4],
        [-1.3, -0.2],
    ])
    C = np.array([
        [-1.4, 0.0, 0.5, 0.0],
        [0.0, -0.1, 1.0, 0.0],
    ])
    D = np.array([
        [-0.3, 0.0],
        [0.0, 0.0],
    ])
    T = float(horizon)
    cs = lambda M: MatrixSignal.constant(M, T)
    return PartitionedLtvSystem(
        cs(A), cs(B[:, :1]), cs(B[:, 1:]),
        cs(C[:1]), cs(D[:1, :1]), cs(D[:1, 1:]),
        cs(C[1:]), cs(D[1:, :1]), cs(D[1:, 1:]),
    )


@dataclass(frozen=True)
class RobotParams:
    """Two-link arm parameters (masses, lengths, centers of mass, inertias)."""

    m1: float = 3.0
    m2: float = 2.0
    l1: float = 0.3
    l2: float = 0.3
    r1: float = 0.15
    r2: float = 0.15
    I1: float = 0.09
    I2: float = 0.06

    @property
    def alpha(self):
        return self.I1 + self.I2 + self.m1 * self.r1 ** 2 + self.m2 * (self.l1 ** 2 + self.r2 ** 2)

    @property
    def beta(self):
        return self.m2 * self.l1 * self.r2

    @property
    def delta(self):
        return self.I2 + self.m2 * self.r2 ** 2

    def mass_matrix(self, theta2):
        a, b, d = self.alpha, self.beta, self.delta
        c2 = math.cos(theta2)
        return np.array([[a + 2 * b * c2, d + b * c2],
                         [d + b * c2, d]])

    def coriolis_matrix(self, theta2, dtheta1, dtheta2):
        b = self.beta
        s2 = math.sin(theta2)
        return np.array([[-b * s2 * dtheta2, -b * s2 * (dtheta1 + dtheta2)],
                         [b * s2 * dtheta1, 0.0]])


def robot_dynamics(eta, tau, params):
    """State derivative of the gravity-free two-link arm.

    State eta = (theta1, dtheta1, theta2, dtheta2); input tau = joint torques.
    Solves the 2x2 mass-matrix system M(theta2) ddq + C(q, dq) dq = tau.
    """
    eta = np.asarray(eta, dtype=float)
    tau = np.asarray(tau, dtype=float)
    th2, dq = eta[2], np.array([eta[1], eta[3]])
    M = params.mass_matrix(th2)
    det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
    if det <= 1e-12:
        raise ValueError(f"singular mass matrix (det = {det:.3e})")
    C = params.coriolis_matrix(th2, eta[1], eta[3])
    ddq = np.linalg.solve(M, tau - C @ dq)
    return np.array([eta[1], ddq[0], eta[3], ddq[1]])


@dataclass(frozen=True)
class Trajectory:
    """Reference motion: state samples eta (theta1, dtheta1, theta2, dtheta2)
    and feedforward torques tau on a grid."""

    grid: TimeGrid
    eta: np.ndarray   # (N, 4)
    tau: np.ndarray   # (N, 2)

    def __post_init__(self):
        if self.eta.shape != (len(self.grid), 4) or self.tau.shape != (len(self.grid), 2):
            raise ValueError("trajectory sample shapes do not match the grid")
        # stored joint rates must be consistent with the angle samples
        pts = self.grid.points
        for col_angle, col_rate in ((0, 1), (2, 3)):
            fd = np.gradient(self.eta[:, col_angle], pts)
            err = np.max(np.abs(fd[1:-1] - self.eta[1:-1, col_rate]))
            h = float(np.max(np.diff(pts)))
            if err > 10.0 * h ** 2 * max(1.0, np.max(np.abs(self.eta[:, col_rate]))) + 1e-8:
                raise ValueError("joint rates inconsistent with angle samples")

    @property
    def T(self):
        return self.grid.T


def _quintic(s0, s1, T, t):
    """Minimum-jerk style quintic from s0 to s1 with zero boundary velocity
    and acceleration; returns (position, velocity, acceleration)."""
    x = t / T
    blend = 10 * x ** 3 - 15 * x ** 4 + 6 * x ** 5
    dblend = (30 * x ** 2 - 60 * x ** 3 + 30 * x ** 4) / T
    ddblend = (60 * x - 180 * x ** 2 + 120 * x ** 3) / T ** 2
    span = s1 - s0
    return s0 + span * blend, span * dblend, span * ddblend


def reference_trajectory(params=None, horizon=5.0, n_points=1001):
    """Synthetic reference: quintic joint motions theta1: 0 -> pi/2 and
    theta2: pi/4 -> -pi/4 with zero boundary rates, torque by inverse dynamics."""
    params = params or RobotParams()
    grid = TimeGrid.uniform(horizon, n_points)
    eta = np.empty((n_points, 4))
    tau = np.empty((n_points, 2))
    for i, t in enumerate(grid.points):
        th1, dth1, ddth1 = _quintic(0.0, math.pi / 2, horizon, t)
        th2, dth2, ddth2 = _quintic(math.pi / 4, -math.pi / 4, horizon, t)
        eta[i] = (th1, dth1, th2, dth2)
        M = params.mass_matrix(th2)
        C = params.coriolis_matrix(th2, dth1, dth2)
        tau[i] = M @ np.array([ddth1, ddth2]) + C @ np.array([dth1, dth2])
    return Trajectory(grid, eta, tau)


def _central_jacobian(fn, x0, rel_step=1e-6):
    x0 = np.asarray(x0, dtype=float)
    f0 = fn(x0)
    J = np.empty((f0.size, x0.size))
    for j in range(x0.size):
        h = rel_step * (1.0 + abs(x0[j]))
        xp, xm = x0.copy(), x0.copy()
        xp[j] += h
        xm[j] -= h
        J[:, j] = (fn(xp) - fn(xm)) / (2 * h)
    return J


def linearize_along_trajectory(traj, params=None, n_points=200, residual_tol=1e-4):
    """Jacobian linearization of the arm dynamics along a reference trajectory.

    Central-difference Jacobians with respect to state and torque are computed
    at ``n_points`` uniform times; the returned (A, B) signals interpolate
    linearly between them.  The trajectory must satisfy the dynamics: the
    residual between the sampled state rates and the dynamics is checked
    first.
    """
    params = params or RobotParams()
    eta_sig = MatrixSignal(traj.grid, traj.eta[:, :, None])
    tau_sig = MatrixSignal(traj.grid, traj.tau[:, :, None])

    # consistency: finite-difference rate of the stored states vs the dynamics
    pts = traj.grid.points
    rates = np.gradient(traj.eta, pts, axis=0)
    worst = 0.0
    for i in range(1, len(pts) - 1):
        worst = max(worst, float(np.max(np.abs(
            rates[i] - robot_dynamics(traj.eta[i], traj.tau[i], params)))))
    h = float(np.max(np.diff(pts)))
    if worst > residual_tol + 100.0 * h ** 2:
        raise ValueError(
            f"trajectory inconsistent with the dynamics (residual {worst:.2e})")

    grid = TimeGrid.uniform(traj.T, n_points)
    As, Bs = [], []
    for t in grid.points:
        eta0 = eta_sig.eval(t)[:, 0]
        tau0 = tau_sig.eval(t)[:, 0]
        As.append(_central_jacobian(lambda e: robot_dynamics(e, tau0, params), eta0))
        Bs.append(_central_jacobian(lambda u: robot_dynamics(eta0, u, params), tau0))
    return (MatrixSignal(grid, np.stack(As)), MatrixSignal(grid, np.stack(Bs)))


def finite_horizon_lqr(A, B, Q, R, S=None, F=None, *, ode_rtol=1e-8, ode_atol=1e-10):
    """Finite-horizon LQR gain K(t) = R^{-1}(B(t)ᵀP(t) + Sᵀ).

    The regulator cost (Q >= 0, R > 0, F >= 0 with terminal weight F) maps
    onto the backward Riccati machinery by negating all weights, whose
    solution is the negated value function: integrating with
    (-Q, -S, -R, -F) yields Y = -P.  The gain is sampled on B's grid.
    """
    from .ltv import QuadraticCost

    n = A.shape[0]
    m = B.shape[1]
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    S = np.zeros((n, m)) if S is None else np.asarray(S, dtype=float)
    F = np.zeros((n, n)) if F is None else np.asarray(F, dtype=float)
    if np.min(np.linalg.eigvalsh(0.5 * (R + R.T))) <= 0:
        raise ValueError("R must be positive definite")
    if np.min(np.linalg.eigvalsh(0.5 * (F + F.T))) < -1e-12:
        raise ValueError("F must be positive semidefinite")
    cost = QuadraticCost.constant(-Q, -S, -R, -F, A.T)
    sol = integrate_rde_backward(A, B, cost, rtol=ode_rtol, atol=ode_atol)
    if sol.status is not RdeStatus.CONVERGED:
        raise RuntimeError("regulator Riccati equation escaped; check the weights")
    Rinv = np.linalg.inv(R)
    # sample on the union of B's grid and the solver's own output times, so a
    # coarse (constant) B grid does not wash out the gain's time variation
    grid = TimeGrid(np.union1d(B.grid.points, sol.ts))
    Ks = []
    for t in grid.points:
        P = -sol.eval(t)
        Ks.append(Rinv @ (B.eval(t).T @ P + S.T))
    return MatrixSignal(grid, np.stack(Ks), B.interp)


_JOINT_UNCERTAINTY = 0.8   # overall uncertainty level at the elbow torque


def build_uncertain_robot(A, B, K=None):
    """Uncertain closed-loop arm: disturbances add to both joint torques, and
    an uncertainty taps the elbow (second) torque channel with sqrt(0.8)
    factors on each side so the loop uncertainty level is 0.8.  The error
    output collects the two joint angles.

    ``K = None`` gives the open loop (no feedback).
    """
    root = math.sqrt(_JOINT_UNCERTAINTY)
    grid = A.grid if K is None else A.grid.union(K.grid)
    A = A.resample(grid)
    B = B.resample(grid)
    if A.shape != (4, 4) or B.shape != (4, 2):
        raise ValueError("expected a 4-state, 2-torque arm model")
    C2 = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
    Acl, B1, C1 = [], [], []
    for i, t in enumerate(grid.points):
        At, Bt = A.samples[i], B.samples[i]
        Kt = np.zeros((2, 4)) if K is None else K.eval(t)
        Acl.append(At - Bt @ Kt)
        B1.append(root * Bt[:, 1:2])
        C1.append(-root * Kt[1:2, :])
    T = grid.T
    return PartitionedLtvSystem(
        MatrixSignal(grid, np.stack(Acl), A.interp),
        MatrixSignal(grid, np.stack(B1), A.interp),
        B,
        MatrixSignal(grid, np.stack(C1), A.interp),
        MatrixSignal.constant(np.zeros((1, 1)), T),
        MatrixSignal.constant(root * np.array([[0.0, 1.0]]), T),
        MatrixSignal.constant(C2, T),
        MatrixSignal.constant(np.zeros((2, 1)), T),
        MatrixSignal.constant(np.zeros((2, 2)), T),
    )


def worst_delta_candidate():
    """State space of the rational uncertainty
    (-0.7861 s^2 - 3.383 s - 3.631) / (0.8 s^2 + 3.414 s + 3.631),
    which has H-infinity norm exactly one (attained at DC)."""
    num = np.array([-0.7861, -3.383, -3.631]) / 0.8
    den = np.array([1.0, 3.414 / 0.8, 3.631 / 0.8])
    d = num[0]
    rem = num - d * den
    A = np.array([[0.0, 1.0], [-den[2], -den[1]]])
    B = np.array([[0.0], [1.0]])
    C = np.array([[rem[2], rem[1]]])
    D = np.array([[d]])
    return A, B, C, D


def random_stable_lti(rng, n_states, pole_range=(-10.0, -0.1)):
    """Random stable LTI block: poles drawn in the given band (complex pairs
    allowed), random input/output maps, un-normalized."""
    k = int(n_states)
    if k == 0:
        return (np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((1, 0)),
                rng.uniform(-1.0, 1.0, size=(1, 1)))
    blocks = []
    left = k
    while left > 0:
        if left >= 2 and rng.random() < 0.5:
            re = rng.uniform(*pole_range)
            im = rng.uniform(0.1, 10.0)
            blocks.append(np.array([[re, im], [-im, re]]))
            left -= 2
        else:
            blocks.append(np.array([[rng.uniform(*pole_range)]]))
            left -= 1
    from scipy.linalg import block_diag

    A = block_diag(*blocks)
    B = rng.standard_normal((k, 1))
    C = rng.standard_normal((1, k))
    D = 0.3 * rng.standard_normal((1, 1))
    return A, B, C, D


def normalize_lti_gain(ss, horizon=80.0, n_steps=2000, safety=1.02):
    """Scale an LTI block so its gain is at most one.

    The gain is measured with the lifted finite-horizon oracle on a long
    horizon; since that estimate approaches the true infinite-horizon norm
    from below (about 1% short for lightly damped fast poles at these
    settings), the measured value is inflated by ``safety`` before dividing.
    """
    A, B, C, D = ss
    sys = LtvSystem(
        MatrixSignal.constant(A, horizon), MatrixSignal.constant(B, horizon),
        MatrixSignal.constant(C, horizon), MatrixSignal.constant(D, horizon),
    )
    gain = lifted_l2_gain_oracle(sys, n_steps)
    if gain == 0.0:
        return A, B, C, D
    scale = 1.0 / (gain * safety)
    return A, B, C * scale, D * scale


def close_loop_with_delta(plant, delta_ss):
    """Substitute a concrete LTI uncertainty into the partitioned plant.

    Returns the nominal LTV system from d to e with state [x_plant; x_delta].
    Raises when the algebraic loop (I - D11 Ddelta) is singular.
    """
    Ad, Bd, Cd, Dd = [np.atleast_2d(np.asarray(M, dtype=float)) for M in delta_ss]
    k = Ad.shape[0]
    nv, nw = plant.n_v, plant.n_w
    if Ad.shape != (k, k) or Bd.shape != (k, nv) or Cd.shape != (nw, k) or Dd.shape != (nw, nv):
        raise ValueError(
            f"uncertainty block must map the v channel ({nv}) to the w channel ({nw})")
    grid = plant.grid
    n = plant.n
    As, Bs, Cs, Ds = [], [], [], []
    for i, t in enumerate(grid.points):
        A = plant.A.samples[i]
        B1, B2 = plant.B1.samples[i], plant.B2.samples[i]
        C1, D11, D12 = plant.C1.samples[i], plant.D11.samples[i], plant.D12.samples[i]
        C2, D21, D22 = plant.C2.samples[i], plant.D21.samples[i], plant.D22.samples[i]
        loop = np.eye(nv) - D11 @ Dd
        try:
            lam = np.linalg.inv(loop)
        except np.linalg.LinAlgError:
            raise ValueError("interconnection not well posed: I - D11*Delta(inf) singular")
        lamC1 = lam @ C1
        lamD11Cd = lam @ D11 @ Cd
        lamD12 = lam @ D12
        w_x = Dd @ lamC1
        w_xd = Cd + Dd @ lamD11Cd
        w_d = Dd @ lamD12
        Acl = np.block([
            [A + B1 @ w_x, B1 @ w_xd],
            [Bd @ lamC1, Ad + Bd @ lamD11Cd],
        ])
        Bcl = np.vstack([B2 + B1 @ w_d, Bd @ lamD12])
        Ccl = np.hstack([C2 + D21 @ w_x, D21 @ w_xd])
        Dcl = D22 + D21 @ w_d
        As.append(Acl)
        Bs.append(Bcl)
        Cs.append(Ccl)
        Ds.append(Dcl)
    interp = plant.A.interp
    return LtvSystem(
        MatrixSignal(grid, np.stack(As), interp),
        MatrixSignal(grid, np.stack(Bs), interp),
        MatrixSignal(grid, np.stack(Cs), interp),
        MatrixSignal(grid, np.stack(Ds), interp),
    )


@dataclass
class DeltaSample:
    index: int
    n_states: int
    gain: float
    status: str


@dataclass
class ValidationReport:
    """Monte-Carlo closed-loop gains against the certified robust bound."""

    gamma_robust: float
    kind: GainKind
    samples: list = field(default_factory=list)

    @property
    def max_gain(self):
        gains = [s.gain for s in self.samples if s.status == "ok"]
        return max(gains) if gains else 0.0

    @property
    def all_below_bound(self):
        return all(s.gain <= self.gamma_robust + 1e-6
                   for s in self.samples if s.status == "ok")

    def to_jsonable(self):
        return {
            "gamma_robust": self.gamma_robust,
            "kind": self.kind.value,
            "max_gain": self.max_gain,
            "all_below_bound": self.all_below_bound,
            "samples": [
                {"index": s.index, "states": s.n_states, "gain": s.gain,
                 "status": s.status}
                for s in self.samples
            ],
        }

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_jsonable(), f, indent=2)


def _one_delta_sample(args):
    plant, kind, idx, ss, seed, max_states, bisect_rel_tol = args
    if ss is None:
        # per-index seeding keeps the draw identical regardless of job count
        rng = np.random.default_rng([seed, idx])
        n_states = int(rng.integers(0, max_states + 1))
        ss = normalize_lti_gain(random_stable_lti(rng, n_states))
    n_states = np.atleast_2d(np.asarray(ss[0])).shape[0]
    try:
        closed = close_loop_with_delta(plant, ss)
        bound = bisect_gain(closed, kind, rel_tol=bisect_rel_tol)
        return DeltaSample(idx, n_states, bound.gamma, "ok")
    except Exception as exc:  # per-sample failures are data, not fatal
        return DeltaSample(idx, n_states, math.nan, f"failed: {exc}")


def sample_delta_validate(plant, gamma_robust, kind, n_samples=100, max_states=6,
                          seed=0, include_deltas=(), bisect_rel_tol=1e-3, jobs=1):
    """Draw random admissible uncertainties, close each loop, and compare the
    nominal closed-loop gains with the robust bound.

    Each draw is a random stable LTI block with 0 to ``max_states`` states,
    scaled to gain at most one; explicitly supplied state spaces in
    ``include_deltas`` are used as-is (they must be admissible already).
    Samples are independent and evaluated in parallel when jobs > 1, with
    identical draws regardless of the job count.  Per-sample failures are
    recorded, not raised.
    """
    kind = GainKind(kind)
    report = ValidationReport(float(gamma_robust), kind)
    fixed = list(include_deltas)
    tasks = []
    for idx in range(len(fixed) + int(n_samples)):
        ss = fixed[idx] if idx < len(fixed) else None
        tasks.append((plant, kind, idx, ss, seed, max_states, bisect_rel_tol))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            report.samples = list(pool.map(_one_delta_sample, tasks))
    else:
        report.samples = [_one_delta_sample(t) for t in tasks]
    return report

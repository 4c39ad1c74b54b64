"""Hamiltonian two-point boundary machinery and worst-case disturbance
construction.

The quadratic cost induced by a gain level defines a Hamiltonian flow whose
transition blocks (X1, X2) solve the backward matrix ODE from (I, F); the
ratio X2 X1^{-1} is the Riccati solution wherever X1 is invertible, and a
singular X1(t0) marks a conjugate time.  A near-critical gain level therefore
yields a nontrivial boundary-value solution from which the (near) worst-case
input is read off directly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .ltv import TimeGrid, MatrixSignal, VectorSignal, cost_eval, l2_gain_cost, \
    l2e_gain_cost, l2_norm, simulate
from .riccati import GainKind, _check_R_negdef

__all__ = [
    "HamiltonianSystem",
    "TransitionBlocks",
    "ConjugatePoint",
    "WorstCaseInput",
    "NoConjugatePointError",
    "WorstCaseVerificationError",
    "build_hamiltonian",
    "transition_blocks",
    "conjugate_point_scan",
    "worst_case_disturbance",
    "worst_case_to_csv",
]

_SINGULARITY_RATIO = 1e-8


class NoConjugatePointError(RuntimeError):
    """Raised when no conjugate time exists (the gain target is not below the gain)."""


class WorstCaseVerificationError(RuntimeError):
    """Raised when the constructed input fails its simulation-based check."""


class HamiltonianSystem:
    """Time-varying Hamiltonian  H = [[A, 0], [-Q, -Aᵀ]] + [[-B], [S]] R⁻¹ [Sᵀ, Bᵀ].

    ``H`` holds grid samples of the assembled matrix; ``eval`` composes the
    blocks exactly at arbitrary times so that downstream integrations see the
    same time dependence as the Riccati machinery (R is inverted pointwise,
    which sampling plus interpolation would only approximate).
    """

    def __init__(self, A, B, cost):
        if cost.n != A.shape[0] or cost.m != B.shape[1]:
            raise ValueError("cost dimensions do not match (A, B)")
        _check_R_negdef(cost.R)
        self._A, self._B, self._cost = A, B, cost
        grid = A.grid.union(B.grid).union(cost.grid)
        self.H = MatrixSignal(grid, np.stack([self.eval(t) for t in grid.points]),
                              A.interp)

    @property
    def n(self):
        return self._A.shape[0]

    @property
    def T(self):
        return self._A.T

    def eval(self, t):
        A = self._A.eval(t)
        B = self._B.eval(t)
        Q, S, R = self._cost.terms(t)
        n = A.shape[0]
        top = np.hstack([A, np.zeros((n, n))])
        bottom = np.hstack([-Q, -A.T])
        stacked = np.vstack([-B, S])
        coupling = stacked @ np.linalg.solve(R, np.hstack([S.T, B.T]))
        return np.vstack([top, bottom]) + coupling


def build_hamiltonian(A, B, cost):
    return HamiltonianSystem(A, B, cost)


@dataclass
class TransitionBlocks:
    """Backward transition blocks [X1(t); X2(t)] = Phi(t, T) [I; F]."""

    ts: np.ndarray            # increasing
    X1: np.ndarray            # (N, n, n)
    X2: np.ndarray            # (N, n, n)
    terminal_weight: np.ndarray
    _dense: object = None

    @property
    def n(self):
        return self.X1.shape[1]

    @property
    def T(self):
        return float(self.ts[-1])

    def eval(self, t):
        t = float(t)
        slop = 1e-9 * (1.0 + self.T)
        if t < self.ts[0] - slop or t > self.T + slop:
            raise ValueError(f"t = {t:g} outside the integrated interval")
        t = min(max(t, self.ts[0]), self.T)
        n = self.n
        flat = self._dense(t)
        return flat[: n * n].reshape(n, n), flat[n * n:].reshape(n, n)

    def riccati_ratio(self, t):
        """X2(t) X1(t)^{-1}; solves the Riccati equation wherever X1 is invertible."""
        X1, X2 = self.eval(t)
        return np.linalg.solve(X1.T, X2.T).T


def transition_blocks(ham, F, *, rtol=1e-9, atol=1e-12, max_step=np.inf):
    """Integrate [X1dot; X2dot] = H(t) [X1; X2] backward from (I, F)."""
    n = ham.n
    F = np.asarray(F, dtype=float)
    if F.shape != (n, n):
        raise ValueError(f"terminal weight must be {n}x{n}")

    def rhs(t, flat):
        X = flat.reshape(2 * n, n)
        return (ham.eval(t) @ X).reshape(-1)

    x_T = np.vstack([np.eye(n), F]).reshape(-1)
    sol = solve_ivp(rhs, (ham.T, 0.0), x_T, rtol=rtol, atol=atol,
                    dense_output=True, max_step=max_step)
    if sol.status != 0:
        raise RuntimeError(f"transition-block integration failed: {sol.message}")
    ts = sol.t[::-1].copy()
    mats = sol.y.T[::-1].reshape(-1, 2 * n, n)
    return TransitionBlocks(ts=ts, X1=mats[:, :n, :].copy(), X2=mats[:, n:, :].copy(),
                            terminal_weight=F.copy(), _dense=sol.sol)


@dataclass
class ConjugatePoint:
    t0: float
    direction: np.ndarray     # terminal state direction v with X1(t0) v ~ 0
    singularity_ratio: float  # sigma_min / sigma_max of X1(t0)


def _sigma_ratio(X):
    s = np.linalg.svd(X, compute_uv=False)
    return float(s[-1] / s[0]) if s[0] > 0 else 0.0


def conjugate_point_scan(blocks, threshold=_SINGULARITY_RATIO):
    """Latest time at which X1 becomes singular, scanning backward from T.

    Singularity is detected either by the relative smallest singular value
    dropping below ``threshold`` at a sample, or by a sign change of det X1
    between samples, which is then refined by root finding on the dense
    interpolant (a pure sample scan can step over the narrow near-singular
    window).  Returns None when X1 stays well conditioned; t = T itself is
    never flagged (X1(T) = I).
    """
    ts = blocks.ts
    n = blocks.n

    def X1_at(t):
        return blocks.eval(t)[0]

    dets = np.array([np.linalg.det(X) for X in blocks.X1])
    ratios = np.array([_sigma_ratio(X) for X in blocks.X1])

    candidates = []
    for k in range(len(ts) - 1, -1, -1):
        if ts[k] >= blocks.T * (1.0 - 1e-12):
            continue
        if ratios[k] < threshold:
            candidates.append(ts[k])
            break
        if k + 1 < len(ts) and np.sign(dets[k]) * np.sign(dets[k + 1]) < 0:
            t0 = brentq(lambda t: np.linalg.det(X1_at(t)), ts[k], ts[k + 1],
                        xtol=1e-14 * (1.0 + blocks.T))
            candidates.append(t0)
            break
    if not candidates:
        return None
    t0 = candidates[0]
    X1 = X1_at(t0)
    _, svals, Vt = np.linalg.svd(X1)
    ratio = float(svals[-1] / svals[0]) if svals[0] > 0.0 else 0.0
    return ConjugatePoint(t0=float(t0), direction=Vt[-1], singularity_ratio=ratio)


@dataclass
class WorstCaseInput:
    """A disturbance that (nearly) attains the gain at the target level."""

    d: VectorSignal
    achieved_ratio: float
    t0: float
    gamma_target: float
    cost_value: float         # J(d) at the target level; ~0 at a conjugate pair


def worst_case_to_csv(wc, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t"] + [f"d{i + 1}" for i in range(wc.d.dim)])
        for t, row in zip(wc.d.grid.points, wc.d.samples):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in row])


def _gain_cost(sys, kind, gamma):
    if GainKind(kind) is GainKind.INDUCED_L2:
        return l2_gain_cost(sys, gamma)
    return l2e_gain_cost(sys, gamma)


def worst_case_disturbance(sys, kind, gamma_target, *, n_output=4001,
                           ratio_tol=0.01, cost_tol=1e-4, ode_rtol=1e-10,
                           ode_atol=1e-13):
    """Construct a (near) worst-case input at a gain level just below the gain.

    The caller supplies ``gamma_target`` (typically 0.999 times a certified
    gain).  The Hamiltonian transition blocks are integrated backward, the
    latest conjugate time t0 is located, and the input is read off the
    boundary-value trajectory through the null direction:
    zero before t0 and -R⁻¹(Sᵀx* + Bᵀλ) after, normalized to unit energy.

    The result is verified by forward simulation: the output/input ratio must
    reach (1 - ratio_tol) * gamma_target and the cost must vanish to
    ``cost_tol``; violations raise ``WorstCaseVerificationError``.
    """
    kind = GainKind(kind)
    gamma_target = float(gamma_target)
    cost = _gain_cost(sys, kind, gamma_target)
    ham = build_hamiltonian(sys.A, sys.B, cost)
    blocks = transition_blocks(ham, cost.F, rtol=ode_rtol, atol=ode_atol,
                               max_step=sys.T / 64.0)
    cp = conjugate_point_scan(blocks)
    if cp is None:
        raise NoConjugatePointError(
            f"no conjugate point on [0, {sys.T:g}] at gamma = {gamma_target:g}; "
            "the target must lie below the finite-horizon gain")
    t0 = cp.t0
    v = cp.direction

    T = sys.T
    n_after = max(int(n_output * (T - t0) / T), 257)
    ts_after = np.linspace(t0, T, n_after)
    d_after = np.empty((n_after, sys.nd))
    for i, t in enumerate(ts_after):
        X1, X2 = blocks.eval(t)
        xstar = X1 @ v
        lam = X2 @ v
        _, S, R = cost.terms(t)
        d_after[i] = -np.linalg.solve(R, S.T @ xstar + sys.B.eval(t).T @ lam)

    # assemble on [0, T]: exactly zero before the activation time, with a
    # negligible-width ramp carrying the jump at t0
    ramp = 1e-9 * T
    if t0 > ramp:
        head = np.linspace(0.0, t0 - ramp, max(int(n_output * t0 / T), 9))
        pts = np.concatenate([head, ts_after])
        d_samples = np.vstack([np.zeros((head.size, sys.nd)), d_after])
    elif t0 > 0.0:
        pts = np.concatenate([[0.0], ts_after])
        d_samples = np.vstack([np.zeros((1, sys.nd)), d_after])
    else:
        pts, d_samples = ts_after, d_after
    keep = np.concatenate([[True], np.diff(pts) > 0.0])
    dbar = VectorSignal(TimeGrid(pts[keep]), d_samples[keep])
    norm = l2_norm(dbar)
    if norm == 0.0:
        raise NoConjugatePointError("degenerate boundary-value solution (zero input)")
    dbar = VectorSignal(dbar.grid, dbar.samples / norm)

    x, e = simulate(sys, dbar, np.zeros(sys.nx), rtol=1e-10, atol=1e-13)
    if kind is GainKind.INDUCED_L2:
        achieved = l2_norm(e)
    else:
        achieved = float(np.linalg.norm(e.eval(T)))
    j_value = cost_eval(cost, x, dbar)

    if achieved < (1.0 - ratio_tol) * gamma_target:
        raise WorstCaseVerificationError(
            f"achieved ratio {achieved:.6g} below (1 - {ratio_tol:g}) * "
            f"gamma_target = {(1 - ratio_tol) * gamma_target:.6g}")
    if abs(j_value) > cost_tol * max(1.0, gamma_target ** 2):
        raise WorstCaseVerificationError(
            f"cost at the target level should vanish, got {j_value:.3e}")
    return WorstCaseInput(d=dbar, achieved_ratio=achieved, t0=float(t0),
                          gamma_target=gamma_target, cost_value=float(j_value))

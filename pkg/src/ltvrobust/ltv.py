"""Time-gridded LTV systems, signals, and quadratic costs on a finite horizon [0, T].

Everything here is immutable value data after construction and every operation
is a pure function, so concurrent use from multiple threads is safe.
"""

from __future__ import annotations

import enum

import numpy as np
from scipy.integrate import solve_ivp

__all__ = [
    "Interp",
    "TimeGrid",
    "MatrixSignal",
    "VectorSignal",
    "LtvSystem",
    "PartitionedLtvSystem",
    "QuadraticCost",
    "simulate",
    "l2_norm",
    "quadratic_integral",
    "cost_eval",
    "l2_gain_cost",
    "l2e_gain_cost",
    "as_partitioned",
    "system_to_json",
    "system_from_json",
    "partitioned_to_json",
    "partitioned_from_json",
]

# relative slop allowed when checking t against [0, T] (ODE solvers produce
# endpoint times with rounding noise)
_RANGE_SLOP = 1e-9


class Interp(enum.Enum):
    """Interpolation rule for sampled signals."""

    PIECEWISE_LINEAR = "linear"
    ZERO_ORDER_HOLD = "zoh"


class TimeGrid:
    """Strictly increasing time points spanning [0, T]."""

    __slots__ = ("points",)

    def __init__(self, points):
        pts = np.asarray(points, dtype=float).reshape(-1)
        if pts.size < 2:
            raise ValueError("time grid needs at least 2 points")
        if pts[0] != 0.0:
            raise ValueError(f"time grid must start at 0, got {pts[0]!r}")
        if np.any(np.diff(pts) <= 0.0):
            raise ValueError("time grid must be strictly increasing")
        pts = pts.copy()
        pts.setflags(write=False)
        self.points = pts

    @classmethod
    def uniform(cls, horizon, n_points):
        return cls(np.linspace(0.0, float(horizon), int(n_points)))

    @property
    def T(self):
        return float(self.points[-1])

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.points, other.points)

    def __repr__(self):
        return f"TimeGrid({len(self)} points on [0, {self.T:g}])"

    def union(self, other):
        pts = np.union1d(self.points, np.asarray(other.points if isinstance(other, TimeGrid) else other))
        return TimeGrid(pts)

    def restrict(self, t_end):
        """Truncate the grid to [0, t_end] (t_end becomes the last point)."""
        t_end = float(t_end)
        if not 0.0 < t_end <= self.T * (1.0 + _RANGE_SLOP):
            raise ValueError(f"cannot restrict grid on [0, {self.T:g}] to t_end={t_end:g}")
        t_end = min(t_end, self.T)
        keep = self.points[self.points < t_end * (1.0 - 1e-14)]
        return TimeGrid(np.append(keep, t_end))


def _check_range(t, horizon):
    slop = _RANGE_SLOP * (1.0 + horizon)
    if t < -slop or t > horizon + slop:
        raise ValueError(f"time {t!r} outside the signal horizon [0, {horizon:g}]")
    return min(max(t, 0.0), horizon)


def _interp_index(points, t, interp):
    if interp is Interp.ZERO_ORDER_HOLD:
        i = int(np.searchsorted(points, t, side="right")) - 1
        return min(max(i, 0), len(points) - 1)
    i = int(np.searchsorted(points, t, side="right")) - 1
    return min(max(i, 0), len(points) - 2)


def _interp_samples(points, samples, interp, t):
    i = _interp_index(points, t, interp)
    if interp is Interp.ZERO_ORDER_HOLD:
        return samples[i]
    t0, t1 = points[i], points[i + 1]
    w = (t - t0) / (t1 - t0)
    return (1.0 - w) * samples[i] + w * samples[i + 1]


class _SampledSignal:
    """Shared machinery for matrix- and vector-valued sampled signals."""

    __slots__ = ("grid", "samples", "interp")

    _sample_ndim = None

    def __init__(self, grid, samples, interp=Interp.PIECEWISE_LINEAR):
        if not isinstance(grid, TimeGrid):
            grid = TimeGrid(grid)
        samples = np.asarray(samples, dtype=float)
        if samples.ndim != self._sample_ndim + 1:
            raise ValueError(
                f"{type(self).__name__} samples must have shape (n_points, ...) with "
                f"{self._sample_ndim}-d entries, got shape {samples.shape}"
            )
        if samples.shape[0] != len(grid):
            raise ValueError(
                f"{samples.shape[0]} samples for a grid with {len(grid)} points"
            )
        samples = samples.copy()
        samples.setflags(write=False)
        self.grid = grid
        self.samples = samples
        self.interp = Interp(interp)

    @property
    def T(self):
        return self.grid.T

    def eval(self, t):
        """Value at time t (interpolated; exact at grid points)."""
        t = _check_range(float(t), self.grid.T)
        return _interp_samples(self.grid.points, self.samples, self.interp, t)

    __call__ = eval

    def eval_many(self, ts):
        return np.stack([self.eval(t) for t in np.asarray(ts, dtype=float).reshape(-1)])

    def restrict(self, t_end):
        new_grid = self.grid.restrict(t_end)
        n_keep = len(new_grid) - 1
        tail = _interp_samples(self.grid.points, self.samples, self.interp, new_grid.points[-1])
        samples = np.concatenate([self.samples[:n_keep], tail[None]], axis=0)
        return type(self)(new_grid, samples, self.interp)

    def resample(self, grid):
        """Re-sample onto a new grid spanning the same horizon.

        Exact whenever the new grid contains the old knots.
        """
        if not isinstance(grid, TimeGrid):
            grid = TimeGrid(grid)
        if abs(grid.T - self.T) > _RANGE_SLOP * (1.0 + self.T):
            raise ValueError("resample grid must span the same horizon")
        return type(self)(grid, self.eval_many(grid.points), self.interp)

    @property
    def is_constant(self):
        return bool(np.all(self.samples == self.samples[0]))


class MatrixSignal(_SampledSignal):
    """A matrix-valued function of time: samples on a grid plus an interpolation rule."""

    _sample_ndim = 2

    @classmethod
    def constant(cls, value, horizon, interp=Interp.PIECEWISE_LINEAR):
        value = np.atleast_2d(np.asarray(value, dtype=float))
        grid = TimeGrid([0.0, float(horizon)])
        return cls(grid, np.stack([value, value]), interp)

    @classmethod
    def from_function(cls, grid, fn, interp=Interp.PIECEWISE_LINEAR):
        if not isinstance(grid, TimeGrid):
            grid = TimeGrid(grid)
        return cls(grid, np.stack([np.atleast_2d(fn(t)) for t in grid.points]), interp)

    @property
    def shape(self):
        return self.samples.shape[1:]


class VectorSignal(_SampledSignal):
    """A vector-valued function of time sampled on a grid."""

    _sample_ndim = 1

    @classmethod
    def constant(cls, value, horizon, interp=Interp.PIECEWISE_LINEAR):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        grid = TimeGrid([0.0, float(horizon)])
        return cls(grid, np.stack([value, value]), interp)

    @classmethod
    def from_function(cls, grid, fn, interp=Interp.PIECEWISE_LINEAR):
        if not isinstance(grid, TimeGrid):
            grid = TimeGrid(grid)
        return cls(grid, np.stack([np.atleast_1d(fn(t)) for t in grid.points]), interp)

    @property
    def dim(self):
        return self.samples.shape[1]


def _common_grid(signals):
    pts = signals[0].grid.points
    for s in signals[1:]:
        pts = np.union1d(pts, s.grid.points)
    return TimeGrid(pts)


def _on_common_grid(signals):
    grid = _common_grid(signals)
    return [s if np.array_equal(s.grid.points, grid.points) else s.resample(grid) for s in signals]


class LtvSystem:
    """Finite-horizon state-space system  ẋ = A(t)x + B(t)d,  e = C(t)x + D(t)d.

    The four state matrices are stored on a shared time grid (inputs with
    different grids are re-sampled onto their union, which is exact for
    piecewise-linear and zero-order-hold data).
    """

    __slots__ = ("A", "B", "C", "D")

    def __init__(self, A, B, C, D):
        A, B, C, D = _on_common_grid([A, B, C, D])
        nx = A.shape[0]
        if A.shape != (nx, nx):
            raise ValueError(f"A must be square, got {A.shape}")
        nd = B.shape[1]
        ne = C.shape[0]
        if B.shape != (nx, nd) or C.shape != (ne, nx) or D.shape != (ne, nd):
            raise ValueError(
                f"inconsistent dimensions: A{A.shape} B{B.shape} C{C.shape} D{D.shape}"
            )
        self.A, self.B, self.C, self.D = A, B, C, D

    @property
    def nx(self):
        return self.A.shape[0]

    @property
    def nd(self):
        return self.B.shape[1]

    @property
    def ne(self):
        return self.C.shape[0]

    @property
    def grid(self):
        return self.A.grid

    @property
    def T(self):
        return self.A.T

    def restrict(self, t_end):
        return LtvSystem(*(s.restrict(t_end) for s in (self.A, self.B, self.C, self.D)))

    def __repr__(self):
        return f"LtvSystem(nx={self.nx}, nd={self.nd}, ne={self.ne}, T={self.T:g})"


class PartitionedLtvSystem:
    """LTV system with separate uncertainty (w -> v) and performance (d -> e) channels:

        ẋ = A x + B1 w + B2 d
        v = C1 x + D11 w + D12 d
        e = C2 x + D21 w + D22 d
    """

    __slots__ = ("A", "B1", "B2", "C1", "D11", "D12", "C2", "D21", "D22")

    def __init__(self, A, B1, B2, C1, D11, D12, C2, D21, D22):
        sigs = _on_common_grid([A, B1, B2, C1, D11, D12, C2, D21, D22])
        A, B1, B2, C1, D11, D12, C2, D21, D22 = sigs
        n = A.shape[0]
        nw, nd = B1.shape[1], B2.shape[1]
        nv, ne = C1.shape[0], C2.shape[0]
        expect = {
            "A": (n, n), "B1": (n, nw), "B2": (n, nd),
            "C1": (nv, n), "D11": (nv, nw), "D12": (nv, nd),
            "C2": (ne, n), "D21": (ne, nw), "D22": (ne, nd),
        }
        for name, sig in zip(expect, sigs):
            if sig.shape != expect[name]:
                raise ValueError(f"{name} has shape {sig.shape}, expected {expect[name]}")
        self.A, self.B1, self.B2 = A, B1, B2
        self.C1, self.D11, self.D12 = C1, D11, D12
        self.C2, self.D21, self.D22 = C2, D21, D22

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def n_w(self):
        return self.B1.shape[1]

    @property
    def n_d(self):
        return self.B2.shape[1]

    @property
    def n_v(self):
        return self.C1.shape[0]

    @property
    def n_e(self):
        return self.C2.shape[0]

    @property
    def grid(self):
        return self.A.grid

    @property
    def T(self):
        return self.A.T

    def nominal(self):
        """The d -> e system obtained by disconnecting the uncertainty channel (w = 0)."""
        return LtvSystem(self.A, self.B2, self.C2, self.D22)

    def restrict(self, t_end):
        return PartitionedLtvSystem(
            *(getattr(self, name).restrict(t_end) for name in self.__slots__)
        )

    def __repr__(self):
        return (
            f"PartitionedLtvSystem(n={self.n}, n_w={self.n_w}, n_d={self.n_d}, "
            f"n_v={self.n_v}, n_e={self.n_e}, T={self.T:g})"
        )


def as_partitioned(sys):
    """Wrap a nominal system as a partitioned one with empty uncertainty channels."""
    n, T = sys.nx, sys.T
    empty_col = MatrixSignal.constant(np.zeros((n, 0)), T)
    empty_row = MatrixSignal.constant(np.zeros((0, n)), T)
    return PartitionedLtvSystem(
        sys.A, empty_col, sys.B,
        empty_row, MatrixSignal.constant(np.zeros((0, 0)), T),
        MatrixSignal.constant(np.zeros((0, sys.nd)), T),
        sys.C, MatrixSignal.constant(np.zeros((sys.ne, 0)), T), sys.D,
    )


def _symmetrized(M, what, tol=1e-12):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"{what} must be square, got {M.shape}")
    scale = max(1.0, float(np.max(np.abs(M))) if M.size else 0.0)
    asym = float(np.max(np.abs(M - M.T))) if M.size else 0.0
    if asym > tol * scale:
        raise ValueError(f"{what} is not symmetric (relative asymmetry {asym / scale:.2e})")
    return 0.5 * (M + M.T)


class QuadraticCost:
    """Weights (Q, S, R, F) of the cost  x(T)ᵀF x(T) + ∫ [x;d]ᵀ[[Q,S],[Sᵀ,R]][x;d] dt.

    Q(t), R(t), and F are symmetrized on construction; inputs whose relative
    asymmetry exceeds 1e-12 are rejected.
    """

    __slots__ = ("Q", "S", "R", "F")

    def __init__(self, Q, S, R, F):
        Q, S, R = _on_common_grid([Q, S, R])
        n, m = S.shape
        if Q.shape != (n, n) or R.shape != (m, m):
            raise ValueError(f"inconsistent cost dimensions: Q{Q.shape} S{S.shape} R{R.shape}")
        Qs = np.stack([_symmetrized(Qi, "Q") for Qi in Q.samples])
        Rs = np.stack([_symmetrized(Ri, "R") for Ri in R.samples])
        self.Q = MatrixSignal(Q.grid, Qs, Q.interp)
        self.S = S
        self.R = MatrixSignal(R.grid, Rs, R.interp)
        F = _symmetrized(F, "F")
        if F.shape != (n, n):
            raise ValueError(f"F has shape {F.shape}, expected {(n, n)}")
        F.setflags(write=False)
        self.F = F

    @classmethod
    def constant(cls, Q, S, R, F, horizon):
        return cls(
            MatrixSignal.constant(Q, horizon),
            MatrixSignal.constant(S, horizon),
            MatrixSignal.constant(R, horizon),
            F,
        )

    @property
    def n(self):
        return self.Q.shape[0]

    @property
    def m(self):
        return self.R.shape[0]

    @property
    def grid(self):
        return self.Q.grid

    @property
    def T(self):
        return self.Q.T

    def terms(self, t):
        return self.Q.eval(t), self.S.eval(t), self.R.eval(t)

    def weight(self, t):
        """The stacked (n+m) x (n+m) weight [[Q, S], [Sᵀ, R]] at time t."""
        Q, S, R = self.terms(t)
        return np.block([[Q, S], [S.T, R]])


def simulate(sys, d, x0, t_eval=None, rtol=1e-5, atol=1e-8):
    """Integrate ẋ = A(t)x + B(t)d(t) from x(0) = x0 and return (x, e) signals.

    Uses an adaptive embedded Runge-Kutta pair; outputs are sampled on
    ``t_eval`` (the input's grid by default).  Zero-order-hold inputs bound
    the step size by the grid spacing so jumps are not smeared across steps.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != sys.nx:
        raise ValueError(f"x0 has {x0.size} entries, state dimension is {sys.nx}")
    if d.dim != sys.nd:
        raise ValueError(f"input signal has dimension {d.dim}, system expects {sys.nd}")
    if abs(d.T - sys.T) > _RANGE_SLOP * (1.0 + sys.T):
        raise ValueError("input signal horizon differs from the system horizon")
    grid = t_eval if t_eval is not None else d.grid
    if not isinstance(grid, TimeGrid):
        grid = TimeGrid(grid)

    A, B = sys.A, sys.B

    def rhs(t, x):
        return A.eval(t) @ x + B.eval(t) @ d.eval(t)

    max_step = np.inf
    if d.interp is Interp.ZERO_ORDER_HOLD:
        max_step = float(np.min(np.diff(d.grid.points)))
    sol = solve_ivp(rhs, (0.0, sys.T), x0, t_eval=grid.points, rtol=rtol, atol=atol,
                    max_step=max_step, dense_output=False)
    if sol.status != 0:
        raise RuntimeError(f"state integration failed: {sol.message}")
    xs = sol.y.T
    es = np.stack([
        sys.C.eval(t) @ x + sys.D.eval(t) @ d.eval(t)
        for t, x in zip(grid.points, xs)
    ])
    return VectorSignal(grid, xs, Interp.PIECEWISE_LINEAR), VectorSignal(grid, es, Interp.PIECEWISE_LINEAR)


def _segment_nodes(*signals):
    pts = signals[0].grid.points
    for s in signals[1:]:
        pts = np.union1d(pts, s.grid.points)
    return pts


def quadratic_integral(weight, u):
    """∫₀ᵀ u(t)ᵀ W(t) u(t) dt, exact for the sampled representations.

    ``weight`` may be a constant matrix or a MatrixSignal.  The integrand is
    polynomial of degree <= 3 on every segment of the union grid, so
    per-segment Simpson quadrature integrates it exactly.
    """
    if isinstance(weight, MatrixSignal):
        nodes = _segment_nodes(weight, u)
        w_at = weight.eval
    else:
        W0 = np.atleast_2d(np.asarray(weight, dtype=float))
        nodes = u.grid.points
        w_at = lambda t: W0
    total = 0.0
    for t0, t1 in zip(nodes[:-1], nodes[1:]):
        tm = 0.5 * (t0 + t1)
        q0 = u.eval(t0) @ w_at(t0) @ u.eval(t0)
        qm = u.eval(tm) @ w_at(tm) @ u.eval(tm)
        q1 = u.eval(t1) @ w_at(t1) @ u.eval(t1)
        total += (t1 - t0) / 6.0 * (q0 + 4.0 * qm + q1)
    return float(total)


def l2_norm(v):
    """Finite-horizon L2 norm (∫ vᵀv dt)^(1/2), exact for the interpolant."""
    pts = v.grid.points
    s = v.samples
    h = np.diff(pts)
    if v.interp is Interp.ZERO_ORDER_HOLD:
        total = float(np.sum(h * np.einsum("ij,ij->i", s[:-1], s[:-1])))
    else:
        a, b = s[:-1], s[1:]
        seg = (np.einsum("ij,ij->i", a, a) + np.einsum("ij,ij->i", a, b)
               + np.einsum("ij,ij->i", b, b)) / 3.0
        total = float(np.sum(h * seg))
    return float(np.sqrt(max(total, 0.0)))


def cost_eval(cost, x, d):
    """Evaluate x(T)ᵀF x(T) + ∫ [x;d]ᵀ[[Q,S],[Sᵀ,R]][x;d] dt for sampled trajectories."""
    if x.dim != cost.n or d.dim != cost.m:
        raise ValueError(
            f"trajectory dimensions ({x.dim}, {d.dim}) do not match cost ({cost.n}, {cost.m})"
        )
    if not np.array_equal(x.grid.points, d.grid.points):
        raise ValueError("state and input must share the same grid")
    stacked = VectorSignal(x.grid, np.hstack([x.samples, d.samples]), x.interp)
    weight = MatrixSignal(
        cost.grid,
        np.stack([cost.weight(t) for t in cost.grid.points]),
        cost.Q.interp,
    )
    xT = x.eval(x.T)
    return float(xT @ cost.F @ xT) + quadratic_integral(weight, stacked)


def l2_gain_cost(sys, gamma):
    """Cost whose nonpositivity is equivalent to induced-L2 gain <= gamma:
    Q = CᵀC, S = CᵀD, R = DᵀD − γ²I, F = 0, so J(d) = ‖e‖² − γ²‖d‖².
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    g2 = float(gamma) ** 2
    C, D = _on_common_grid([sys.C, sys.D])
    Qs = np.einsum("tij,tik->tjk", C.samples, C.samples)
    Ss = np.einsum("tij,tik->tjk", C.samples, D.samples)
    Rs = np.einsum("tij,tik->tjk", D.samples, D.samples) - g2 * np.eye(sys.nd)
    grid = C.grid
    return QuadraticCost(
        MatrixSignal(grid, Qs, C.interp),
        MatrixSignal(grid, Ss, C.interp),
        MatrixSignal(grid, Rs, C.interp),
        np.zeros((sys.nx, sys.nx)),
    )


def l2e_gain_cost(sys, gamma, feedthrough_tol=1e-10):
    """Cost whose nonpositivity is equivalent to L2-to-Euclidean gain <= gamma:
    Q = 0, S = 0, R = −γ²I, F = C(T)ᵀC(T), so J(d) = ‖e(T)‖² − γ²‖d‖².

    Requires D(T) = 0 for the terminal gain to be well defined.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    DT = sys.D.eval(sys.T)
    if DT.size and np.max(np.abs(DT)) > feedthrough_tol:
        raise ValueError(
            f"terminal feedthrough must vanish for the L2-to-Euclidean gain "
            f"(max |D(T)| = {np.max(np.abs(DT)):.2e})"
        )
    CT = sys.C.eval(sys.T)
    return QuadraticCost.constant(
        np.zeros((sys.nx, sys.nx)),
        np.zeros((sys.nx, sys.nd)),
        -float(gamma) ** 2 * np.eye(sys.nd),
        CT.T @ CT,
        sys.T,
    )


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

def _signal_to_nested(sig):
    return [m.tolist() for m in sig.samples]


def _signal_from_nested(grid, data, interp, what):
    arr = np.asarray(data, dtype=float)
    if arr.ndim != 3 or arr.shape[0] != len(grid):
        raise ValueError(f"{what} must be a list of matrices, one per grid point")
    return MatrixSignal(grid, arr, interp)


def _interp_from_name(name):
    try:
        return Interp(name)
    except ValueError:
        raise ValueError(f"unknown interpolation rule {name!r} (use 'linear' or 'zoh')")


def system_to_json(sys):
    """LTV system as a JSON-ready dict; matrices stored row-major per grid point."""
    sigs = _on_common_grid([sys.A, sys.B, sys.C, sys.D])
    return {
        "grid": sigs[0].grid.points.tolist(),
        "A": _signal_to_nested(sigs[0]),
        "B": _signal_to_nested(sigs[1]),
        "C": _signal_to_nested(sigs[2]),
        "D": _signal_to_nested(sigs[3]),
        "interp": sigs[0].interp.value,
    }


def system_from_json(obj):
    required = {"grid", "A", "B", "C", "D", "interp"}
    unknown = set(obj) - required
    if unknown:
        raise ValueError(f"unknown keys in system document: {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ValueError(f"system document missing keys: {sorted(missing)}")
    grid = TimeGrid(obj["grid"])
    interp = _interp_from_name(obj["interp"])
    return LtvSystem(*(
        _signal_from_nested(grid, obj[k], interp, k) for k in ("A", "B", "C", "D")
    ))


_PART_KEYS = ("A", "B1", "B2", "C1", "D11", "D12", "C2", "D21", "D22")


def partitioned_to_json(sys):
    sigs = _on_common_grid([getattr(sys, k) for k in _PART_KEYS])
    out = {"grid": sigs[0].grid.points.tolist(), "interp": sigs[0].interp.value}
    for key, sig in zip(_PART_KEYS, sigs):
        out[key] = _signal_to_nested(sig)
    return out


def partitioned_from_json(obj):
    required = set(_PART_KEYS) | {"grid", "interp"}
    unknown = set(obj) - required
    if unknown:
        raise ValueError(f"unknown keys in partitioned system document: {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ValueError(f"partitioned system document missing keys: {sorted(missing)}")
    grid = TimeGrid(obj["grid"])
    interp = _interp_from_name(obj["interp"])
    return PartitionedLtvSystem(*(
        _signal_from_nested(grid, obj[k], interp, k) for k in _PART_KEYS
    ))

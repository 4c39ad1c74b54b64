"""Storage-function bases, differential-LMI constraint assembly, and the
min-gamma^2 semidefinite program.

The storage function is parameterized as

    P(t) = Σ_j h_j(t) X_j + Σ_k H_k(t) x_k

with cardinal natural cubic splines h_j interpolating the symmetric decision
matrices X_j at the knots, plus optional fixed matrix basis functions H_k with
scalar weights.  The differential LMI is enforced at finitely many constraint
times; the resulting program is linear in (gamma^2, multiplier blocks, X_j,
x_k) and is handed to a pluggable conic solver.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .conic import ConicProgram, solve_conic
from .iqc import NonnegSignalBlock, PsdBlock, merge_multiplier_into_cost, \
    robust_l2_cost, robust_l2e_cost
from .ltv import MatrixSignal, TimeGrid
from .riccati import GainKind, _vech_indices

__all__ = [
    "SplineBasis",
    "build_spline_basis",
    "MatrixBasisFunction",
    "StorageParam",
    "StorageFunction",
    "eval_storage",
    "RobustSdp",
    "assemble_robust_sdp",
    "constrain_initial_set",
    "SdpStatus",
    "SdpOutcome",
    "solve_robust_sdp",
    "dlmi_margin",
]


class SplineBasis:
    """Cardinal natural-cubic-spline basis on a knot grid.

    h_j is the natural cubic spline interpolating the j-th unit vector, so a
    combination Σ h_j(t) X_j interpolates the X_j at the knots.  Natural end
    conditions (zero second derivative at both ends) make the basis reproduce
    constants exactly, hence Σ_j h_j(t) = 1.
    """

    def __init__(self, knots):
        knots = np.asarray(knots.points if isinstance(knots, TimeGrid) else knots, dtype=float)
        if knots.ndim != 1 or knots.size < 2 or np.any(np.diff(knots) <= 0):
            raise ValueError("spline knots must be at least two strictly increasing times")
        self.knots = knots
        eye = np.eye(knots.size)
        self._splines = [CubicSpline(knots, eye[j], bc_type="natural")
                         for j in range(knots.size)]
        self._derivs = [s.derivative() for s in self._splines]

    @property
    def n(self):
        return self.knots.size

    def _clip(self, t):
        lo, hi = self.knots[0], self.knots[-1]
        slop = 1e-9 * (1.0 + hi - lo)
        if t < lo - slop or t > hi + slop:
            raise ValueError(f"t = {t:g} outside the spline domain [{lo:g}, {hi:g}]")
        return min(max(t, lo), hi)

    def values(self, t):
        t = self._clip(float(t))
        return np.array([float(s(t)) for s in self._splines])

    def derivatives(self, t):
        t = self._clip(float(t))
        return np.array([float(d(t)) for d in self._derivs])


def build_spline_basis(knots):
    """Natural cubic-spline cardinal basis on the given knots."""
    return SplineBasis(knots)


class MatrixBasisFunction:
    """A fixed symmetric matrix basis function H(t) with derivative, stored as
    dense samples with piecewise-linear interpolation."""

    def __init__(self, ts, values, derivatives):
        self.ts = np.asarray(ts, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self.derivatives = np.asarray(derivatives, dtype=float)
        if self.ts.ndim != 1 or np.any(np.diff(self.ts) <= 0):
            raise ValueError("sample times must be strictly increasing")
        if self.values.shape != self.derivatives.shape or self.values.shape[0] != self.ts.size:
            raise ValueError("inconsistent matrix basis sample shapes")
        for H in self.values:
            if np.max(np.abs(H - H.T)) > 1e-9 * max(1.0, np.max(np.abs(H))):
                raise ValueError("matrix basis samples must be symmetric")

    @property
    def n(self):
        return self.values.shape[1]

    @classmethod
    def from_rde_solution(cls, sol, n_points=None):
        """Dense resampling of an RDE solution; derivatives come from the RDE
        right-hand side at the stored values (no finite differencing)."""
        if n_points is None:
            n_points = max(801, 2 * len(sol.ts) + 1)
        ts = np.linspace(sol.ts[0], sol.ts[-1], int(n_points))
        vals, ders = [], []
        for t in ts:
            Y, Yd = sol.eval_with_derivative(t)
            vals.append(0.5 * (Y + Y.T))
            ders.append(0.5 * (Yd + Yd.T))
        return cls(ts, np.stack(vals), np.stack(ders))

    def eval(self, t):
        t = float(t)
        i = int(np.searchsorted(self.ts, t, side="right")) - 1
        i = min(max(i, 0), self.ts.size - 2)
        t0, t1 = self.ts[i], self.ts[i + 1]
        w = (t - t0) / (t1 - t0)
        w = min(max(w, 0.0), 1.0)
        return ((1 - w) * self.values[i] + w * self.values[i + 1],
                (1 - w) * self.derivatives[i] + w * self.derivatives[i + 1])


@dataclass
class StorageParam:
    """Decision values of the storage parameterization: X_j matrices and x_k scalars."""

    X: np.ndarray   # (N_s, n, n), each symmetric
    x: np.ndarray   # (N_m,)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.x = np.asarray(self.x, dtype=float).reshape(-1)
        for Xj in self.X:
            if np.max(np.abs(Xj - Xj.T)) > 1e-9 * max(1.0, np.max(np.abs(Xj))):
                raise ValueError("spline coefficients X_j must be symmetric")


def eval_storage(basis, mbasis, params, t):
    """(P(t), Pdot(t)) of the spline + matrix-basis storage parameterization."""
    h = basis.values(t)
    hd = basis.derivatives(t)
    P = np.tensordot(h, params.X, axes=1)
    Pd = np.tensordot(hd, params.X, axes=1)
    for xk, Hk in zip(params.x, mbasis):
        H, Hd = Hk.eval(t)
        P = P + xk * H
        Pd = Pd + xk * Hd
    return P, Pd


class StorageFunction:
    """Bound (basis, matrix basis, parameters); exposes the same
    ``eval_with_derivative`` protocol as an RDE solution."""

    def __init__(self, basis, mbasis, params):
        self.basis = basis
        self.mbasis = list(mbasis)
        self.params = params

    def eval(self, t):
        return eval_storage(self.basis, self.mbasis, self.params, t)[0]

    def eval_with_derivative(self, t):
        return eval_storage(self.basis, self.mbasis, self.params, t)


def _sym_unit_tensor(n):
    """Symmetric basis matrices E_ab for the vech components (row-major upper)."""
    iu = _vech_indices(n)
    k = len(iu[0])
    E = np.zeros((k, n, n))
    for ell, (a, b) in enumerate(zip(*iu)):
        E[ell, a, b] = 1.0
        E[ell, b, a] = 1.0
    return E


def _perf_base_cost(ext, kind):
    """(Q0, S0, R0) samples at gamma^2 = 0 plus the terminal weight F."""
    kind = GainKind(kind)
    n, m = ext.n, ext.n_w + ext.n_d
    if kind is GainKind.INDUCED_L2:
        Q0 = np.einsum("tij,tik->tjk", ext.C2.samples, ext.C2.samples)
        S0 = np.einsum("tij,tik->tjk", ext.C2.samples, ext.D2.samples)
        R0 = np.einsum("tij,tik->tjk", ext.D2.samples, ext.D2.samples)
        F = np.zeros((n, n))
    else:
        D2T = ext.D2.eval(ext.T)
        if D2T.size and np.max(np.abs(D2T)) > 1e-10:
            raise ValueError("L2-to-Euclidean analysis requires zero terminal feedthrough")
        N = len(ext.grid)
        Q0 = np.zeros((N, n, n))
        S0 = np.zeros((N, n, m))
        R0 = np.zeros((N, m, m))
        C2T = ext.C2.eval(ext.T)
        F = C2T.T @ C2T
    return Q0, S0, R0, F


@dataclass
class RobustSdp:
    """Assembled min-gamma^2 program plus the metadata needed to interpret it."""

    program: ConicProgram
    ext: object
    kind: GainKind
    mparam: object
    basis: SplineBasis
    mbasis: list
    t_dlmi: np.ndarray
    eps: float
    gamma_sq_index: int
    m_slices: dict
    x_slice: slice
    xm_slice: slice


def assemble_robust_sdp(ext, kind, mparam, basis, mbasis, t_dlmi, eps=None):
    """Build the finite SDP: min gamma^2 over the DLMI at the constraint times,
    the terminal condition P(T) >= F, and the multiplier feasibility set.

    Every constraint matrix is affine in (gamma^2, multiplier scalars, X_j,
    x_k).  ``eps`` defaults to 1e-6 * (1 + the largest Frobenius norm of the
    constant constraint block over the grid).
    """
    kind = GainKind(kind)
    if isinstance(t_dlmi, TimeGrid):
        t_dlmi = t_dlmi.points
    t_dlmi = np.asarray(t_dlmi, dtype=float)
    if t_dlmi.ndim != 1 or t_dlmi.size == 0:
        raise ValueError("t_dlmi must be a nonempty 1-d array of times")
    if np.any(t_dlmi < 0) or np.any(t_dlmi > ext.T * (1 + 1e-9)):
        raise ValueError("t_dlmi must lie within [0, T]")
    if mparam.n_z != ext.n_z:
        raise ValueError("multiplier dimension does not match the extended system")

    n = ext.n
    nwd = ext.n_w + ext.n_d
    mdim = n + nwd
    Ns = basis.n
    Nm = len(mbasis)
    for Hk in mbasis:
        if Hk.n != n:
            raise ValueError("matrix basis dimension does not match the system")

    Q0, S0, R0, F = _perf_base_cost(ext, kind)
    Q0sig = MatrixSignal(ext.grid, Q0, ext.A.interp)
    S0sig = MatrixSignal(ext.grid, S0, ext.A.interp)
    R0sig = MatrixSignal(ext.grid, R0, ext.A.interp)

    if eps is None:
        rho = 1.0
        for t in t_dlmi:
            blk = np.block([[Q0sig.eval(t), S0sig.eval(t)],
                            [S0sig.eval(t).T, R0sig.eval(t)]])
            rho = max(rho, 1.0 + float(np.linalg.norm(blk, "fro")))
        eps = 1e-6 * rho
    eps = float(eps)

    prog = ConicProgram()
    gamma_slice = prog.add_variables("gamma_sq", 1)
    gamma_idx = gamma_slice.start
    prog.set_objective([gamma_idx], [1.0])
    m_slices = {}
    for block in mparam.blocks:
        if isinstance(block, NonnegSignalBlock):
            size = len(block.grid)
        else:
            size = block.size * (block.size + 1) // 2
        m_slices[block.name] = prog.add_variables(f"M:{block.name}", size)
    nvech = n * (n + 1) // 2
    x_slice = prog.add_variables("X", Ns * nvech)
    xm_slice = prog.add_variables("x_matrix_basis", Nm)

    E = _sym_unit_tensor(n)
    Egam = np.zeros((mdim, mdim))
    Egam[n + ext.n_w:, n + ext.n_w:] = np.eye(ext.n_d)

    for t_idx, t in enumerate(t_dlmi):
        At = ext.A.eval(t)
        Bt = ext.B.eval(t)
        C1t = ext.C1.eval(t)
        D1t = ext.D1.eval(t)
        CD = np.hstack([C1t, D1t])
        h = basis.values(t)
        hd = basis.derivatives(t)

        # constant part: performance cost at gamma^2 = 0, shifted by eps*I
        const_blk = np.zeros((mdim, mdim))
        const_blk[:n, :n] = Q0sig.eval(t)
        const_blk[:n, n:] = S0sig.eval(t)
        const_blk[n:, :n] = S0sig.eval(t).T
        const_blk[n:, n:] = R0sig.eval(t)
        G0 = -(const_blk + eps * np.eye(mdim))

        indices = [gamma_idx]
        mats = [Egam.copy()]   # -(-gamma^2 Egam) = +Egam

        for block in mparam.blocks:
            tensors = mparam.coefficient_tensor(block, t)
            sl = m_slices[block.name]
            for k in range(tensors.shape[0]):
                contrib = CD.T @ tensors[k] @ CD
                if np.any(contrib):
                    indices.append(sl.start + k)
                    mats.append(-contrib)

        # spline terms: per scalar X_j component, the (1,1) block gets
        # hd*E + h*(AᵀE + EA) and the (1,2) block gets h*E*B
        AtE = np.matmul(At.T[None], E)          # (nvech, n, n)
        lyap = AtE + np.transpose(AtE, (0, 2, 1))
        EB = np.matmul(E, Bt[None])             # (nvech, n, nwd)
        for j in range(Ns):
            if h[j] == 0.0 and hd[j] == 0.0:
                continue
            for ell in range(nvech):
                blk = np.zeros((mdim, mdim))
                blk[:n, :n] = hd[j] * E[ell] + h[j] * lyap[ell]
                blk[:n, n:] = h[j] * EB[ell]
                blk[n:, :n] = h[j] * EB[ell].T
                indices.append(x_slice.start + j * nvech + ell)
                mats.append(-blk)

        for k, Hk in enumerate(mbasis):
            H, Hd = Hk.eval(t)
            blk = np.zeros((mdim, mdim))
            blk[:n, :n] = Hd + At.T @ H + H @ At
            blk[:n, n:] = H @ Bt
            blk[n:, :n] = (H @ Bt).T
            indices.append(xm_slice.start + k)
            mats.append(-blk)

        prog.add_psd_constraint(f"dlmi[{t_idx}]", G0, indices, np.stack(mats))

    # terminal constraint P(T) >= F
    hT = basis.values(ext.T)
    idx_T, mats_T = [], []
    for j in range(Ns):
        if hT[j] == 0.0:
            continue
        for ell in range(nvech):
            idx_T.append(x_slice.start + j * nvech + ell)
            mats_T.append(hT[j] * E[ell])
    for k, Hk in enumerate(mbasis):
        H, _ = Hk.eval(ext.T)
        idx_T.append(xm_slice.start + k)
        mats_T.append(H)
    prog.add_psd_constraint("terminal", -F, idx_T, np.stack(mats_T))

    # multiplier feasibility
    iu_cache = {}
    for block in mparam.blocks:
        sl = m_slices[block.name]
        if isinstance(block, PsdBlock):
            k = block.size
            iu = iu_cache.setdefault(k, np.triu_indices(k))
            nsc = k * (k + 1) // 2
            coeffs = np.zeros((nsc, k, k))
            for ell, (a, b) in enumerate(zip(*iu)):
                coeffs[ell, a, b] = 1.0
                coeffs[ell, b, a] = 1.0
            prog.add_psd_constraint(
                f"psd:{block.name}", np.zeros((k, k)),
                np.arange(sl.start, sl.stop), coeffs)
        elif isinstance(block, NonnegSignalBlock):
            npts = len(block.grid)
            prog.add_nonneg_constraints(
                f"nonneg:{block.name}", np.zeros(npts),
                [[sl.start + i] for i in range(npts)],
                [[1.0] for _ in range(npts)])

    return RobustSdp(program=prog, ext=ext, kind=kind, mparam=mparam, basis=basis,
                     mbasis=list(mbasis), t_dlmi=t_dlmi, eps=eps,
                     gamma_sq_index=gamma_idx, m_slices=m_slices,
                     x_slice=x_slice, xm_slice=xm_slice)


def constrain_initial_set(sdp, E0, alpha1):
    """Add the initial-ellipsoid constraint  P(0) <= alpha1 * diag(E0, 0).

    E0 must be positive definite on the plant-state block; the filter states
    carry no initial stored energy.  Returns the same program object.
    """
    alpha1 = float(alpha1)
    if alpha1 <= 0:
        raise ValueError("alpha1 must be positive")
    E0 = np.asarray(E0, dtype=float)
    nG = sdp.ext.n_plant
    if E0.shape != (nG, nG):
        raise ValueError(f"E0 must be {nG}x{nG} for the plant-state block")
    if np.min(np.linalg.eigvalsh(0.5 * (E0 + E0.T))) <= 0:
        raise ValueError("E0 must be positive definite")
    n = sdp.ext.n
    nvech = n * (n + 1) // 2
    G0 = np.zeros((n, n))
    G0[:nG, :nG] = alpha1 * E0
    h0 = sdp.basis.values(0.0)
    E = _sym_unit_tensor(n)
    idx, mats = [], []
    for j in range(sdp.basis.n):
        if h0[j] == 0.0:
            continue
        for ell in range(nvech):
            idx.append(sdp.x_slice.start + j * nvech + ell)
            mats.append(-h0[j] * E[ell])
    for k, Hk in enumerate(sdp.mbasis):
        H, _ = Hk.eval(0.0)
        idx.append(sdp.xm_slice.start + k)
        mats.append(-H)
    sdp.program.add_psd_constraint("initial_set", G0, idx, np.stack(mats))
    return sdp


class SdpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    SOLVER_FAILURE = "solver_failure"


@dataclass
class SdpOutcome:
    status: SdpStatus
    gamma_sq: float | None
    gamma: float | None
    m_values: dict | None
    M: MatrixSignal | None
    storage: StorageParam | None
    storage_fn: StorageFunction | None
    stats: dict = field(default_factory=dict)


def solve_robust_sdp(sdp, solver="clarabel", *, tol=1e-9, max_iter=None, verbose=False):
    """Solve the assembled SDP and unpack (gamma^2, multiplier, storage)."""
    sol = solve_conic(sdp.program, solver, tol=tol, max_iter=max_iter, verbose=verbose)
    if sol.status == "infeasible":
        return SdpOutcome(SdpStatus.INFEASIBLE, None, None, None, None, None, None,
                          stats=sol.info)
    if sol.status != "optimal":
        return SdpOutcome(SdpStatus.SOLVER_FAILURE, None, None, None, None, None, None,
                          stats=sol.info)
    y = sol.y
    gamma_sq = float(y[sdp.gamma_sq_index])
    gamma = float(np.sqrt(max(gamma_sq, 0.0)))
    m_values = {}
    for block in sdp.mparam.blocks:
        sl = sdp.m_slices[block.name]
        vals = y[sl]
        if isinstance(block, NonnegSignalBlock):
            m_values[block.name] = np.maximum(vals, 0.0)
        else:
            k = block.size
            V = np.zeros((k, k))
            iu = np.triu_indices(k)
            V[iu] = vals
            V.T[iu] = vals
            if isinstance(block, PsdBlock):
                # project out solver-tolerance negativity
                lam, U = np.linalg.eigh(V)
                V = (U * np.maximum(lam, 0.0)) @ U.T
            m_values[block.name] = V
    n = sdp.ext.n
    nvech = n * (n + 1) // 2
    Xs = []
    iu = _vech_indices(n)
    for j in range(sdp.basis.n):
        vec = y[sdp.x_slice][j * nvech:(j + 1) * nvech]
        Xj = np.zeros((n, n))
        Xj[iu] = vec
        Xj.T[iu] = vec
        Xs.append(Xj)
    params = StorageParam(np.stack(Xs), y[sdp.xm_slice].copy())
    storage_fn = StorageFunction(sdp.basis, sdp.mbasis, params)
    if sdp.mparam.blocks:
        M = sdp.mparam.assemble(m_values, sdp.ext.T)
    else:
        M = MatrixSignal.constant(np.zeros((sdp.ext.n_z, sdp.ext.n_z)), sdp.ext.T)
    return SdpOutcome(SdpStatus.OPTIMAL, gamma_sq, gamma, m_values, M, params,
                      storage_fn, stats=sol.info)


def dlmi_margin(ext, kind, storage, M, gamma, ts):
    """λ_max of the differential LMI at each time, independent of the SDP assembly.

    The constraint is satisfied with strictness eps at t when the returned
    value is <= -eps.  Used for grid refinement and as a cross-check of the
    assembled program.
    """
    kind = GainKind(kind)
    if kind is GainKind.INDUCED_L2:
        cost = robust_l2_cost(ext, gamma)
    else:
        cost = robust_l2e_cost(ext, gamma)
    merged = merge_multiplier_into_cost(cost, ext, M)
    n = ext.n
    out = np.empty(len(ts))
    for i, t in enumerate(np.asarray(ts, dtype=float)):
        P, Pd = storage.eval_with_derivative(t)
        Q, S, R = merged.terms(t)
        At, Bt = ext.A.eval(t), ext.B.eval(t)
        blk = np.block([
            [Pd + At.T @ P + P @ At + Q, P @ Bt + S],
            [(P @ Bt + S).T, R],
        ])
        out[i] = float(np.max(np.linalg.eigvalsh(0.5 * (blk + blk.T))))
    return out

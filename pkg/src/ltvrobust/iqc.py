"""Integral-quadratic-constraint filters, multiplier parameterizations, and
extended-system assembly.

An IQC is a pair (filter, multiplier): a stable LTI filter driven by the
uncertainty's input/output pair (v, w) from zero initial state, and a
(possibly time-varying) symmetric weight M(t) for which the admissible
uncertainty guarantees ∫ z(t)ᵀ M(t) z(t) dt >= 0 over the horizon.  The
multiplier lives in a convex feasible set described by decision blocks.

Well-posedness of the uncertain interconnection is assumed throughout and is
not checked; no verification procedure is attempted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ltv import (
    LtvSystem,
    MatrixSignal,
    QuadraticCost,
    TimeGrid,
    VectorSignal,
    quadratic_integral,
    simulate,
)

__all__ = [
    "IqcFilter",
    "PsdBlock",
    "SymmetricBlock",
    "NonnegSignalBlock",
    "MultiplierParam",
    "IqcInstance",
    "ExtendedSystem",
    "unit_norm_lti_iqc",
    "tv_real_iqc",
    "empty_iqc",
    "conic_combine",
    "extend_system",
    "iqc_integral",
    "robust_l2_cost",
    "robust_l2e_cost",
    "merge_multiplier_into_cost",
    "iqc_from_json",
]

_HURWITZ_TOL = -1e-9


@dataclass(frozen=True)
class IqcFilter:
    """Stable LTI filter  ẋ = A x + B1 v + B2 w,  z = C x + D1 v + D2 w.

    Driven from zero initial state by convention (the IQC in the definition
    above is only valid for x(0) = 0).  A must be Hurwitz.
    """

    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C: np.ndarray
    D1: np.ndarray
    D2: np.ndarray

    def __post_init__(self):
        for name in ("A", "B1", "B2", "C", "D1", "D2"):
            arr = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        ns, nv, nw, nz = self.n_state, self.n_v, self.n_w, self.n_z
        shapes = {
            "A": (ns, ns), "B1": (ns, nv), "B2": (ns, nw),
            "C": (nz, ns), "D1": (nz, nv), "D2": (nz, nw),
        }
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise ValueError(f"filter matrix {name} has shape {got}, expected {want}")
        if ns > 0:
            worst = float(np.max(np.linalg.eigvals(self.A).real))
            if worst >= _HURWITZ_TOL:
                raise ValueError(
                    f"filter A matrix must be Hurwitz (max Re eig = {worst:.3e})"
                )

    @property
    def n_state(self):
        return self.A.shape[0]

    @property
    def n_v(self):
        return self.D1.shape[1]

    @property
    def n_w(self):
        return self.D2.shape[1]

    @property
    def n_z(self):
        return self.C.shape[0]

    @property
    def initial_state(self):
        return np.zeros(self.n_state)


# ---------------------------------------------------------------------------
# multiplier feasible sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PsdBlock:
    """A constant symmetric decision block constrained to be PSD."""

    name: str
    size: int
    placements: tuple  # ((diagonal offset into M, sign), ...)


@dataclass(frozen=True)
class SymmetricBlock:
    """A constant symmetric decision block with no sign constraint."""

    name: str
    size: int
    placements: tuple


@dataclass(frozen=True)
class NonnegSignalBlock:
    """A scalar piecewise-linear signal constrained to be nonnegative on its grid."""

    name: str
    grid: TimeGrid
    placements: tuple


def _block_n_scalars(block):
    if isinstance(block, NonnegSignalBlock):
        return len(block.grid)
    return block.size * (block.size + 1) // 2


def _block_patterns(block, nz):
    """Symmetric nz x nz pattern per scalar component of a constant block."""
    k = block.size
    iu = np.triu_indices(k)
    pats = np.zeros((len(iu[0]), nz, nz))
    for ell, (i, j) in enumerate(zip(*iu)):
        for off, sign in block.placements:
            pats[ell, off + i, off + j] += sign
            if i != j:
                pats[ell, off + j, off + i] += sign
    return pats


def _signal_pattern(block, nz):
    pat = np.zeros((nz, nz))
    for off, sign in block.placements:
        pat[off, off] += sign
    return pat


class MultiplierParam:
    """Convex feasible set of multipliers: decision blocks plus an assembly map.

    Each block contributes a fixed symmetric placement pattern; any feasible
    assignment of block values assembles to a symmetric M(t).  Feasibility is
    expressed purely through PSD and nonnegativity constraints.
    """

    def __init__(self, n_z, blocks):
        self.n_z = int(n_z)
        self.blocks = tuple(blocks)
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate block names: {names}")
        self._patterns = {}
        for b in self.blocks:
            if isinstance(b, NonnegSignalBlock):
                self._patterns[b.name] = _signal_pattern(b, self.n_z)
            else:
                self._patterns[b.name] = _block_patterns(b, self.n_z)

    @property
    def n_scalars(self):
        return sum(_block_n_scalars(b) for b in self.blocks)

    def block_patterns(self, block):
        return self._patterns[block.name]

    def coefficient_tensor(self, block, t):
        """Per-scalar M-contribution patterns of a block at time t."""
        if isinstance(block, NonnegSignalBlock):
            pts = block.grid.points
            out = np.zeros((len(pts), self.n_z, self.n_z))
            i = int(np.searchsorted(pts, t, side="right")) - 1
            i = min(max(i, 0), len(pts) - 2)
            w = (t - pts[i]) / (pts[i + 1] - pts[i])
            pat = self._patterns[block.name]
            out[i] = (1.0 - w) * pat
            out[i + 1] = w * pat
            return out
        return self._patterns[block.name]

    def zero_values(self):
        vals = {}
        for b in self.blocks:
            if isinstance(b, NonnegSignalBlock):
                vals[b.name] = np.zeros(len(b.grid))
            else:
                vals[b.name] = np.zeros((b.size, b.size))
        return vals

    def feasibility_margin(self, values):
        """Most negative constraint value: >= -1e-9 means feasible."""
        worst = np.inf
        for b in self.blocks:
            v = np.asarray(values[b.name], dtype=float)
            if isinstance(b, NonnegSignalBlock):
                worst = min(worst, float(np.min(v)))
            elif isinstance(b, PsdBlock):
                worst = min(worst, float(np.min(np.linalg.eigvalsh(0.5 * (v + v.T)))))
        return worst

    def require_feasible(self, values, tol=1e-9):
        margin = self.feasibility_margin(values)
        if margin < -tol:
            raise ValueError(f"multiplier values infeasible (margin {margin:.3e})")

    def assemble(self, values, horizon):
        """Assemble the multiplier M(t) from block values as a MatrixSignal.

        Constant-only parameterizations yield a constant signal on [0, horizon];
        time-varying blocks are sampled on the union of their grids with
        piecewise-linear interpolation.
        """
        base = np.zeros((self.n_z, self.n_z))
        signal_blocks = []
        for b in self.blocks:
            v = np.asarray(values[b.name], dtype=float)
            if isinstance(b, NonnegSignalBlock):
                signal_blocks.append((b, v))
                continue
            k = b.size
            iu = np.triu_indices(k)
            vs = 0.5 * (v + v.T)
            base = base + np.tensordot(vs[iu], self._patterns[b.name], axes=1)
        if not signal_blocks:
            return MatrixSignal.constant(base, horizon)
        grid = signal_blocks[0][0].grid
        for b, _ in signal_blocks[1:]:
            grid = grid.union(b.grid)
        samples = np.tile(base, (len(grid), 1, 1))
        for b, v in signal_blocks:
            sig = VectorSignal(b.grid, v[:, None])
            pat = self._patterns[b.name]
            for idx, t in enumerate(grid.points):
                samples[idx] += float(sig.eval(t)[0]) * pat
        return MatrixSignal(grid, samples)


@dataclass(frozen=True)
class IqcInstance:
    """A concrete IQC: a filter plus an assembled multiplier signal."""

    filter: IqcFilter
    M: MatrixSignal

    def __post_init__(self):
        if self.M.shape != (self.filter.n_z, self.filter.n_z):
            raise ValueError(
                f"multiplier shape {self.M.shape} does not match filter n_z = {self.filter.n_z}"
            )
        for Mi in self.M.samples:
            if np.max(np.abs(Mi - Mi.T)) > 1e-9 * max(1.0, np.max(np.abs(Mi))):
                raise ValueError("multiplier samples must be symmetric")


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------

def _chain_realization(order, pole):
    """State space of [1, 1/(s+p), ..., 1/(s+p)^order]ᵀ as a cascade of first-order lags."""
    v = order
    A = -pole * np.eye(v) + np.eye(v, k=-1)
    B = np.zeros((v, 1))
    B[0, 0] = 1.0
    C = np.vstack([np.zeros((1, v)), np.eye(v)])
    D = np.zeros((v + 1, 1))
    D[0, 0] = 1.0
    return A, B, C, D


def unit_norm_lti_iqc(order, pole):
    """IQC for LTI uncertainty of unit H-infinity norm.

    The filter applies the basis [1, 1/(s+p), ..., 1/(s+p)^order]ᵀ to each of
    v and w; the multiplier is diag(M11, -M11) with a PSD block M11 of size
    order+1.  order = 0 gives the static filter.
    """
    v = int(order)
    if v < 0:
        raise ValueError("order must be a nonnegative integer")
    p = float(pole)
    if p <= 0:
        raise ValueError("pole must be positive")
    if v == 0:
        filt = IqcFilter(
            A=np.zeros((0, 0)), B1=np.zeros((0, 1)), B2=np.zeros((0, 1)),
            C=np.zeros((2, 0)), D1=np.array([[1.0], [0.0]]), D2=np.array([[0.0], [1.0]]),
        )
    else:
        A1, B1, C1, D1 = _chain_realization(v, p)
        zv = np.zeros((v, v))
        zc = np.zeros((v + 1, v))
        zd = np.zeros((v + 1, 1))
        filt = IqcFilter(
            A=np.block([[A1, zv], [zv, A1]]),
            B1=np.vstack([B1, np.zeros((v, 1))]),
            B2=np.vstack([np.zeros((v, 1)), B1]),
            C=np.block([[C1, zc], [zc, C1]]),
            D1=np.vstack([D1, zd]),
            D2=np.vstack([zd, D1]),
        )
    k = v + 1
    param = MultiplierParam(2 * k, [PsdBlock("M11", k, ((0, 1.0), (k, -1.0)))])
    return filt, param


def tv_real_iqc(grid):
    """IQC for a time-varying real scalar of magnitude at most one.

    Static filter (identity on (v, w)); the multiplier is
    diag(m11(t), -m11(t)) with m11 nonnegative, sampled on the given grid.
    """
    if not isinstance(grid, TimeGrid):
        grid = TimeGrid(grid)
    filt = IqcFilter(
        A=np.zeros((0, 0)), B1=np.zeros((0, 1)), B2=np.zeros((0, 1)),
        C=np.zeros((2, 0)), D1=np.array([[1.0], [0.0]]), D2=np.array([[0.0], [1.0]]),
    )
    param = MultiplierParam(2, [NonnegSignalBlock("m11", grid, ((0, 1.0), (1, -1.0)))])
    return filt, param


def empty_iqc():
    """Degenerate IQC with no uncertainty channels (nominal analysis)."""
    filt = IqcFilter(
        A=np.zeros((0, 0)), B1=np.zeros((0, 0)), B2=np.zeros((0, 0)),
        C=np.zeros((0, 0)), D1=np.zeros((0, 0)), D2=np.zeros((0, 0)),
    )
    return filt, MultiplierParam(0, [])


def conic_combine(specs):
    """Combine several IQCs for the same channel pair by stacking their filters.

    The combined multiplier set is the block-diagonal union of the component
    sets; the conic weights are absorbed into each component's own scaling
    freedom (every block set is a cone).
    """
    specs = list(specs)
    if not specs:
        raise ValueError("need at least one IQC to combine")
    n_v = specs[0][0].n_v
    n_w = specs[0][0].n_w
    for filt, _ in specs[1:]:
        if filt.n_v != n_v or filt.n_w != n_w:
            raise ValueError("all combined IQCs must share the (v, w) channel dimensions")
    from scipy.linalg import block_diag

    filts = [f for f, _ in specs]
    A = block_diag(*[f.A for f in filts]) if filts else np.zeros((0, 0))
    B1 = np.vstack([f.B1 for f in filts])
    B2 = np.vstack([f.B2 for f in filts])
    C = block_diag(*[f.C for f in filts])
    D1 = np.vstack([f.D1 for f in filts])
    D2 = np.vstack([f.D2 for f in filts])
    # block_diag of empties can lose a dimension
    ns = sum(f.n_state for f in filts)
    nz = sum(f.n_z for f in filts)
    combined = IqcFilter(A=A.reshape(ns, ns), B1=B1, B2=B2, C=C.reshape(nz, ns), D1=D1, D2=D2)

    blocks = []
    offset = 0
    for idx, (filt, param) in enumerate(specs):
        for b in param.blocks:
            placements = tuple((off + offset, sign) for off, sign in b.placements)
            name = f"part{idx}_{b.name}"
            if isinstance(b, NonnegSignalBlock):
                blocks.append(NonnegSignalBlock(name, b.grid, placements))
            else:
                blocks.append(type(b)(name, b.size, placements))
        offset += filt.n_z
    return combined, MultiplierParam(nz, blocks)


# ---------------------------------------------------------------------------
# extended system and robust costs
# ---------------------------------------------------------------------------

class ExtendedSystem:
    """Series interconnection of a partitioned plant with an IQC filter.

    State x = [x_plant; x_filter]; inputs (w, d); outputs z (filter) and e
    (performance).  All six matrices are sampled on the plant grid (the filter
    is constant, so the sampling is exact for interpolated plant data).
    """

    __slots__ = ("A", "B", "C1", "D1", "C2", "D2",
                 "n_plant", "n_filter", "n_w", "n_d")

    def __init__(self, A, B, C1, D1, C2, D2, n_plant, n_w):
        n = A.shape[0]
        n_plant = int(n_plant)
        n_w = int(n_w)
        n_in = B.shape[1]
        if not 0 <= n_plant <= n or not 0 <= n_w <= n_in:
            raise ValueError("invalid state or input partition")
        if A.shape != (n, n) or C1.shape[1] != n or C2.shape[1] != n:
            raise ValueError("extended matrices have inconsistent state dimension")
        if D1.shape[1] != n_in or D2.shape[1] != n_in:
            raise ValueError("extended matrices have inconsistent input dimension")
        if C1.shape[0] != D1.shape[0] or C2.shape[0] != D2.shape[0]:
            raise ValueError("extended matrices have inconsistent output dimensions")
        self.A, self.B = A, B
        self.C1, self.D1 = C1, D1
        self.C2, self.D2 = C2, D2
        self.n_plant = n_plant
        self.n_filter = n - n_plant
        self.n_w = n_w
        self.n_d = n_in - n_w

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def n_z(self):
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

    def __repr__(self):
        return (
            f"ExtendedSystem(n={self.n} (plant {self.n_plant} + filter {self.n_filter}), "
            f"n_w={self.n_w}, n_d={self.n_d}, n_z={self.n_z}, n_e={self.n_e}, T={self.T:g})"
        )


def extend_system(plant, filt):
    """Assemble the extended system of a partitioned plant and an IQC filter."""
    if filt.n_v != plant.n_v or filt.n_w != plant.n_w:
        raise ValueError(
            f"filter channels (n_v={filt.n_v}, n_w={filt.n_w}) do not match plant "
            f"(n_v={plant.n_v}, n_w={plant.n_w})"
        )
    nG, npsi = plant.n, filt.n_state
    nw, nd = plant.n_w, plant.n_d
    grid = plant.grid
    interp = plant.A.interp

    def per_point(idx):
        AG = plant.A.samples[idx]
        BG1, BG2 = plant.B1.samples[idx], plant.B2.samples[idx]
        CG1, CG2 = plant.C1.samples[idx], plant.C2.samples[idx]
        DG11, DG12 = plant.D11.samples[idx], plant.D12.samples[idx]
        DG21, DG22 = plant.D21.samples[idx], plant.D22.samples[idx]
        a = np.vstack([
            np.hstack([AG, np.zeros((nG, npsi))]),
            np.hstack([filt.B1 @ CG1, filt.A]),
        ])
        b = np.vstack([
            np.hstack([BG1, BG2]),
            np.hstack([filt.B1 @ DG11 + filt.B2, filt.B1 @ DG12]),
        ])
        c1 = np.hstack([filt.D1 @ CG1, filt.C])
        d1 = np.hstack([filt.D1 @ DG11 + filt.D2, filt.D1 @ DG12])
        c2 = np.hstack([CG2, np.zeros((plant.n_e, npsi))])
        d2 = np.hstack([DG21, DG22])
        return a, b, c1, d1, c2, d2

    stacked = [per_point(i) for i in range(len(grid))]
    sigs = [MatrixSignal(grid, np.stack([s[k] for s in stacked]), interp) for k in range(6)]
    return ExtendedSystem(*sigs, n_plant=nG, n_w=nw)


def iqc_integral(filt, M, v, w, *, rtol=1e-8, atol=1e-10):
    """∫ z(t)ᵀ M(t) z(t) dt with z the filter response to (v, w) from rest.

    The sign of the result is the caller's soundness check; nothing is
    enforced here.
    """
    if v.dim != filt.n_v or w.dim != filt.n_w:
        raise ValueError("signal dimensions do not match the filter channels")
    grid = v.grid.union(w.grid)
    vw = VectorSignal(
        grid,
        np.hstack([v.resample(grid).samples, w.resample(grid).samples]),
        v.interp,
    )
    T = grid.T
    if filt.n_state == 0:
        D = np.hstack([filt.D1, filt.D2])
        z = VectorSignal(grid, vw.samples @ D.T, vw.interp)
    else:
        sys = LtvSystem(
            MatrixSignal.constant(filt.A, T),
            MatrixSignal.constant(np.hstack([filt.B1, filt.B2]), T),
            MatrixSignal.constant(filt.C, T),
            MatrixSignal.constant(np.hstack([filt.D1, filt.D2]), T),
        )
        _, z = simulate(sys, vw, filt.initial_state, rtol=rtol, atol=atol)
    if isinstance(M, MatrixSignal):
        return quadratic_integral(M, z)
    return quadratic_integral(np.asarray(M, dtype=float), z)


def _gamma_weight(n_w, n_d):
    return np.diag(np.concatenate([np.zeros(n_w), np.ones(n_d)]))


def robust_l2_cost(ext, gamma):
    """Induced-L2 performance cost on the extended system:
    Q = C2ᵀC2, S = C2ᵀD2, R = D2ᵀD2 − γ²·diag(0, I), F = 0.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    E = _gamma_weight(ext.n_w, ext.n_d)
    C2, D2 = ext.C2, ext.D2
    Qs = np.einsum("tij,tik->tjk", C2.samples, C2.samples)
    Ss = np.einsum("tij,tik->tjk", C2.samples, D2.samples)
    Rs = np.einsum("tij,tik->tjk", D2.samples, D2.samples) - float(gamma) ** 2 * E
    grid, interp = ext.grid, ext.A.interp
    return QuadraticCost(
        MatrixSignal(grid, Qs, interp),
        MatrixSignal(grid, Ss, interp),
        MatrixSignal(grid, Rs, interp),
        np.zeros((ext.n, ext.n)),
    )


def robust_l2e_cost(ext, gamma, feedthrough_tol=1e-10):
    """L2-to-Euclidean performance cost on the extended system:
    Q = 0, S = 0, R = −γ²·diag(0, I), F = C2(T)ᵀC2(T).

    Requires both terminal feedthrough blocks to vanish; the filter state does
    not enter the terminal bound (C2 has zero columns there).
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    D2T = ext.D2.eval(ext.T)
    if D2T.size and np.max(np.abs(D2T)) > feedthrough_tol:
        raise ValueError(
            f"terminal feedthrough must vanish for the L2-to-Euclidean gain "
            f"(max |D2(T)| = {np.max(np.abs(D2T)):.2e})"
        )
    C2T = ext.C2.eval(ext.T)
    n, m = ext.n, ext.n_w + ext.n_d
    return QuadraticCost.constant(
        np.zeros((n, n)), np.zeros((n, m)),
        -float(gamma) ** 2 * _gamma_weight(ext.n_w, ext.n_d),
        C2T.T @ C2T, ext.T,
    )


def merge_multiplier_into_cost(cost, ext, M):
    """Fold the IQC term into the cost:
    Q ← Q + C1ᵀMC1,  S ← S + C1ᵀMD1,  R ← R + D1ᵀMD1,  F unchanged.

    Sampled on the extended-system grid (exact for constant M and plant data;
    interpolated products otherwise).
    """
    grid = ext.grid
    interp = ext.A.interp
    Qs, Ss, Rs = [], [], []
    for idx, t in enumerate(grid.points):
        Mt = M.eval(t) if isinstance(M, MatrixSignal) else np.asarray(M, dtype=float)
        C1, D1 = ext.C1.samples[idx], ext.D1.samples[idx]
        Q, S, R = cost.terms(t)
        Qs.append(Q + C1.T @ Mt @ C1)
        Ss.append(S + C1.T @ Mt @ D1)
        Rs.append(R + D1.T @ Mt @ D1)
    return QuadraticCost(
        MatrixSignal(grid, np.stack(Qs), interp),
        MatrixSignal(grid, np.stack(Ss), interp),
        MatrixSignal(grid, np.stack(Rs), interp),
        cost.F,
    )


# ---------------------------------------------------------------------------
# serializable descriptions
# ---------------------------------------------------------------------------

def iqc_from_json(obj, grid=None):
    """Build an IQC from its JSON description.

    Supported forms: {"type": "unit_norm_lti", "v": int, "p": float},
    {"type": "tv_real"} (requires ``grid``), and
    {"type": "conic", "parts": [...]}.
    """
    if not isinstance(obj, dict) or "type" not in obj:
        raise ValueError("IQC description must be an object with a 'type' key")
    kind = obj["type"]
    if kind == "unit_norm_lti":
        extra = set(obj) - {"type", "v", "p"}
        if extra:
            raise ValueError(f"unknown keys in unit_norm_lti IQC: {sorted(extra)}")
        return unit_norm_lti_iqc(obj.get("v", 1), obj.get("p", 1.0))
    if kind == "tv_real":
        extra = set(obj) - {"type"}
        if extra:
            raise ValueError(f"unknown keys in tv_real IQC: {sorted(extra)}")
        if grid is None:
            raise ValueError("tv_real IQC needs a time grid")
        return tv_real_iqc(grid)
    if kind == "conic":
        extra = set(obj) - {"type", "parts"}
        if extra:
            raise ValueError(f"unknown keys in conic IQC: {sorted(extra)}")
        parts = obj.get("parts", [])
        if not parts:
            raise ValueError("conic IQC needs a nonempty 'parts' list")
        return conic_combine([iqc_from_json(p, grid) for p in parts])
    raise ValueError(f"unknown IQC type {kind!r}")

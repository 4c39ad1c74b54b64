"""Minimal conic-program container and pluggable solver adapters.

Programs are stated in the standard primal form used by modern conic solvers:

    minimize    cᵀy
    subject to  G_k(y) := G0_k + Σᵢ yᵢ Gᵢ_k  is PSD          (one block per constraint)
                r_j(y) := b_j + Σᵢ yᵢ a_{ji}  >= 0            (scalar rows)

Adapters translate this into the solver's native ``Ax + s = b, s ∈ K`` data.
Each solve is self-contained (no state is shared between solves), so distinct
solves may run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

__all__ = [
    "ConicProgram",
    "ConicSolution",
    "solve_conic",
    "available_solvers",
]


@dataclass
class _PsdConstraint:
    name: str
    const: np.ndarray          # (m, m) symmetric
    var_indices: np.ndarray    # (L,)
    coeffs: np.ndarray         # (L, m, m) symmetric

    @property
    def size(self):
        return self.const.shape[0]


@dataclass
class _NonnegConstraint:
    name: str
    const: np.ndarray          # (K,)
    var_indices: list          # per row: (k,) int array
    coeffs: list               # per row: (k,) float array


class ConicProgram:
    """Linear objective over free variables with PSD and nonnegativity constraints."""

    def __init__(self):
        self._blocks = []          # (name, start, size)
        self._n_vars = 0
        self._objective = {}
        self.psd_constraints = []
        self.nonneg_constraints = []

    @property
    def n_vars(self):
        return self._n_vars

    def add_variables(self, name, size):
        """Register ``size`` scalar decision variables; returns their slice."""
        start = self._n_vars
        self._blocks.append((name, start, int(size)))
        self._n_vars += int(size)
        return slice(start, self._n_vars)

    def variable_blocks(self):
        return list(self._blocks)

    def set_objective(self, indices, coefficients):
        for i, c in zip(np.atleast_1d(indices), np.atleast_1d(coefficients)):
            self._objective[int(i)] = float(c)

    @property
    def objective_vector(self):
        c = np.zeros(self._n_vars)
        for i, v in self._objective.items():
            c[i] = v
        return c

    def add_psd_constraint(self, name, const, var_indices, coeffs):
        """Add  const + Σ y[var_indices[l]] * coeffs[l]  PSD."""
        const = np.asarray(const, dtype=float)
        var_indices = np.asarray(var_indices, dtype=int)
        coeffs = np.asarray(coeffs, dtype=float)
        m = const.shape[0]
        if const.shape != (m, m) or coeffs.shape[1:] != (m, m):
            raise ValueError("inconsistent PSD constraint shapes")
        if coeffs.shape[0] != var_indices.size:
            raise ValueError("one coefficient matrix per variable index required")
        self.psd_constraints.append(_PsdConstraint(name, const, var_indices, coeffs))

    def add_nonneg_constraints(self, name, const, var_indices, coeffs):
        """Add scalar rows  const[j] + Σ y[idx] * coef >= 0."""
        self.nonneg_constraints.append(_NonnegConstraint(
            name, np.asarray(const, dtype=float),
            [np.asarray(ix, dtype=int) for ix in var_indices],
            [np.asarray(cf, dtype=float) for cf in coeffs],
        ))

    # -- evaluation helpers --------------------------------------------------

    def psd_matrix_at(self, constraint, y):
        G = constraint.const.copy()
        for i, Gi in zip(constraint.var_indices, constraint.coeffs):
            G += y[i] * Gi
        return G

    def worst_violation(self, y):
        """Most negative eigenvalue / row value over all constraints (>= 0 is feasible)."""
        worst = np.inf
        for con in self.psd_constraints:
            G = self.psd_matrix_at(con, y)
            worst = min(worst, float(np.min(np.linalg.eigvalsh(0.5 * (G + G.T)))))
        for con in self.nonneg_constraints:
            for b, ix, cf in zip(con.const, con.var_indices, con.coeffs):
                worst = min(worst, float(b + np.dot(y[ix], cf)))
        return worst

    def export_text(self, path):
        """Write the program in a sparse text form, one PSD block per constraint.

        Format (one item per line): ``nvars K``; ``var name start size``;
        ``objective idx coef``; then per PSD constraint a ``psd name m`` header
        followed by ``c i j val`` entries of the constant block and
        ``a varidx i j val`` coefficient entries (upper triangle only); per
        nonnegativity group a ``nonneg name`` header followed by
        ``row const varidx coef [varidx coef ...]`` lines.
        """
        lines = [f"nvars {self._n_vars}"]
        for name, start, size in self._blocks:
            lines.append(f"var {name} {start} {size}")
        for i, v in sorted(self._objective.items()):
            lines.append(f"objective {i} {float(v)!r}")
        for con in self.psd_constraints:
            m = con.size
            lines.append(f"psd {con.name} {m}")
            for i in range(m):
                for j in range(i, m):
                    if con.const[i, j] != 0.0:
                        lines.append(f"c {i} {j} {float(con.const[i, j])!r}")
            for vi, Gi in zip(con.var_indices, con.coeffs):
                for i in range(m):
                    for j in range(i, m):
                        if Gi[i, j] != 0.0:
                            lines.append(f"a {int(vi)} {i} {j} {float(Gi[i, j])!r}")
        for con in self.nonneg_constraints:
            lines.append(f"nonneg {con.name}")
            for b, ix, cf in zip(con.const, con.var_indices, con.coeffs):
                terms = " ".join(f"{int(i)} {float(c)!r}" for i, c in zip(ix, cf))
                lines.append(f"row {float(b)!r} {terms}".rstrip())
        text = "\n".join(lines) + "\n"
        with open(path, "w") as f:
            f.write(text)


@dataclass
class ConicSolution:
    status: str                     # "optimal" | "infeasible" | "failure"
    y: np.ndarray | None
    objective: float | None
    info: dict = field(default_factory=dict)


_SQRT2 = np.sqrt(2.0)


def _svec_upper_colmajor(M):
    """Scaled upper-triangle vectorization, column-major (clarabel convention)."""
    m = M.shape[0]
    out = np.empty(m * (m + 1) // 2)
    k = 0
    for j in range(m):
        for i in range(j + 1):
            out[k] = M[i, j] if i == j else M[i, j] * _SQRT2
            k += 1
    return out


def _svec_lower_colmajor(M):
    """Scaled lower-triangle vectorization, column-major (SCS convention)."""
    m = M.shape[0]
    out = np.empty(m * (m + 1) // 2)
    k = 0
    for j in range(m):
        for i in range(j, m):
            out[k] = M[i, j] if i == j else M[i, j] * _SQRT2
            k += 1
    return out


def _stack_constraints(program, svec):
    """Rows of (A, b) for  -Σ yᵢ Gᵢ + s = G0  per cone, in (nonneg, psd) order."""
    rows_A = []
    rows_b = []
    for con in program.nonneg_constraints:
        for b, ix, cf in zip(con.const, con.var_indices, con.coeffs):
            row = np.zeros(program.n_vars)
            row[ix] = -cf
            rows_A.append(sparse.csr_matrix(row))
            rows_b.append(np.array([b]))
    for con in program.psd_constraints:
        m = con.size
        block = np.zeros((m * (m + 1) // 2, program.n_vars))
        for i, Gi in zip(con.var_indices, con.coeffs):
            block[:, i] = -svec(Gi)
        rows_A.append(sparse.csr_matrix(block))
        rows_b.append(svec(con.const))
    A = sparse.vstack(rows_A, format="csc") if rows_A else sparse.csc_matrix((0, program.n_vars))
    b = np.concatenate(rows_b) if rows_b else np.zeros(0)
    return A, b


def _n_nonneg_rows(program):
    return sum(len(con.const) for con in program.nonneg_constraints)


def _solve_clarabel(program, tol, max_iter, verbose):
    import clarabel

    A, b = _stack_constraints(program, _svec_upper_colmajor)
    cones = []
    n_lin = _n_nonneg_rows(program)
    if n_lin:
        cones.append(clarabel.NonnegativeConeT(n_lin))
    for con in program.psd_constraints:
        cones.append(clarabel.PSDTriangleConeT(con.size))
    settings = clarabel.DefaultSettings()
    settings.verbose = verbose
    settings.max_iter = max_iter
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.tol_feas = tol
    P = sparse.csc_matrix((program.n_vars, program.n_vars))
    solver = clarabel.DefaultSolver(P, program.objective_vector, A, b, cones, settings)
    sol = solver.solve()
    name = str(sol.status)
    info = {"solver": "clarabel", "raw_status": name, "iterations": sol.iterations,
            "solve_time": sol.solve_time}
    if name in ("SolverStatus.Solved", "Solved"):
        return ConicSolution("optimal", np.asarray(sol.x), float(sol.obj_val), info)
    if name in ("SolverStatus.AlmostSolved", "AlmostSolved"):
        info["inaccurate"] = True
        return ConicSolution("optimal", np.asarray(sol.x), float(sol.obj_val), info)
    if "PrimalInfeasible" in name:
        return ConicSolution("infeasible", None, None, info)
    return ConicSolution("failure", None, None, info)


def _solve_scs(program, tol, max_iter, verbose):
    import scs

    A, b = _stack_constraints(program, _svec_lower_colmajor)
    cone = {}
    n_lin = _n_nonneg_rows(program)
    if n_lin:
        cone["l"] = n_lin
    if program.psd_constraints:
        cone["s"] = [con.size for con in program.psd_constraints]
    data = {"A": A, "b": b, "c": program.objective_vector,
            "P": sparse.csc_matrix((program.n_vars, program.n_vars))}
    solver = scs.SCS(data, cone, eps_abs=tol, eps_rel=tol, max_iters=max_iter,
                     verbose=verbose)
    out = solver.solve()
    raw = out["info"]["status"]
    info = {"solver": "scs", "raw_status": raw, "iterations": out["info"]["iter"],
            "solve_time": out["info"]["solve_time"] * 1e-3}
    if raw == "solved":
        return ConicSolution("optimal", np.asarray(out["x"]), float(out["info"]["pobj"]), info)
    if "infeasible" in raw and "inaccurate" not in raw:
        return ConicSolution("infeasible", None, None, info)
    # inaccurate statuses can be arbitrarily far off; report them as failures
    return ConicSolution("failure", None, None, info)


_ADAPTERS = {"clarabel": _solve_clarabel, "scs": _solve_scs}


def available_solvers():
    found = []
    for name, module in (("clarabel", "clarabel"), ("scs", "scs")):
        try:
            __import__(module)
            found.append(name)
        except ImportError:
            continue
    return found


_DEFAULT_MAX_ITER = {"clarabel": 200, "scs": 200_000}


def solve_conic(program, solver="clarabel", *, tol=1e-9, max_iter=None, verbose=None):
    """Solve a conic program with the named adapter.

    Solver failures are not masked; the raw status is carried in
    ``ConicSolution.info['raw_status']``.  When ``verbose`` is None, the
    LTVROBUST_SOLVER_VERBOSE environment variable (any nonempty value except
    "0") turns on the solver's own output.
    """
    if solver not in _ADAPTERS:
        raise ValueError(f"unknown solver {solver!r}; available: {sorted(_ADAPTERS)}")
    if max_iter is None:
        max_iter = _DEFAULT_MAX_ITER[solver]
    if verbose is None:
        import os

        verbose = os.environ.get("LTVROBUST_SOLVER_VERBOSE", "") not in ("", "0")
    return _ADAPTERS[solver](program, tol=tol, max_iter=int(max_iter), verbose=bool(verbose))

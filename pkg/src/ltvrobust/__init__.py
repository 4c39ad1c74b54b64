"""Certified finite-horizon performance bounds for linear time-varying systems
in feedback with uncertainty described by integral quadratic constraints.

The analysis produces guaranteed induced-L2 and L2-to-Euclidean gain bounds
(the latter bound reachable sets) through a combination of differential
linear matrix inequalities, solved as small semidefinite programs, and
backward Riccati differential equations, whose full-horizon existence is the
actual certificate.  A Hamiltonian boundary-value construction recovers
near worst-case disturbances.
"""

from .ltv import (
    Interp,
    LtvSystem,
    MatrixSignal,
    PartitionedLtvSystem,
    QuadraticCost,
    TimeGrid,
    VectorSignal,
    as_partitioned,
    cost_eval,
    l2_gain_cost,
    l2e_gain_cost,
    l2_norm,
    partitioned_from_json,
    partitioned_to_json,
    simulate,
    system_from_json,
    system_to_json,
)
from .riccati import (
    GainBound,
    GainKind,
    RdeHypothesisError,
    RdeSolution,
    RdeStatus,
    bisect_gain,
    gramian_l2e_oracle,
    integrate_rde_backward,
    lifted_l2_gain_oracle,
    rde_to_csv,
    rdi_residual,
)
from .iqc import (
    ExtendedSystem,
    IqcFilter,
    IqcInstance,
    MultiplierParam,
    conic_combine,
    empty_iqc,
    extend_system,
    iqc_from_json,
    iqc_integral,
    merge_multiplier_into_cost,
    robust_l2_cost,
    robust_l2e_cost,
    tv_real_iqc,
    unit_norm_lti_iqc,
)
from .dlmi import (
    MatrixBasisFunction,
    SdpOutcome,
    SdpStatus,
    SplineBasis,
    StorageFunction,
    StorageParam,
    assemble_robust_sdp,
    build_spline_basis,
    constrain_initial_set,
    dlmi_margin,
    eval_storage,
    solve_robust_sdp,
)
from .iteration import (
    IterationConfig,
    IterationLog,
    RobustGainResult,
    bisect_rde_fixed_multiplier,
    gain_vs_horizon,
    refine_constraint_grid,
    robust_gain_iterate,
)
from .worst_case import (
    ConjugatePoint,
    HamiltonianSystem,
    NoConjugatePointError,
    TransitionBlocks,
    WorstCaseInput,
    build_hamiltonian,
    conjugate_point_scan,
    transition_blocks,
    worst_case_disturbance,
    worst_case_to_csv,
)

__version__ = "0.1.0"

"""Augmented and deflated Krylov solvers with subspace recycling."""

from .cg import (
    AugBasis,
    CgReport,
    augmented_cg_solve,
    build_spectral_preconditioner,
    cg_bound,
    cg_solve,
    deflated_cg_solve,
    effective_condition_number,
    project_initial_guess,
)
from .deflation import (
    ObliqueDeflation,
    OrthoDeflation,
    apply_ortho_projectors,
    augmented_deflated_equivalence,
    deflated_gmres_oblique,
    deflated_gmres_ortho,
    spectral_translation,
)
from .dense import (
    EigenPairs,
    LeastSquaresResult,
    dense_eig,
    hermitian_solve,
    hessenberg_lsq,
    orthonormalize_against,
    thin_qr,
)
from .errors import (
    BreakdownError,
    HarmonicBreakdownError,
    HarvestTooSmallError,
    IndefiniteGramError,
    InvalidInputError,
    KrylovError,
    NotHpdError,
    ParseError,
    SingularOperatorError,
    UnsupportedFormatError,
)
from .gcro import OuterSpace, gcr_outer_append, gcro_dr_solve, gcro_inner_cycle, gcro_solve
from .gmres import (
    ArnoldiState,
    ConvergenceHistory,
    SolveConfig,
    SolveReport,
    arnoldi_expand,
    fgmres_cycle,
    fgmres_solve,
)
from .operators import (
    CsrMatrix,
    OperatorHandle,
    PreconditionerHandle,
    SpectrumSpec,
    csr_apply,
    csr_from_entries,
    make_test_operator,
    operator_from_csr,
    operator_from_dense,
    read_dense_array,
    read_matrix_market,
    write_dense_array,
    write_matrix_market,
)
from .recycling import (
    HarmonicSpec,
    RecycleSpace,
    augment_with_subspace,
    dr_compress,
    gmres_dr_solve,
    harmonic_ritz,
    load_recycle_space,
    save_recycle_space,
)
from .sequences import (
    RecycleStrategy,
    SystemSequence,
    SystemSpec,
    harvest_recycle_space,
    solve_sequence,
)

__version__ = "0.1.0"

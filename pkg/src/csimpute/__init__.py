"""csimpute: sparse longitudinal trajectory completion with a treatment offset.

Estimates smooth per-patient progression curves from sparse, irregularly
timed observations by nuclear-norm-regularized matrix completion on an
orthonormal spline basis, with an optional additive post-treatment offset
fitted jointly (the CSI solver) or omitted (the SLI baseline).
"""

from .basis import Basis, TimeGrid, make_grid, make_spline_basis, write_basis_csv
from .masked import (
    CollisionError,
    MaskedMatrix,
    ObservationSet,
    PatientRecord,
    TreatmentMatrix,
    grid_observations,
    project,
    project_complement,
    read_observations_csv,
    read_wide_csv,
    write_observations_csv,
    write_wide_csv,
)
from .shrinkage import SvdTriple, nuclear_norm, soft_threshold, solve_basis_lsq, thin_svd
from .solver import (
    FitResult,
    SolverConfig,
    fit_csi,
    fit_sli,
    loss,
    predict,
    surrogate,
    update_mu,
    update_w,
)
from .simulate import (
    SimConfig,
    SimOutput,
    default_spectrum,
    derived_seed,
    gdi_like_observations,
    generate_dataset,
    generate_treatments,
    generate_w,
)
from .evaluate import (
    CvResult,
    SplitSpec,
    SweepResult,
    baseline_pmean,
    baseline_rmean,
    cross_validate,
    make_splits,
    mse,
    principal_components,
    rse_mu,
    run_sweep,
)

__version__ = "0.1.0"

"""Joint blind calibration of multiband RF chains and sparse multipath
time-delay estimation by lifted covariance matching."""

from .covariance import (
    CovarianceData,
    LiftedOperator,
    build_lifted_operator,
    estimate_noise_power,
    lifted_residual,
    sample_covariance,
    vectorize_and_denoise,
)
from .model import (
    BandPlan,
    CalibrationBasis,
    DelayGrid,
    GainModel,
    GainResponse,
    MultipathChannel,
    build_chebyshev_basis,
    build_dictionary,
    build_steering,
    build_vandermonde,
    synth_gain_response,
)
from .simulate import (
    GainDraws,
    PilotSymbols,
    SnapshotMatrix,
    deconvolve,
    draw_path_gains,
    make_pilots,
    simulate_snapshots,
)
from .solver import (
    EstimationResult,
    LiftedSolution,
    SolverConfig,
    alt_min_solve,
    calib_extract,
    estimate,
    group_lasso_solve,
    prox_group_columns,
    rank1_extract,
    support_to_delays,
)

__version__ = "0.1.0"

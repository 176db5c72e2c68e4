"""Stochastic phase dynamics of bump patterns on the ring.

Simulation of the stochastic neural-field equation, extraction of the
variational and isochronal phases, and verification of their long-time
statistics (stationary phase density, exit probabilities, mean drift).
"""

from .errors import (
    BasinExitError,
    BlowUpError,
    BumpNotFoundError,
    DegeneratePhaseDiffusionError,
    GridMismatchError,
    PhaseUndefinedError,
    SolverInconsistencyError,
    SpectralAssumptionError,
    StabilityAssumptionError,
    TrivialStateError,
    WavephaseError,
)
from .grid import Field, Grid, convolve, differentiate, inner_product, translate
from .model import (
    ManifoldAtlas,
    RingModelParams,
    atlas_at,
    build_atlas,
    drift,
    estimate_semigroup_bound,
    linearize,
    solve_bump,
)
from .noise import NoiseModel, WienerIncrement, WienerStream, adjoint_coords, apply_increment
from .sim import SimConfig, Trajectory, run, step
from .variational import (
    PhaseSDECoeffs,
    PhaseState,
    integrate_phase_sde,
    mass_matrix,
    newton_phase,
    orthogonality_residual,
    sde_coeffs,
)
from .isochronal import (
    IsochronResult,
    PhaseLawCoeffs,
    d2theta_approx,
    dtheta_approx,
    integrate_isochronal_sde,
    isochronal_phase,
    phase_law_coeffs,
)

__version__ = "0.1.0"

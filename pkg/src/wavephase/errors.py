"""Error types raised by the model, phase, and solver layers."""


class WavephaseError(RuntimeError):
    """Base class for runtime failures of the numerical machinery."""


class GridMismatchError(ValueError):
    """Two fields living on different grids were combined."""


class BumpNotFoundError(WavephaseError):
    """Newton iteration for the stationary profile failed to converge."""


class TrivialStateError(WavephaseError):
    """The stationary solve converged to a spatially constant state."""


class SpectralAssumptionError(WavephaseError):
    """The discretized linearization does not have a simple zero eigenvalue."""


class StabilityAssumptionError(WavephaseError):
    """A non-decaying mode was found transverse to the manifold tangent."""


class PhaseUndefinedError(WavephaseError):
    """The phase solve failed: Newton diverged or the mass matrix degenerated."""


class BasinExitError(WavephaseError):
    """The noise-free flow did not relax back to the manifold in time."""


class DegeneratePhaseDiffusionError(WavephaseError):
    """The phase diffusion coefficient is not positive on the phase grid."""


class SolverInconsistencyError(WavephaseError):
    """Two independent solver routes disagree beyond tolerance."""


class BlowUpError(WavephaseError):
    """A simulated state left the finite range (NaN or infinity)."""

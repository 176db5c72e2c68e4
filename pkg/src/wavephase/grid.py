"""Periodic grid on [-pi, pi) with fields, quadrature, and FFT-based operators.

All other modules sit on top of the four primitives here: the quadrature
inner product, circular convolution, spectral differentiation, and
translation by Fourier phase shift.  The array-level functions accept
batched inputs of shape (..., n_points) so that trajectory ensembles can
reuse the exact same arithmetic.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatchError


@dataclass(frozen=True)
class Grid:
    """Uniform grid of n_points nodes on [-pi, pi), node j at -pi + j*spacing."""

    n_points: int

    def __post_init__(self):
        if self.n_points < 16 or self.n_points % 2 != 0:
            raise ValueError("n_points must be even and >= 16")

    @property
    def spacing(self) -> float:
        return 2.0 * np.pi / self.n_points

    @property
    def theta(self) -> np.ndarray:
        return -np.pi + self.spacing * np.arange(self.n_points)

    @property
    def wavenumbers(self) -> np.ndarray:
        """Nonnegative wavenumbers of the real FFT, 0..n_points/2."""
        return np.arange(self.n_points // 2 + 1)


@dataclass(frozen=True, eq=False)
class Field:
    """Real-valued function sampled on a Grid."""

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.grid.n_points,):
            raise ValueError(f"values must have shape ({self.grid.n_points},)")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field values must be finite")
        vals = vals.copy()
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    def __add__(self, other):
        _check_same_grid(self, other)
        return Field(self.grid, self.values + other.values)

    def __sub__(self, other):
        _check_same_grid(self, other)
        return Field(self.grid, self.values - other.values)

    def __mul__(self, c: float):
        return Field(self.grid, self.values * c)

    __rmul__ = __mul__

    def norm(self) -> float:
        return float(np.sqrt(inner_product(self, self)))


def _check_same_grid(f: Field, g: Field):
    if f.grid.n_points != g.grid.n_points:
        raise GridMismatchError(
            f"fields live on different grids ({f.grid.n_points} vs {g.grid.n_points})"
        )


# ---------------------------------------------------------------------------
# array-level kernels (batched over leading axes)

def inner_product_values(f: np.ndarray, g: np.ndarray, spacing: float):
    """Quadrature <f, g> = spacing * sum_j f_j g_j along the last axis."""
    return spacing * np.sum(f * g, axis=-1)


def norm_values(f: np.ndarray, spacing: float):
    return np.sqrt(inner_product_values(f, f, spacing))


def kernel_hat(kernel_values: np.ndarray, n: int) -> np.ndarray:
    """rfft of the kernel reindexed to angles 0, spacing, 2 spacing, ...

    Grid nodes start at -pi, but the convolution theorem needs the kernel
    sampled from angle 0, hence the half-period roll.
    """
    return np.fft.rfft(np.roll(kernel_values, -(n // 2)))


def convolve_values(khat: np.ndarray, f: np.ndarray, n: int, spacing: float):
    """Circular convolution given kernel_hat(...) of the kernel."""
    return np.fft.irfft(khat * np.fft.rfft(f, axis=-1), n, axis=-1) * spacing


def differentiate_values(f: np.ndarray, n: int, order: int = 1):
    fh = np.fft.rfft(f, axis=-1)
    k = np.arange(n // 2 + 1, dtype=float)
    if order == 1:
        fh = fh * (1j * k)
        fh[..., -1] = 0.0  # the sine Nyquist mode is not representable
    elif order == 2:
        fh = fh * (-(k**2))
    else:
        raise ValueError("order must be 1 or 2")
    return np.fft.irfft(fh, n, axis=-1)


def translate_values(f: np.ndarray, shift, n: int):
    """(T_s f)(theta) = f(theta - s) by Fourier phase shift.

    `shift` may be a scalar or an array broadcastable against f's batch
    shape; exact for band-limited fields.  The Nyquist coefficient is
    attenuated by cos(k_N s), the projection of the shifted mode back onto
    the representable subspace.
    """
    fh = np.fft.rfft(f, axis=-1)
    k = np.arange(n // 2 + 1, dtype=float)
    s = np.asarray(shift, dtype=float)[..., None]
    phase = np.exp(-1j * k * s)
    phase[..., -1] = np.cos(k[-1] * s[..., 0])
    return np.fft.irfft(fh * phase, n, axis=-1)


# ---------------------------------------------------------------------------
# Field-level operations

def inner_product(f: Field, g: Field) -> float:
    """<f, g> under the uniform rectangle rule (spectrally accurate)."""
    _check_same_grid(f, g)
    return float(inner_product_values(f.values, g.values, f.grid.spacing))


def convolve(kernel: Field, f: Field) -> Field:
    """(kernel * f)(theta_j) = spacing * sum_k kernel(theta_j - theta_k) f_k."""
    _check_same_grid(kernel, f)
    n = f.grid.n_points
    out = convolve_values(kernel_hat(kernel.values, n), f.values, n, f.grid.spacing)
    return Field(f.grid, out)


def differentiate(f: Field, order: int = 1) -> Field:
    """Spectral d/dtheta (order 1) or d^2/dtheta^2 (order 2)."""
    return Field(f.grid, differentiate_values(f.values, f.grid.n_points, order))


def translate(f: Field, shift: float) -> Field:
    """Shift the field: translate(f, s)(theta) = f(theta - s)."""
    return Field(f.grid, translate_values(f.values, float(shift), f.grid.n_points))


def field_to_csv_row(f: Field) -> str:
    """One CSV row with the n_points node values."""
    return ",".join(f"{v:.17g}" for v in f.values)


def field_from_csv_row(grid: Grid, row: str) -> Field:
    vals = np.array([float(tok) for tok in row.strip().split(",")])
    return Field(grid, vals)

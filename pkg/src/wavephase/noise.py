"""Trace-class spatial noise in the real Fourier basis, with reproducible streams.

The noise operator acts diagonally on the orthonormal basis
{1/sqrt(2 pi), cos(k theta)/sqrt(pi), sin(k theta)/sqrt(pi)} with one
amplitude per wavenumber (cosine and sine share it), optionally multiplied
pointwise by a state-dependent gain g(u) and by a fixed spatial window.
The fixed window is what pins the noise in space: a state-dependent gain
alone leaves the law of the forcing translation-equivariant.

Increment streams are counter-based (Philox) and keyed by
(seed, trajectory_id), so parallel trajectories never share generator state
and replaying a trajectory's increments never requires storing them.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .grid import Field, Grid


def _mix64(x: int) -> int:
    """SplitMix64 finalizer; full avalanche on 64-bit words."""
    x = (x + 0x9E3779B97F4A7C15) % (1 << 64)
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) % (1 << 64)
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) % (1 << 64)
    return x ^ (x >> 31)


def stream_key(seed: int, trajectory_id: int, tag: int = 0) -> int:
    """128-bit Philox key derived by hashing (seed, tag, trajectory_id)."""
    h1 = _mix64(_mix64(seed % (1 << 64)) ^ _mix64(tag % (1 << 64)))
    h2 = _mix64(h1 ^ _mix64(trajectory_id % (1 << 64)))
    return (h1 << 64) | h2


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Fourier-diagonal noise operator with optional gain and pinned window.

    mode_amps[k] is the amplitude of wavenumber k (k = 0 is the constant
    mode), so the basis has 2*K + 1 elements for K = len(mode_amps) - 1.
    gain is one of "none", "sigmoid" (params (scale, center)) or "affine"
    (params (a, c), giving a + c*u), applied pointwise to the state.
    window, if given, is a fixed field w(theta) multiplying the forcing.
    """

    grid: Grid
    mode_amps: np.ndarray
    gain: str = "none"
    gain_params: tuple = ()
    window: Optional[np.ndarray] = None
    seed: int = 0
    basis: np.ndarray = field(init=False, repr=False)
    basis_amps: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        amps = np.asarray(self.mode_amps, dtype=float)
        if amps.ndim != 1 or len(amps) < 1:
            raise ValueError("mode_amps must be a non-empty 1-d array")
        K = len(amps) - 1
        if K > self.grid.n_points // 2 - 1:
            raise ValueError("max wavenumber must be <= n_points/2 - 1")
        if self.gain not in ("none", "sigmoid", "affine"):
            raise ValueError(f"unknown gain kind {self.gain!r}")
        object.__setattr__(self, "mode_amps", amps)
        if self.window is not None:
            w = np.asarray(self.window, dtype=float)
            if w.shape != (self.grid.n_points,):
                raise ValueError("window must be sampled on the grid")
            object.__setattr__(self, "window", w)

        theta = self.grid.theta
        rows = [np.full(self.grid.n_points, 1.0 / np.sqrt(2.0 * np.pi))]
        basis_amps = [amps[0]]
        for k in range(1, K + 1):
            rows.append(np.cos(k * theta) / np.sqrt(np.pi))
            rows.append(np.sin(k * theta) / np.sqrt(np.pi))
            basis_amps.extend([amps[k], amps[k]])
        object.__setattr__(self, "basis", np.array(rows))
        object.__setattr__(self, "basis_amps", np.array(basis_amps))

    @property
    def n_modes(self) -> int:
        return self.basis.shape[0]

    def multiplier(self, u: np.ndarray) -> np.ndarray:
        """Combined pointwise factor g(u(theta)) * window(theta)."""
        if self.gain == "none":
            m = np.ones_like(u)
        elif self.gain == "sigmoid":
            scale, center = self.gain_params
            m = expit(scale * (u - center))
        else:
            a, c = self.gain_params
            m = a + c * u
        if self.window is not None:
            m = m * self.window
        return m

    def trace(self, u: np.ndarray) -> float:
        """sum_j <e_j, B(u) e_j>, finite by construction (trace class)."""
        m = self.multiplier(u)
        return float(np.sum(self.basis_amps * inner_rows(self.basis, m * self.basis, self.grid.spacing)))

    def covariance_matrix(self, u: np.ndarray) -> np.ndarray:
        """Spatial covariance kernel sum_j amp_j^2 (m e_j)(theta) (m e_j)(theta')."""
        m = self.multiplier(u)
        rows = (self.basis_amps[:, None] * self.basis) * m[None, :]
        return rows.T @ rows


def inner_rows(rows_a: np.ndarray, rows_b: np.ndarray, spacing: float) -> np.ndarray:
    return spacing * np.sum(rows_a * rows_b, axis=-1)


@dataclass(frozen=True, eq=False)
class WienerIncrement:
    """Coefficients of one Brownian increment against the noise basis."""

    coeffs: np.ndarray


def apply_increment(noise: NoiseModel, u: Field, incr: WienerIncrement) -> Field:
    """B(u) applied to the increment: g(u) w sum_j amp_j xi_j e_j."""
    vals = apply_increment_values(noise, u.values, np.asarray(incr.coeffs))
    return Field(u.grid, vals)


def apply_increment_values(noise: NoiseModel, u: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    base = (coeffs * noise.basis_amps) @ noise.basis
    return noise.multiplier(u) * base


def adjoint_coords(noise: NoiseModel, u: Field, w: Field) -> np.ndarray:
    """Coordinates <B(u) e_j, w> for j = 0..2K; the adjoint pairing
    <B* w1, B* w2> is the dot product of two such vectors."""
    return adjoint_coords_values(noise, u.values, w.values)


def adjoint_coords_values(noise: NoiseModel, u: np.ndarray, w: np.ndarray) -> np.ndarray:
    weighted = noise.grid.spacing * noise.multiplier(u) * w
    return noise.basis_amps * (weighted @ noise.basis.T)


def rotate_coeffs(noise: NoiseModel, coeffs: np.ndarray, shift: float) -> np.ndarray:
    """Basis coefficients of the translated increment field.

    If X = sum_j xi_j amp_j e_j then T_shift X has coefficients given by a
    rotation within each (cos, sin) pair; requires shared amplitudes.
    """
    out = np.array(coeffs, dtype=float, copy=True)
    K = (noise.n_modes - 1) // 2
    for k in range(1, K + 1):
        c, s = np.cos(k * shift), np.sin(k * shift)
        a = coeffs[..., 2 * k - 1]
        b = coeffs[..., 2 * k]
        out[..., 2 * k - 1] = c * a - s * b
        out[..., 2 * k] = s * a + c * b
    return out


class WienerStream:
    """Reproducible increment stream for one trajectory.

    Increments at consecutive steps are sums of `substeps` sub-draws with
    variance dt/substeps each, so a run at (dt, substeps=2) and one at
    (dt/2, substeps=1) share the same underlying Brownian path.
    """

    def __init__(self, noise: NoiseModel, trajectory_id: int, substeps: int = 1, tag: int = 0):
        if substeps < 1:
            raise ValueError("substeps must be >= 1")
        self.n_modes = noise.n_modes
        self.substeps = substeps
        self.key = stream_key(noise.seed, trajectory_id, tag)
        self._gen = np.random.Generator(np.random.Philox(key=self.key))

    def block(self, n_steps: int, dt: float) -> np.ndarray:
        """The next n_steps increments, shape (n_steps, n_modes)."""
        z = self._gen.standard_normal((n_steps * self.substeps, self.n_modes))
        z = z.reshape(n_steps, self.substeps, self.n_modes).sum(axis=1)
        return z * np.sqrt(dt / self.substeps)

    def next_increment(self, dt: float) -> WienerIncrement:
        return WienerIncrement(self.block(1, dt)[0])

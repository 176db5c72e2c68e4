"""Variational phase: exact orthogonality solve and its stochastic dynamics.

The phase beta is defined by <u - phi_beta, psi_beta> = 0.  Solvability is
controlled by the scalar mass matrix M = 1 - <u - phi_beta, psi'_beta>; the
solve is abandoned (stopping time) when M drops below a determinant floor.
The drift and diffusion coefficients of the phase SDE are assembled from
adjoint pairings with the noise operator and the quadratic Taylor remainder
of the nonlinearity.

Everything here is specialized to a one-dimensional phase (the ring bump).
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import PhaseUndefinedError
from .grid import Field, convolve_values, inner_product_values, norm_values, translate_values
from .model import ManifoldAtlas, RingModelParams, _kernel_hat, firing_rate, firing_rate_deriv
from .noise import NoiseModel, adjoint_coords_values
from .sim import Trajectory, replay_increments

DET_FLOOR = 0.25  # stop well before the mass matrix becomes singular
NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 30


@dataclass
class PhaseState:
    beta: float  # unwrapped (lifted to the real line)
    det_M: float
    amp_norm: float
    stopped: bool = False


@dataclass
class PhaseSDECoeffs:
    V: float                 # drift
    Y_coords: np.ndarray     # diffusion row against the noise basis (times eps outside)
    quad_var: float          # d beta d beta rate
    V_uncancelled: float     # drift with the <v, L* psi> term kept explicitly


class PhaseTables:
    """Cached rffts of the atlas fields for batched translation."""

    def __init__(self, atlas: ManifoldAtlas):
        self.atlas = atlas
        self.n = atlas.grid.n_points
        self.spacing = atlas.grid.spacing
        names = ("profile", "profile_deriv", "profile_deriv2",
                 "adjoint", "adjoint_deriv", "adjoint_deriv2")
        self._hat = {name: np.fft.rfft(getattr(atlas, name).values) for name in names}
        self._k = np.arange(self.n // 2 + 1, dtype=float)

    def at(self, name: str, shifts) -> np.ndarray:
        """Field `name` translated to each shift; shape (B, n) for array input."""
        s = np.asarray(shifts, dtype=float)[..., None]
        phase = np.exp(-1j * self._k * s)
        phase[..., -1] = np.cos(self._k[-1] * s[..., 0])
        return np.fft.irfft(self._hat[name] * phase, self.n, axis=-1)


def orthogonality_residual_values(u: np.ndarray, beta, tables: PhaseTables):
    """G(u, beta) = <u - phi_beta, psi_beta>, batched."""
    phi = tables.at("profile", beta)
    psi = tables.at("adjoint", beta)
    return inner_product_values(u - phi, psi, tables.spacing)


def orthogonality_residual(u: Field, beta: float, atlas: ManifoldAtlas) -> float:
    return float(orthogonality_residual_values(u.values, float(beta), PhaseTables(atlas)))


@dataclass
class MassMatrix:
    M: float
    det: float
    N: float          # inverse
    stopped: bool


def mass_matrix_values(u: np.ndarray, beta, tables: PhaseTables):
    """M = 1 - <u - phi_beta, psi'_beta>, batched; det = M for m = 1."""
    phi = tables.at("profile", beta)
    psi1 = tables.at("adjoint_deriv", beta)
    return 1.0 - inner_product_values(u - phi, psi1, tables.spacing)


def mass_matrix(u: Field, beta: float, atlas: ManifoldAtlas,
                det_floor: float = DET_FLOOR) -> MassMatrix:
    m = float(mass_matrix_values(u.values, float(beta), PhaseTables(atlas)))
    stopped = m < det_floor
    return MassMatrix(M=m, det=m, N=np.inf if m == 0 else 1.0 / m, stopped=stopped)


def newton_phase(u: Field, beta_guess: float, atlas: ManifoldAtlas,
                 tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER,
                 det_floor: float = DET_FLOOR) -> float:
    """Solve G(u, beta) = 0 by Newton iteration, continuous with the guess."""
    tables = PhaseTables(atlas)
    beta = float(beta_guess)
    for _ in range(max_iter):
        g = float(orthogonality_residual_values(u.values, beta, tables))
        if abs(g) < tol:
            return beta
        m = float(mass_matrix_values(u.values, beta, tables))
        if m < det_floor:
            raise PhaseUndefinedError(f"phase undefined: mass matrix {m:.3f} below floor")
        beta = beta + g / m
    raise PhaseUndefinedError(f"phase undefined: Newton did not converge (|G|={abs(g):.2e})")


def newton_phase_batch(u: np.ndarray, beta_guess: np.ndarray, tables: PhaseTables,
                       tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER,
                       det_floor: float = DET_FLOOR):
    """Vectorized Newton solve; returns (beta, ok) with ok False where the
    solve failed (not converged or below the determinant floor)."""
    beta = np.array(beta_guess, dtype=float)
    ok = np.ones(beta.shape, dtype=bool)
    active = np.ones(beta.shape, dtype=bool)
    for _ in range(max_iter):
        g = orthogonality_residual_values(u, beta, tables)
        active = ok & (np.abs(g) >= tol)
        if not np.any(active):
            return beta, ok
        m = mass_matrix_values(u, beta, tables)
        bad = active & (m < det_floor)
        ok[bad] = False
        active &= ~bad
        beta[active] += (g / m)[active]
    g = orthogonality_residual_values(u, beta, tables)
    ok &= np.abs(g) < tol
    return beta, ok


def taylor_remainder_pairing(u: np.ndarray, beta, tables: PhaseTables,
                             params: RingModelParams):
    """<f(u) - f(phi_beta) - Df(phi_beta)(u - phi_beta), psi_beta>, batched."""
    atlas = tables.atlas
    n, spacing = tables.n, tables.spacing
    kh = _kernel_hat(params, atlas.grid)
    phi = tables.at("profile", beta)
    psi = tables.at("adjoint", beta)
    v = u - phi
    inner = firing_rate(params, u) - firing_rate(params, phi) - firing_rate_deriv(params, phi) * v
    rem = convolve_values(kh, inner, n, spacing)
    return inner_product_values(rem, psi, spacing)


def sde_coeffs(u: Field, beta: float, atlas: ManifoldAtlas, noise: NoiseModel,
               epsilon: float, params: RingModelParams,
               det_floor: float = DET_FLOOR) -> PhaseSDECoeffs:
    """Drift, diffusion row, and quadratic variation of the phase SDE at (u, beta)."""
    tables = PhaseTables(atlas)
    out = sde_coeffs_values(u.values, np.array([float(beta)]), tables, noise, epsilon, params,
                            det_floor=det_floor, batched=False)
    return out


def sde_coeffs_values(u: np.ndarray, beta: np.ndarray, tables: PhaseTables,
                      noise: NoiseModel, epsilon: float, params: RingModelParams,
                      det_floor: float = DET_FLOOR, batched: bool = True):
    """Batched coefficient assembly; with batched=False expects a single row
    wrapped as shape (n,) state and returns a PhaseSDECoeffs."""
    single = not batched
    if single:
        u = u[None, :]
    spacing = tables.spacing

    m = mass_matrix_values(u, beta, tables)
    if np.any(m < det_floor):
        if single:
            raise PhaseUndefinedError("phase undefined: mass matrix below floor")
    ninv = 1.0 / m

    psi = tables.at("adjoint", beta)
    psi1 = tables.at("adjoint_deriv", beta)
    psi11 = tables.at("adjoint_deriv2", beta)

    a = adjoint_coords_values(noise, u, psi)       # <B(u) e_j, psi_beta>
    a1 = adjoint_coords_values(noise, u, psi1)
    bb = np.sum(a * a, axis=-1)                    # <B* psi, B* psi>
    bb1 = np.sum(a * a1, axis=-1)                  # <B* psi, B* psi'>

    quad_var = epsilon**2 * ninv**2 * bb
    u_psi11 = inner_product_values(u, psi11, spacing)
    rem = taylor_remainder_pairing(u, beta, tables, params)

    V = ninv * (epsilon**2 * ninv * bb1
                + 0.5 * epsilon**2 * u_psi11 * ninv**2 * bb
                + rem)

    # uncancelled form: <u - phi, A* psi> + <f(u) - f(phi), psi> with A* = -I
    phi = tables.at("profile", beta)
    v = u - phi
    kh = _kernel_hat(params, tables.atlas.grid)
    df = convolve_values(kh, firing_rate(params, u) - firing_rate(params, phi),
                         tables.n, spacing)
    direct = -inner_product_values(v, psi, spacing) + inner_product_values(df, psi, spacing)
    V0 = ninv * (epsilon**2 * ninv * bb1
                 + 0.5 * epsilon**2 * u_psi11 * ninv**2 * bb
                 + direct)

    Y = ninv[..., None] * a
    if single:
        return PhaseSDECoeffs(V=float(V[0]), Y_coords=Y[0],
                              quad_var=float(quad_var[0]), V_uncancelled=float(V0[0]))
    return V, Y, quad_var, V0


@dataclass
class PhasePath:
    times: np.ndarray
    beta_newton: np.ndarray
    beta_sde: np.ndarray
    det_M: np.ndarray
    amp_norm: np.ndarray
    stopped_at: Optional[float]
    max_dev: float


def integrate_phase_sde(traj: Trajectory, atlas: ManifoldAtlas, noise: NoiseModel,
                        epsilon: float, params: RingModelParams) -> PhasePath:
    """Euler-Maruyama for d beta = V dt + eps Y dW, replaying the trajectory's
    own increments, alongside the independent Newton phase solve.

    The trajectory must have been saved at every step (save_stride = 1) so
    coefficients can be evaluated on the exact simulated states.
    """
    if traj.config.save_stride != 1:
        raise ValueError("integrate_phase_sde needs a save_stride=1 trajectory")
    tables = PhaseTables(atlas)
    xi = replay_increments(traj.config, noise, traj.trajectory_id)
    dt = traj.config.dt
    n_steps = len(traj.times) - 1

    beta_n = np.empty(n_steps + 1)
    beta_s = np.empty(n_steps + 1)
    det = np.empty(n_steps + 1)
    amp = np.empty(n_steps + 1)
    beta_n[0] = beta_s[0] = traj.config.initial_phase
    det[0] = float(mass_matrix_values(traj.states[0][None, :], np.array([beta_n[0]]), tables)[0])
    amp[0] = 0.0
    stopped_at = None

    for k in range(n_steps):
        u_k = traj.states[k]
        V, Y, _, _ = sde_coeffs_values(u_k[None, :], np.array([beta_s[k]]), tables,
                                       noise, epsilon, params)
        beta_s[k + 1] = beta_s[k] + V[0] * dt + epsilon * float(Y[0] @ xi[k])

        u_next = traj.states[k + 1]
        b, ok = newton_phase_batch(u_next[None, :], np.array([beta_n[k]]), tables)
        if not ok[0]:
            stopped_at = traj.times[k + 1]
            beta_n[k + 1:] = beta_n[k]
            beta_s[k + 2:] = beta_s[k + 1]
            det[k + 1:] = det[k]
            amp[k + 1:] = amp[k]
            n_steps = k + 1
            break
        beta_n[k + 1] = b[0]
        det[k + 1] = float(mass_matrix_values(u_next[None, :], b, tables)[0])
        amp[k + 1] = float(norm_values(
            u_next - translate_values(atlas.profile.values, b[0], tables.n), tables.spacing))

    upto = n_steps + 1
    max_dev = float(np.max(np.abs(beta_s[:upto] - beta_n[:upto])))
    return PhasePath(times=traj.times, beta_newton=beta_n, beta_sde=beta_s,
                     det_M=det, amp_norm=amp, stopped_at=stopped_at, max_dev=max_dev)

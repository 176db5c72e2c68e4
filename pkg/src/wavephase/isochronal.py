"""Isochronal phase: flow-to-manifold map, its derivative approximations,
and the induced drift/diffusion of the phase on the circle.

The isochronal phase of a state u is the phase of the bump the noise-free
flow relaxes to.  Its first and second derivatives along noise directions
admit on-manifold approximations built from the adjoint basis plus a time
integral of the second derivative of the nonlinearity along the linearized
flow; those assemble into the phase-law coefficients (drift, diffusion,
quadratic-variation correction) used by the long-time statistics module.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import BasinExitError, DegeneratePhaseDiffusionError
from .grid import (
    Field,
    convolve_values,
    inner_product_values,
    norm_values,
    translate_values,
)
from .model import (
    ManifoldAtlas,
    RingModelParams,
    _kernel_hat,
    connectivity_matrix,
    firing_rate,
    firing_rate_deriv,
    project_transverse_values,
)
from .noise import NoiseModel, adjoint_coords_values
from .sim import Trajectory, replay_increments
from .variational import PhaseTables, newton_phase_batch

ISO_TOL = 1e-9
FLOW_DT = 1e-2


@dataclass
class IsochronResult:
    gamma: float
    flow_time: float
    converged: bool


def flow_rhs(params: RingModelParams, kernel_hat: np.ndarray, u: np.ndarray,
             n: int, spacing: float) -> np.ndarray:
    return -u + convolve_values(kernel_hat, firing_rate(params, u), n, spacing)


def _rk4_step(params, kernel_hat, u, dt, n, spacing):
    k1 = flow_rhs(params, kernel_hat, u, n, spacing)
    k2 = flow_rhs(params, kernel_hat, u + 0.5 * dt * k1, n, spacing)
    k3 = flow_rhs(params, kernel_hat, u + 0.5 * dt * k2, n, spacing)
    k4 = flow_rhs(params, kernel_hat, u + dt * k3, n, spacing)
    return u + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def deterministic_flow(u: Field, params: RingModelParams, t_end: float,
                       dt: float = FLOW_DT) -> Field:
    """Integrate the noise-free dynamics for t_end with RK4."""
    g = u.grid
    kh = _kernel_hat(params, g)
    vals = u.values.copy()
    for _ in range(int(round(t_end / dt))):
        vals = _rk4_step(params, kh, vals, dt, g.n_points, g.spacing)
    return Field(g, vals)


def isochronal_phase(u: Field, atlas: ManifoldAtlas, params: RingModelParams,
                     iso_tol: float = ISO_TOL, t_max: Optional[float] = None,
                     dt: float = FLOW_DT, branch_guess: Optional[float] = None) -> IsochronResult:
    """Flow u under the noise-free dynamics until it lands on the manifold;
    the phase of the landing point is the isochronal phase.

    branch_guess selects the 2 pi branch the returned phase is continuous
    with (defaults to the variational phase of u itself).
    """
    if t_max is None:
        t_max = 40.0 / atlas.gap_b
    g = atlas.grid
    n, spacing = g.n_points, g.spacing
    kh = _kernel_hat(params, g)
    tables = PhaseTables(atlas)
    vals = u.values.copy()

    beta = np.array([0.0 if branch_guess is None else float(branch_guess)])
    if branch_guess is None:
        # mode-1 angle of U(. - s) is -s: a serviceable phase guess
        c1 = np.sum(vals * np.exp(-1j * g.theta))
        beta = np.array([-float(np.angle(c1))])
    beta, ok = newton_phase_batch(vals[None, :], beta, tables)
    if not ok[0]:
        raise BasinExitError("left basin: no variational phase at the initial state")

    t = 0.0
    check_every = 5
    steps = 0
    while t < t_max:
        vals = _rk4_step(params, kh, vals, dt, n, spacing)
        t += dt
        steps += 1
        if steps % check_every:
            continue
        beta, ok = newton_phase_batch(vals[None, :], beta, tables)
        if not ok[0]:
            raise BasinExitError("left basin: phase solve failed along the flow")
        amp = float(norm_values(
            vals - translate_values(atlas.profile.values, beta[0], n), spacing))
        if amp < iso_tol:
            return IsochronResult(gamma=float(beta[0]), flow_time=t, converged=True)
    raise BasinExitError(f"left basin: flow did not relax within t_max={t_max:.3g}")


def dtheta_approx(alpha: float, w: Field, atlas: ManifoldAtlas) -> float:
    """On-manifold first derivative of the isochron map: <psi_alpha, w>."""
    psi_a = translate_values(atlas.adjoint.values, float(alpha), atlas.grid.n_points)
    return float(inner_product_values(psi_a, w.values, atlas.grid.spacing))


def _qv_weights(atlas: ManifoldAtlas, params: RingModelParams) -> np.ndarray:
    """Pointwise weights q with <psi, J*(F''(U) y^2)> = sum_l q_l y_l^2."""
    C = connectivity_matrix(params, atlas.grid)
    return atlas.grid.spacing * (C.T @ atlas.adjoint.values) * \
        firing_rate_deriv(params, atlas.profile.values, 2)


def second_derivative_integral(w0: np.ndarray, atlas: ManifoldAtlas,
                               params: RingModelParams, t_cut: float,
                               dt: float = FLOW_DT) -> float:
    """integral_0^{t_cut} <psi, D2f(phi) (V(s) w0) (V(s) w0)> ds at phase 0,
    by evolving the transverse projection of w0 under the linearized flow."""
    L = atlas.lin_matrix
    q = _qv_weights(atlas, params)
    y = project_transverse_values(atlas, np.asarray(w0, dtype=float))
    n_steps = int(round(t_cut / dt))
    total = 0.5 * float(q @ (y * y))
    for i in range(n_steps):
        k1 = L @ y
        k2 = L @ (y + 0.5 * dt * k1)
        k3 = L @ (y + 0.5 * dt * k2)
        k4 = L @ (y + dt * k3)
        y = y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        weight = 0.5 if i == n_steps - 1 else 1.0
        total += weight * float(q @ (y * y))
    return total * dt


def d2theta_approx(alpha: float, w: Field, atlas: ManifoldAtlas,
                   params: RingModelParams, t_cut: Optional[float] = None,
                   dt: float = FLOW_DT) -> float:
    """On-manifold second derivative of the isochron map along w."""
    if t_cut is None:
        t_cut = 20.0 / atlas.gap_b
    n, spacing = atlas.grid.n_points, atlas.grid.spacing
    w0 = translate_values(w.values, -float(alpha), n)  # back to the reference frame
    psi_w = float(inner_product_values(atlas.adjoint.values, w0, spacing))
    psi1_w = float(inner_product_values(atlas.adjoint_deriv.values, w0, spacing))
    phi1_psi1 = float(inner_product_values(atlas.profile_deriv.values,
                                           atlas.adjoint_deriv.values, spacing))
    integral = second_derivative_integral(w0, atlas, params, t_cut, dt)
    return 2.0 * psi_w * psi1_w - phi1_psi1 * psi_w**2 + integral


# ---------------------------------------------------------------------------
# phase-law coefficients on a phase grid

@dataclass(eq=False)
class PhaseLawCoeffs:
    """Drift V_tilde, diffusion H, QV correction, and diffusion rows Y on a
    uniform phase grid over [-pi, pi)."""

    alphas: np.ndarray
    V_tilde: np.ndarray
    H: np.ndarray
    gamma_qv: np.ndarray
    Y_coords: np.ndarray  # (n_nodes, n_modes)

    def __post_init__(self):
        n_fine = 2048
        self._fine_x = -np.pi + 2 * np.pi * np.arange(n_fine + 1) / n_fine
        self._fine_V = _trig_resample_closed(self.V_tilde, n_fine)
        self._fine_H = _trig_resample_closed(self.H, n_fine)

    def drift_at(self, alpha):
        return _periodic_interp(alpha, self._fine_x, self._fine_V)

    def diffusion_at(self, alpha):
        return _periodic_interp(alpha, self._fine_x, self._fine_H)


def _trig_resample_closed(vals: np.ndarray, n_fine: int) -> np.ndarray:
    fine = np.fft.irfft(np.fft.rfft(vals), n_fine) * (n_fine / len(vals))
    return np.append(fine, fine[0])


def _periodic_interp(alpha, xs, ys):
    a = np.mod(np.asarray(alpha, dtype=float) + np.pi, 2 * np.pi) - np.pi
    return np.interp(a, xs, ys)


class _SpectralPropagator:
    """Eigendecomposition of the linearization, used to evaluate the
    quadratic-variation time integral in closed form."""

    def __init__(self, atlas: ManifoldAtlas, params: RingModelParams):
        lam, X = np.linalg.eig(atlas.lin_matrix)
        self.lam = lam
        self.X = X
        self.Xinv = np.linalg.inv(X)
        self.neutral = int(np.argmin(np.abs(lam)))
        q = _qv_weights(atlas, params)
        self.A = X.T @ (q[:, None] * X)

    def pair_integrals(self, t_cut: float) -> np.ndarray:
        s = self.lam[:, None] + self.lam[None, :]
        # s has negative real part away from the (projected-out) neutral mode
        small = np.abs(s) < 1e-12
        s_safe = np.where(small, 1.0, s)
        out = (np.exp(s * t_cut) - 1.0) / s_safe
        return np.where(small, t_cut, out)


def gamma_qv_spectral(atlas: ManifoldAtlas, noise: NoiseModel, params: RingModelParams,
                      alphas: np.ndarray, t_cut: float,
                      prop: Optional[_SpectralPropagator] = None) -> np.ndarray:
    """Gamma_QV(alpha) = 1/2 sum_j int_0^{t_cut} <psi, D2f(phi)(V(s) B e_j)^2> ds,
    evaluated in the reference frame via the eigendecomposition."""
    if prop is None:
        prop = _SpectralPropagator(atlas, params)
    I = prop.pair_integrals(t_cut)
    U = atlas.profile.values
    n = atlas.grid.n_points
    cols = (noise.basis_amps[None, :] * noise.basis.T)  # (n, J) amp-weighted modes
    gain0 = noise.multiplier(U) if noise.window is None else None
    out = np.empty(len(alphas))
    for i, a in enumerate(alphas):
        if noise.window is None:
            c = gain0
        else:
            # counter-rotate the pinned window; the mode rotation itself
            # drops out of the j-sum (orthogonal mixing of shared-amp pairs)
            base = NoiseModel(noise.grid, noise.mode_amps, noise.gain,
                              noise.gain_params, None, noise.seed).multiplier(U)
            c = base * translate_values(noise.window, -float(a), n)
        M = project_transverse_values(atlas, (c[:, None] * cols).T).T  # (n, J)
        D = prop.Xinv @ M
        D[prop.neutral, :] = 0.0
        G2 = D @ D.T
        out[i] = 0.5 * float(np.real(np.sum(prop.A * I * G2)))
    return out


def gamma_qv_timestep(atlas: ManifoldAtlas, noise: NoiseModel, params: RingModelParams,
                      alpha: float, t_cut: float, dt: float = FLOW_DT) -> float:
    """Reference evaluation of Gamma_QV by explicit time stepping (oracle)."""
    n = atlas.grid.n_points
    U = atlas.profile.values
    cols = (noise.basis_amps[None, :] * noise.basis.T)
    if noise.window is None:
        c = noise.multiplier(U)
    else:
        base = NoiseModel(noise.grid, noise.mode_amps, noise.gain,
                          noise.gain_params, None, noise.seed).multiplier(U)
        c = base * translate_values(noise.window, -float(alpha), n)
    modes = (c[:, None] * cols).T  # (J, n)
    total = 0.0
    for j in range(modes.shape[0]):
        total += second_derivative_integral(modes[j], atlas, params, t_cut, dt)
    return 0.5 * total


def phase_law_coeffs(atlas: ManifoldAtlas, noise: NoiseModel, params: RingModelParams,
                     phase_grid_size: int = 64, t_cut: Optional[float] = None) -> PhaseLawCoeffs:
    """Drift V_tilde, diffusion H, and QV correction on a uniform phase grid."""
    if t_cut is None:
        t_cut = 20.0 / atlas.gap_b
    n = atlas.grid.n_points
    spacing = atlas.grid.spacing
    alphas = -np.pi + 2 * np.pi * np.arange(phase_grid_size) / phase_grid_size

    phi1_psi1 = float(inner_product_values(atlas.profile_deriv.values,
                                           atlas.adjoint_deriv.values, spacing))
    V = np.empty(phase_grid_size)
    H = np.empty(phase_grid_size)
    Y = np.empty((phase_grid_size, noise.n_modes))
    for i, a in enumerate(alphas):
        phi_a = translate_values(atlas.profile.values, a, n)
        psi_a = translate_values(atlas.adjoint.values, a, n)
        psi1_a = translate_values(atlas.adjoint_deriv.values, a, n)
        coords = adjoint_coords_values(noise, phi_a, psi_a)
        coords1 = adjoint_coords_values(noise, phi_a, psi1_a)
        Y[i] = coords
        H[i] = float(coords @ coords)
        V[i] = float(coords @ coords1) - 0.5 * phi1_psi1 * H[i]

    gqv = gamma_qv_spectral(atlas, noise, params, alphas, t_cut)
    V = V + gqv

    if np.any(H <= 0):
        raise DegeneratePhaseDiffusionError("degenerate phase diffusion: H <= 0 on the grid")
    return PhaseLawCoeffs(alphas=alphas, V_tilde=V, H=H, gamma_qv=gqv, Y_coords=Y)


# ---------------------------------------------------------------------------
# isochronal phase along a simulated trajectory

@dataclass
class GammaPath:
    times: np.ndarray
    gamma_sde: np.ndarray
    check_times: np.ndarray
    gamma_direct: np.ndarray
    max_dev: float
    stopped_at: Optional[float]


def integrate_isochronal_sde(traj: Trajectory, atlas: ManifoldAtlas, noise: NoiseModel,
                             epsilon: float, params: RingModelParams,
                             coeffs: Optional[PhaseLawCoeffs] = None,
                             check_interval: Optional[float] = 1.0) -> GammaPath:
    """Euler-Maruyama for the isochronal phase along a stored trajectory,
    with the drift and diffusion evaluated by the on-manifold approximations
    at the current phase; optionally compares against periodically
    recomputed direct (flow-to-manifold) phases."""
    if traj.config.save_stride != 1:
        raise ValueError("integrate_isochronal_sde needs a save_stride=1 trajectory")
    if coeffs is None:
        coeffs = phase_law_coeffs(atlas, noise, params)
    tables = PhaseTables(atlas)
    xi = replay_increments(traj.config, noise, traj.trajectory_id)
    dt = traj.config.dt
    n_steps = len(traj.times) - 1
    grid = atlas.grid

    gamma = np.empty(n_steps + 1)
    # gamma_0 = Theta(u_0); for u_0 on the manifold this is the initial phase
    gamma[0] = traj.config.initial_phase
    check_every = None if check_interval is None else max(1, int(round(check_interval / dt)))
    check_t, check_g = [], []
    stopped_at = None
    max_dev = 0.0

    for k in range(n_steps):
        u_k = traj.states[k]
        psi_g = tables.at("adjoint", np.array([gamma[k]]))[0]
        a = adjoint_coords_values(noise, u_k, psi_g)
        drift = epsilon**2 * float(coeffs.drift_at(gamma[k]))
        gamma[k + 1] = gamma[k] + drift * dt + epsilon * float(a @ xi[k])

        if check_every is not None and (k + 1) % check_every == 0:
            try:
                res = isochronal_phase(Field(grid, traj.states[k + 1]), atlas, params,
                                       branch_guess=gamma[k + 1])
            except BasinExitError:
                stopped_at = traj.times[k + 1]
                gamma[k + 2:] = gamma[k + 1]
                break
            check_t.append(traj.times[k + 1])
            check_g.append(res.gamma)
            max_dev = max(max_dev, abs(gamma[k + 1] - res.gamma))

    return GammaPath(times=traj.times, gamma_sde=gamma,
                     check_times=np.array(check_t), gamma_direct=np.array(check_g),
                     max_dev=max_dev, stopped_at=stopped_at)

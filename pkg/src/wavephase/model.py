"""Ring neural-field model: drift, linearization, bump manifold, adjoint basis.

The model evolves du/dt = -u + J * F(u) on the ring, with connectivity
J(theta) = sum_n J_n cos(n theta) and sigmoid F(x) = 1/(1 + exp(-gain (x - threshold))).
The stationary bumps form a one-parameter family of translates; this module
constructs the profile, its derivatives with respect to the phase parameter,
the adjoint null eigenvector, and the spectral-gap constants.

Phase-derivative convention, fixed here and used everywhere: the family is
phi_alpha(theta) = U(theta - alpha), so d/dalpha phi_alpha = -U'(theta - alpha).
Stored derivative fields are alpha-derivatives, not theta-derivatives.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import (
    BumpNotFoundError,
    SpectralAssumptionError,
    StabilityAssumptionError,
    TrivialStateError,
)
from .grid import (
    Field,
    Grid,
    convolve_values,
    differentiate_values,
    inner_product,
    inner_product_values,
    kernel_hat,
    norm_values,
    translate_values,
)


@dataclass(frozen=True)
class RingModelParams:
    """Connectivity cosine coefficients (J_0, J_1, ...), sigmoid gain/threshold.

    The default set is a lateral-inhibition regime supporting a stable bump
    whose harmonic content is fully resolved at n_points = 128.
    """

    j_coeffs: tuple = (-1.0, 2.5)
    gain: float = 5.0
    threshold: float = 0.4
    tau: float = 1.0

    def __post_init__(self):
        if len(self.j_coeffs) == 0:
            raise ValueError("j_coeffs must be non-empty")
        if self.gain <= 0:
            raise ValueError("gain must be positive")
        if self.tau != 1.0:
            raise ValueError("tau is fixed to 1")


def firing_rate(params: RingModelParams, x):
    return expit(params.gain * (x - params.threshold))


def firing_rate_deriv(params: RingModelParams, x, order: int = 1):
    """Pointwise derivative of the sigmoid, orders 1..3."""
    s = firing_rate(params, x)
    g = params.gain
    if order == 1:
        return g * s * (1.0 - s)
    if order == 2:
        return g**2 * s * (1.0 - s) * (1.0 - 2.0 * s)
    if order == 3:
        return g**3 * s * (1.0 - s) * (1.0 - 6.0 * s + 6.0 * s**2)
    raise ValueError("order must be 1, 2 or 3")


def connectivity(params: RingModelParams, grid: Grid) -> Field:
    """The kernel J sampled on the grid."""
    theta = grid.theta
    vals = np.zeros(grid.n_points)
    for n, jn in enumerate(params.j_coeffs):
        vals += jn * np.cos(n * theta)
    return Field(grid, vals)


def connectivity_matrix(params: RingModelParams, grid: Grid) -> np.ndarray:
    """Dense quadrature matrix C with (C f)_j = spacing sum_k J(theta_j - theta_k) f_k."""
    theta = grid.theta
    dtheta = theta[:, None] - theta[None, :]
    C = np.zeros((grid.n_points, grid.n_points))
    for n, jn in enumerate(params.j_coeffs):
        C += jn * np.cos(n * dtheta)
    return grid.spacing * C


def _kernel_hat(params: RingModelParams, grid: Grid) -> np.ndarray:
    return kernel_hat(connectivity(params, grid).values, grid.n_points)


def drift_values(params, u, kernel_hat, n, spacing):
    return -u + convolve_values(kernel_hat, firing_rate(params, u), n, spacing)


def drift(params: RingModelParams, u: Field) -> Field:
    """Full right-hand side -u + J * F(u)."""
    g = u.grid
    vals = drift_values(params, u.values, _kernel_hat(params, g), g.n_points, g.spacing)
    return Field(g, vals)


def linearize(params: RingModelParams, u: Field, w: Field) -> Field:
    """Directional derivative of the drift at u: -w + J * (F'(u) w)."""
    g = u.grid
    kh = _kernel_hat(params, g)
    fw = firing_rate_deriv(params, u.values) * w.values
    return Field(g, -w.values + convolve_values(kh, fw, g.n_points, g.spacing))


def second_directional(params: RingModelParams, u: Field, w: Field) -> Field:
    """Second derivative of the nonlinearity along w: J * (F''(u) w^2)."""
    g = u.grid
    fw = firing_rate_deriv(params, u.values, 2) * w.values**2
    return Field(g, convolve_values(_kernel_hat(params, g), fw, g.n_points, g.spacing))


def third_directional(params: RingModelParams, u: Field, w: Field) -> Field:
    """Third derivative of the nonlinearity along w: J * (F'''(u) w^3)."""
    g = u.grid
    fw = firing_rate_deriv(params, u.values, 3) * w.values**3
    return Field(g, convolve_values(_kernel_hat(params, g), fw, g.n_points, g.spacing))


def solve_bump(params: RingModelParams, grid: Grid, max_iter: int = 200) -> Field:
    """Stationary bump profile U with -U + J*F(U) = 0, even and peaked at 0.

    Damped fixed-point iteration gives the initial guess, Newton polishes it,
    and the gauge freedom is removed by rotating the first Fourier mode's
    phase to zero.
    """
    n, spacing = grid.n_points, grid.spacing
    kh = _kernel_hat(params, grid)
    C = connectivity_matrix(params, grid)
    ident = np.eye(n)

    u = params.threshold + np.cos(grid.theta)
    for _ in range(3000):
        u_next = 0.8 * u + 0.2 * convolve_values(kh, firing_rate(params, u), n, spacing)
        if np.max(np.abs(u_next - u)) < 1e-10:
            u = u_next
            break
        u = u_next

    converged = False
    for _ in range(max_iter):
        r = drift_values(params, u, kh, n, spacing)
        if np.max(np.abs(r)) < 1e-13:
            converged = True
            break
        jac = -ident + C @ np.diag(firing_rate_deriv(params, u))
        u = u + np.linalg.solve(jac, -r)
    if not converged:
        res = float(norm_values(drift_values(params, u, kh, n, spacing), spacing))
        raise BumpNotFoundError(f"no bump found: Newton residual {res:.3e} after {max_iter} iterations")

    if np.max(u) - np.min(u) < 1e-8:
        raise TrivialStateError("trivial state: converged profile is constant in theta")

    # remove the translation gauge: zero the phase of the first Fourier mode
    # (u = U(. - s) has mode-1 angle -s, so translating by the angle recenters)
    c1 = np.sum(u * np.exp(-1j * grid.theta))
    u = translate_values(u, float(np.angle(c1)), n)
    for _ in range(8):
        r = drift_values(params, u, kh, n, spacing)
        if np.max(np.abs(r)) < 1e-14:
            break
        jac = -ident + C @ np.diag(firing_rate_deriv(params, u))
        u = u + np.linalg.solve(jac, -r)

    return Field(grid, u)


@dataclass(frozen=True, eq=False)
class ManifoldAtlas:
    """Bump manifold data at the reference phase 0, plus spectral constants.

    profile_deriv / adjoint_deriv are derivatives with respect to the phase
    parameter (= minus the theta-derivative); the second derivatives carry a
    plus sign.  adjoint is normalized so <adjoint, profile_deriv> = 1.
    """

    grid: Grid
    params: RingModelParams
    profile: Field
    profile_deriv: Field
    profile_deriv2: Field
    adjoint: Field
    adjoint_deriv: Field
    adjoint_deriv2: Field
    gap_b: float
    gap_c: float
    lin_matrix: np.ndarray = field(repr=False)  # dense discretized linearization

    def fields_at(self, alpha: float):
        """(phi, phi', phi'', psi, psi', psi'') translated to phase alpha."""
        return tuple(
            Field(self.grid, translate_values(f.values, float(alpha), self.grid.n_points))
            for f in (
                self.profile,
                self.profile_deriv,
                self.profile_deriv2,
                self.adjoint,
                self.adjoint_deriv,
                self.adjoint_deriv2,
            )
        )

    def kappa_bar(self) -> float:
        """Phase-solvability radius 1/(2 ||psi'||): inside it the mass matrix
        stays bounded away from zero."""
        return 1.0 / (2.0 * self.adjoint_deriv.norm())


def atlas_at(atlas: ManifoldAtlas, alpha: float):
    return atlas.fields_at(alpha)


def build_atlas(params: RingModelParams, bump: Field) -> ManifoldAtlas:
    """Derivative fields, adjoint null vector, and the spectral gap of the bump."""
    grid = bump.grid
    n, spacing = grid.n_points, grid.spacing
    U = bump.values

    dU = differentiate_values(U, n, 1)
    d2U = differentiate_values(U, n, 2)
    phi1 = -dU
    phi11 = d2U

    C = connectivity_matrix(params, grid)
    L = -np.eye(n) + C @ np.diag(firing_rate_deriv(params, U))

    # adjoint null vector by inverse iteration with shift 0
    w = dU / np.linalg.norm(dU)
    resid = np.inf
    for _ in range(100):
        w = np.linalg.solve(L.T, w)
        w = w / np.linalg.norm(w)
        resid = np.linalg.norm(L.T @ w)
        if resid < 1e-12:
            break

    eigvals = np.linalg.eigvals(L)
    near_zero = np.sum(np.abs(eigvals) < 1e-4)
    if near_zero != 1:
        raise SpectralAssumptionError(
            f"spectral assumption violated: {near_zero} eigenvalues within 1e-4 of 0"
        )
    real_sorted = np.sort(eigvals.real)[::-1]
    gap_b = -float(real_sorted[1])

    scale = inner_product_values(w, phi1, spacing)
    psi = w / scale
    psi1 = -differentiate_values(psi, n, 1)
    psi11 = differentiate_values(psi, n, 2)

    return ManifoldAtlas(
        grid=grid,
        params=params,
        profile=bump,
        profile_deriv=Field(grid, phi1),
        profile_deriv2=Field(grid, phi11),
        adjoint=Field(grid, psi),
        adjoint_deriv=Field(grid, psi1),
        adjoint_deriv2=Field(grid, psi11),
        gap_b=gap_b,
        gap_c=1.0,
        lin_matrix=L,
    )


def project_tangent_values(atlas: ManifoldAtlas, v: np.ndarray) -> np.ndarray:
    """P v = <psi, v> phi' at the reference phase."""
    c = inner_product_values(atlas.adjoint.values, v, atlas.grid.spacing)
    return np.multiply.outer(c, atlas.profile_deriv.values) if np.ndim(c) else c * atlas.profile_deriv.values


def project_transverse_values(atlas: ManifoldAtlas, v: np.ndarray) -> np.ndarray:
    return v - project_tangent_values(atlas, v)


def evolve_linearized(atlas: ManifoldAtlas, v0: np.ndarray, t_end: float, dt: float = 1e-2):
    """Integrate dv/dt = L v with RK4 on the dense discretization.

    Returns (times, states) with states of shape (n_times, ..., n).
    """
    L = atlas.lin_matrix
    n_steps = int(round(t_end / dt))
    v = np.array(v0, dtype=float)
    times = [0.0]
    states = [v.copy()]
    for i in range(n_steps):
        k1 = v @ L.T
        k2 = (v + 0.5 * dt * k1) @ L.T
        k3 = (v + 0.5 * dt * k2) @ L.T
        k4 = (v + dt * k3) @ L.T
        v = v + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        times.append((i + 1) * dt)
        states.append(v.copy())
    return np.array(times), np.array(states)


def estimate_semigroup_bound(atlas: ManifoldAtlas, params: RingModelParams,
                             n_probes: int = 6, t_end: float = None, seed: int = 0):
    """Fit the decay of transverse perturbations under the linearized flow.

    Random probes are projected off the neutral direction, evolved, and
    log ||v_t|| is fitted linearly; returns (b_est, c_est) with c_est the
    largest fitted prefactor exp(intercept)/||v_0||.
    """
    if t_end is None:
        t_end = 8.0 / atlas.gap_b
    spacing = atlas.grid.spacing
    rng = np.random.default_rng(seed)
    probes = project_transverse_values(
        atlas, rng.standard_normal((n_probes, atlas.grid.n_points))
    )
    times, states = evolve_linearized(atlas, probes, t_end, dt=min(1e-2, t_end / 200))
    norms = norm_values(states, spacing)  # (n_times, n_probes)
    if np.any(norms[-1] >= norms[0]):
        raise StabilityAssumptionError(
            "stability assumption violated: non-decaying transverse mode"
        )
    rates, prefactors = [], []
    for p in range(n_probes):
        slope, intercept = np.polyfit(times, np.log(norms[:, p]), 1)
        rates.append(-slope)
        prefactors.append(float(np.exp(intercept) / norms[0, p]))
    b_est = float(np.mean(rates))
    c_est = float(np.max(prefactors))
    return b_est, c_est

"""Long-time statistics: stationary/transition phase densities, occupation
histograms, noise-induced mean drift, and exit-probability scans.

The phase law (drift V, diffusion H on the circle) feeds a periodic
Fokker-Planck solve whose stationary density is the reference for occupation
histograms from simulated ensembles; the auxiliary one-dimensional process
with the same coefficients provides a cheap intermediate oracle between the
Fokker-Planck solution and the full field simulation.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm

from .ensemble import run_ensemble
from .errors import SolverInconsistencyError
from .isochronal import PhaseLawCoeffs, _periodic_interp, _trig_resample_closed
from .model import ManifoldAtlas, RingModelParams
from .noise import NoiseModel, WienerStream

AUX_STREAM_TAG = 0x41555831  # distinct key namespace for the 1-d process


@dataclass
class FPDensity:
    phase_nodes: np.ndarray   # uniform on [-pi, pi)
    density: np.ndarray
    flux: float               # stationary probability flux (nan for transients)

    @property
    def node_spacing(self) -> float:
        return 2.0 * np.pi / len(self.phase_nodes)

    def total_mass(self) -> float:
        return float(np.sum(self.density) * self.node_spacing)


def total_variation(p: FPDensity, q: FPDensity) -> float:
    if len(p.phase_nodes) != len(q.phase_nodes):
        raise ValueError("densities live on different grids")
    return 0.5 * float(np.sum(np.abs(p.density - q.density)) * p.node_spacing)


def _coeff_tables(coeffs: PhaseLawCoeffs, n_grid: int):
    """Drift and diffusion trig-resampled onto the closed solver grid."""
    a = _trig_resample_closed(coeffs.V_tilde, n_grid)
    D = 0.5 * _trig_resample_closed(coeffs.H, n_grid)
    if np.any(D <= 0):
        raise ValueError("diffusion must be positive")
    return a, D


def stationary_density(coeffs: PhaseLawCoeffs, n_grid: int = 256,
                       tol: float = 1e-6) -> FPDensity:
    """Stationary periodic Fokker-Planck density by the constant-flux
    construction, cross-checked against a spectral null-space solve.

    For the flux construction write q = D p; then q' = (a/D) q - J with
    constant flux J fixed by periodicity, and the quadrature is carried out
    on a trigonometrically upsampled closed grid.
    """
    refine = 16  # trapezoid error is O(h^2); refine so it clears the tol
    n_fine = refine * n_grid
    h = 2 * np.pi / n_fine
    a, D = _coeff_tables(coeffs, n_fine)

    ratio = a / D
    psi = np.concatenate([[0.0], np.cumsum(0.5 * (ratio[1:] + ratio[:-1]) * h)])
    psi_T = psi[-1]
    c1 = psi.max()
    e_plus = np.exp(psi - c1)
    c2 = (-psi).max()
    e_minus = np.exp(-psi - c2)
    I_cum = np.concatenate([[0.0], np.cumsum(0.5 * (e_minus[1:] + e_minus[:-1]) * h)])
    I_T = I_cum[-1]
    # q(x) = e^{psi} [1 - (1 - e^{-psi_T}) I_cum / I_T], positive by construction
    q = e_plus * (1.0 - (-np.expm1(-psi_T)) * I_cum / I_T)
    p = q / D
    Z = float(np.sum(0.5 * (p[1:] + p[:-1]) * h))
    p = p / Z
    # q_raw(-pi) = 1 gives raw flux (1 - e^{-psi_T})/I_T_raw; undo the
    # overflow-centering factors and the normalization
    flux = float(-np.expm1(-psi_T) / (I_T * Z) * np.exp(-(c1 + c2)))

    x_nodes = -np.pi + 2 * np.pi * np.arange(n_grid) / n_grid
    p_sub = p[:-1:refine]
    p_sub = p_sub / (np.sum(p_sub) * 2 * np.pi / n_grid)  # rectangle-rule mass 1
    closed_form = FPDensity(phase_nodes=x_nodes, density=p_sub, flux=flux)

    spectral = _stationary_spectral(coeffs, n_grid)
    tv = total_variation(closed_form, spectral)
    if tv > tol:
        raise SolverInconsistencyError(
            f"FP solver inconsistency: closed-form vs spectral TV = {tv:.2e}")
    return closed_form


def _fp_operator(coeffs: PhaseLawCoeffs, n_grid: int) -> np.ndarray:
    """Dense Fokker-Planck generator -d/dx(a p) + d^2/dx^2 (D p) on the grid."""
    a, D = _coeff_tables(coeffs, n_grid)
    a, D = a[:-1], D[:-1]
    D1 = _spectral_diff_matrix(n_grid, 1)
    D2 = _spectral_diff_matrix(n_grid, 2)
    return -D1 @ np.diag(a) + D2 @ np.diag(D)


def _spectral_diff_matrix(n: int, order: int) -> np.ndarray:
    k = np.fft.fftfreq(n, d=1.0 / n)
    mult = (1j * k) ** order
    if order == 1:
        mult[n // 2] = 0.0
    F = np.fft.fft(np.eye(n), axis=0)
    return np.real(np.fft.ifft(mult[:, None] * F, axis=0))


def _stationary_spectral(coeffs: PhaseLawCoeffs, n_grid: int) -> FPDensity:
    A = _fp_operator(coeffs, n_grid)
    lam, vecs = np.linalg.eig(A)
    idx = int(np.argmin(np.abs(lam)))
    p = np.real(vecs[:, idx])
    h = 2 * np.pi / n_grid
    p = p / (np.sum(p) * h)
    if np.min(p) < -1e-8:
        p = -p
    p = np.maximum(p, 0.0)
    p = p / (np.sum(p) * h)
    x = -np.pi + h * np.arange(n_grid)
    return FPDensity(phase_nodes=x, density=p, flux=float("nan"))


def transition_density(coeffs: PhaseLawCoeffs, xi: float, t: float,
                       n_grid: int = 256, dt: float = 0.05,
                       return_mass_history: bool = False):
    """Evolve the Fokker-Planck density from a mollified point mass at xi.

    The delta initial condition is a wrapped Gaussian of width two node
    spacings; stepping uses the exponential of the dense spectral generator.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    h = 2 * np.pi / n_grid
    x = -np.pi + h * np.arange(n_grid)
    sigma = 2.0 * h
    p = np.zeros(n_grid)
    for wrap in range(-3, 4):
        p += np.exp(-0.5 * ((x - xi + 2 * np.pi * wrap) / sigma) ** 2)
    p = p / (np.sum(p) * h)

    n_steps = max(1, int(round(t / dt)))
    stepper = expm(_fp_operator(coeffs, n_grid) * (t / n_steps))
    masses = [float(np.sum(p) * h)]
    for _ in range(n_steps):
        p = stepper @ p
        masses.append(float(np.sum(p) * h))
    out = FPDensity(phase_nodes=x, density=p, flux=float("nan"))
    if return_mass_history:
        return out, np.array(masses)
    return out


# ---------------------------------------------------------------------------
# ensemble statistics

@dataclass
class OccupationHistogram:
    phase_nodes: np.ndarray   # bin centers
    density: np.ndarray
    stderr: np.ndarray
    n_trajectories: int

    @property
    def node_spacing(self) -> float:
        return 2.0 * np.pi / len(self.phase_nodes)


def occupation_histogram(phase_paths: np.ndarray, n_bins: int = 32) -> OccupationHistogram:
    """Pooled normalized histogram of the phases mod 2 pi, with batch-means
    standard errors across trajectories."""
    paths = np.atleast_2d(np.asarray(phase_paths, dtype=float))
    if paths.size == 0:
        raise ValueError("empty phase paths")
    wrapped = np.mod(paths + np.pi, 2 * np.pi) - np.pi
    edges = np.linspace(-np.pi, np.pi, n_bins + 1)
    width = 2 * np.pi / n_bins
    per_traj = np.stack([np.histogram(row, bins=edges)[0] / row.size for row in wrapped])
    dens = per_traj.mean(axis=0) / width
    B = paths.shape[0]
    stderr = per_traj.std(axis=0, ddof=1) / np.sqrt(B) / width if B > 1 else np.full(n_bins, np.nan)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return OccupationHistogram(phase_nodes=centers, density=dens, stderr=stderr,
                               n_trajectories=B)


def histogram_vs_density_tv(hist: OccupationHistogram, dens: FPDensity) -> float:
    """Total variation between binned histogram mass and the density's mass
    integrated over the same bins."""
    n_bins = len(hist.phase_nodes)
    edges = np.linspace(-np.pi, np.pi, n_bins + 1)
    x = np.append(dens.phase_nodes, np.pi)
    p = np.append(dens.density, dens.density[0])
    mass = np.empty(n_bins)
    fine = np.linspace(-np.pi, np.pi, 8 * len(x))
    pf = np.interp(fine, x, p)
    for i in range(n_bins):
        sel = (fine >= edges[i]) & (fine <= edges[i + 1])
        mass[i] = np.trapezoid(pf[sel], fine[sel])
    mass = mass / mass.sum()
    hist_mass = hist.density * hist.node_spacing
    hist_mass = hist_mass / hist_mass.sum()
    return 0.5 * float(np.abs(hist_mass - mass).sum())


@dataclass
class DriftEstimate:
    value: float
    stderr: float
    ci_low: float
    ci_high: float
    per_trajectory: np.ndarray


def mean_drift(phase_paths: np.ndarray, times: np.ndarray, epsilon: float) -> DriftEstimate:
    """Average phase speed per unit eps^2 time: (gamma_T - gamma_0)/(eps^2 T)."""
    paths = np.atleast_2d(np.asarray(phase_paths, dtype=float))
    T = float(times[-1] - times[0])
    per = (paths[:, -1] - paths[:, 0]) / (epsilon**2 * T)
    m = float(per.mean())
    se = float(per.std(ddof=1) / np.sqrt(len(per))) if len(per) > 1 else float("nan")
    return DriftEstimate(value=m, stderr=se, ci_low=m - 1.96 * se, ci_high=m + 1.96 * se,
                         per_trajectory=per)


def fp_mean_drift(coeffs: PhaseLawCoeffs, density: FPDensity) -> float:
    """Stationary average of the drift, integral of V_tilde against p_*."""
    V = _periodic_interp(density.phase_nodes, coeffs._fine_x, coeffs._fine_V)
    return float(np.sum(V * density.density) * density.node_spacing)


# ---------------------------------------------------------------------------
# auxiliary 1-d process with the phase-law coefficients

def simulate_aux_occupation(coeffs: PhaseLawCoeffs, noise: NoiseModel, t_end: float,
                            dt: float, n_traj: int, initial_phases,
                            save_stride: int = 10) -> tuple:
    """Euler-Maruyama for d y = V(y) dt + sum_j Y_j(y) dW_j (no epsilon).

    Returns (save_times, paths) with paths of shape (n_traj, n_saved).
    Streams use a dedicated key namespace so they never collide with field
    trajectories of the same id.
    """
    n_steps = int(round(t_end / dt))
    n_fine = coeffs._fine_x.size - 1
    Y_fine = np.stack([_trig_resample_closed(coeffs.Y_coords[:, j], n_fine)
                       for j in range(coeffs.Y_coords.shape[1])], axis=1)  # (n_fine+1, J)
    h_fine = 2 * np.pi / n_fine

    y = np.broadcast_to(np.asarray(initial_phases, dtype=float), (n_traj,)).copy()
    streams = [WienerStream(noise, i, tag=AUX_STREAM_TAG) for i in range(n_traj)]
    n_saved = n_steps // save_stride + 1
    rec = np.empty((n_traj, n_saved))
    rec[:, 0] = y
    saved = 1
    done = 0
    chunk = 4096
    while done < n_steps:
        m = min(chunk, n_steps - done)
        xi = np.empty((n_traj, m, noise.n_modes))
        for i, s in enumerate(streams):
            xi[i] = s.block(m, dt)
        for r in range(m):
            wrapped = np.mod(y + np.pi, 2 * np.pi) - np.pi
            pos = (wrapped + np.pi) / h_fine
            idx = np.minimum(pos.astype(int), n_fine - 1)
            frac = pos - idx
            Yv = Y_fine[idx] * (1 - frac)[:, None] + Y_fine[idx + 1] * frac[:, None]
            drift = coeffs.drift_at(y)
            y = y + drift * dt + np.sum(Yv * xi[:, r, :], axis=-1)
            k = done + r + 1
            if k % save_stride == 0:
                rec[:, saved] = y
                saved += 1
        done += m
    save_times = dt * save_stride * np.arange(n_saved)
    return save_times, rec


# ---------------------------------------------------------------------------
# exit probabilities

@dataclass
class ExitCell:
    epsilon: float
    kappa: float
    horizon: float
    n_trials: int
    n_exits: int
    p_hat: float
    wilson_low: float
    wilson_high: float


@dataclass
class ExitStats:
    cells: list
    slope: float        # fitted coefficient of kappa^2/eps^2 in log p_hat
    intercept: float
    r_squared: float


def wilson_interval(n_exits: int, n_trials: int, z: float = 1.96) -> tuple:
    if n_trials == 0:
        return (0.0, 1.0)
    p = n_exits / n_trials
    denom = 1 + z**2 / n_trials
    center = (p + z**2 / (2 * n_trials)) / denom
    half = z * np.sqrt(p * (1 - p) / n_trials + z**2 / (4 * n_trials**2)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


def exit_probability_experiment(params: RingModelParams, atlas: ManifoldAtlas,
                                noise: NoiseModel, epsilons: Sequence[float],
                                kappas: Sequence[float], horizon: float,
                                n_trials: int, dt: float = 1e-3,
                                initial_phase: float = 0.0, threads: int = 1,
                                trajectory_offset: int = 0) -> ExitStats:
    """Monte Carlo estimate of P(sup_{[0,T]} ||u - phi_beta|| > kappa).

    For each epsilon one ensemble is run and its per-trajectory running sup
    serves every kappa, which makes the monotonicity in kappa exact by
    construction (nested events on shared paths).
    """
    n_steps = int(round(horizon / dt))
    cells = []
    for ie, eps in enumerate(epsilons):
        ids = trajectory_offset + ie * n_trials + np.arange(n_trials)
        res = run_ensemble(params, atlas, noise, eps, dt, n_steps,
                           initial_phases=np.full(n_trials, initial_phase),
                           trajectory_ids=ids, save_stride=n_steps,
                           track_newton=True, threads=threads)
        sups = res.sup_amp
        for kappa in kappas:
            n_exits = int(np.sum(sups > kappa))
            lo, hi = wilson_interval(n_exits, n_trials)
            cells.append(ExitCell(epsilon=float(eps), kappa=float(kappa), horizon=horizon,
                                  n_trials=n_trials, n_exits=n_exits,
                                  p_hat=n_exits / n_trials, wilson_low=lo, wilson_high=hi))

    xs = np.array([c.kappa**2 / c.epsilon**2 for c in cells if 0 < c.p_hat < 1])
    ys = np.array([np.log(c.p_hat) for c in cells if 0 < c.p_hat < 1])
    if len(xs) >= 2:
        slope, intercept = np.polyfit(xs, ys, 1)
        resid = ys - (slope * xs + intercept)
        ss_tot = float(np.sum((ys - ys.mean())**2))
        r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else float("nan")
    else:
        slope = intercept = r2 = float("nan")
    return ExitStats(cells=cells, slope=float(slope), intercept=float(intercept),
                     r_squared=float(r2))

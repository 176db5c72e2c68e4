"""Vectorized trajectory ensembles for the exit and occupation experiments.

All trajectories of an ensemble advance together as a (B, n_points) array:
one batched exponential-Euler step, one batched Newton phase solve, one
batched isochronal-phase update per time step.  Increment streams stay
per-trajectory (counter-based, keyed by trajectory id), so results are
independent of batch composition and thread count.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grid import norm_values
from .isochronal import PhaseLawCoeffs
from .model import ManifoldAtlas, RingModelParams, _kernel_hat
from .noise import NoiseModel, WienerStream, adjoint_coords_values
from .sim import step_values
from .variational import PhaseTables, mass_matrix_values, newton_phase_batch, sde_coeffs_values

CHUNK_STEPS = 2048


@dataclass
class EnsembleResult:
    save_times: np.ndarray
    ok: np.ndarray                       # False where the phase solve failed
    sup_amp: Optional[np.ndarray] = None     # (B,) running sup of ||u - phi_beta||
    beta_newton: Optional[np.ndarray] = None  # (B, n_saved)
    beta_sde: Optional[np.ndarray] = None
    gamma: Optional[np.ndarray] = None
    final_states: Optional[np.ndarray] = None


def run_ensemble(params: RingModelParams, atlas: ManifoldAtlas, noise: NoiseModel,
                 epsilon: float, dt: float, n_steps: int,
                 initial_phases: np.ndarray, trajectory_ids: np.ndarray,
                 substeps: int = 1, save_stride: int = 1,
                 track_newton: bool = False, track_beta_sde: bool = False,
                 gamma_coeffs: Optional[PhaseLawCoeffs] = None,
                 health_every: int = 200, amp_limit: Optional[float] = None,
                 threads: int = 1, keep_final: bool = False) -> EnsembleResult:
    """Advance an ensemble and co-evolve the requested phase observers.

    track_newton solves the orthogonality phase every step (needed for the
    amplitude sup); track_beta_sde additionally integrates the variational
    phase SDE with the same increments; gamma_coeffs switches on the
    isochronal phase SDE.  amp_limit freezes (flags) members whose amplitude
    exceeds it.  Members whose phase solve fails are flagged not-ok and their
    running sup is set to infinity.
    """
    B = len(trajectory_ids)
    if threads > 1 and B > 1:
        n_chunks = min(threads, B)
        splits = np.array_split(np.arange(B), n_chunks)
        with ThreadPoolExecutor(max_workers=n_chunks) as pool:
            parts = list(pool.map(
                lambda idx: _run_block(params, atlas, noise, epsilon, dt, n_steps,
                                       np.asarray(initial_phases)[idx],
                                       np.asarray(trajectory_ids)[idx], substeps,
                                       save_stride, track_newton, track_beta_sde,
                                       gamma_coeffs, health_every, amp_limit, keep_final),
                splits))
        return _merge(parts)
    return _run_block(params, atlas, noise, epsilon, dt, n_steps,
                      np.asarray(initial_phases), np.asarray(trajectory_ids), substeps,
                      save_stride, track_newton, track_beta_sde, gamma_coeffs,
                      health_every, amp_limit, keep_final)


def _merge(parts):
    def cat(name):
        vals = [getattr(p, name) for p in parts]
        return None if vals[0] is None else np.concatenate(vals, axis=0)
    return EnsembleResult(save_times=parts[0].save_times, ok=cat("ok"),
                          sup_amp=cat("sup_amp"), beta_newton=cat("beta_newton"),
                          beta_sde=cat("beta_sde"), gamma=cat("gamma"),
                          final_states=cat("final_states"))


def _run_block(params, atlas, noise, epsilon, dt, n_steps, initial_phases,
               trajectory_ids, substeps, save_stride, track_newton, track_beta_sde,
               gamma_coeffs, health_every, amp_limit, keep_final):
    grid = atlas.grid
    n = grid.n_points
    spacing = grid.spacing
    B = len(trajectory_ids)
    kh = _kernel_hat(params, grid)
    tables = PhaseTables(atlas)

    phases0 = np.broadcast_to(np.asarray(initial_phases, dtype=float), (B,)).copy()
    u = tables.at("profile", phases0)
    ok = np.ones(B, dtype=bool)
    sup_amp = np.zeros(B) if (track_newton or amp_limit is not None) else None
    beta = phases0.copy()
    beta_sde = phases0.copy()
    gamma = phases0.copy()

    n_saved = n_steps // save_stride + 1
    rec_beta = np.empty((B, n_saved)) if track_newton else None
    rec_beta_sde = np.empty((B, n_saved)) if track_beta_sde else None
    rec_gamma = np.empty((B, n_saved)) if gamma_coeffs is not None else None
    save_times = dt * save_stride * np.arange(n_saved)
    for rec, vals in ((rec_beta, beta), (rec_beta_sde, beta_sde), (rec_gamma, gamma)):
        if rec is not None:
            rec[:, 0] = vals
    saved = 1

    streams = [WienerStream(noise, int(tid), substeps=substeps) for tid in trajectory_ids]
    need_newton = track_newton or track_beta_sde or amp_limit is not None
    profile_vals = atlas.profile.values

    done = 0
    while done < n_steps:
        m = min(CHUNK_STEPS, n_steps - done)
        xi = np.empty((B, m, noise.n_modes))
        for i, s in enumerate(streams):
            xi[i] = s.block(m, dt)
        for r in range(m):
            coeffs_r = xi[:, r, :]
            if track_beta_sde:
                V, Y, _, _ = sde_coeffs_values(u, beta_sde, tables, noise, epsilon, params)
                beta_sde = beta_sde + V * dt + epsilon * np.sum(Y * coeffs_r, axis=-1)
            if gamma_coeffs is not None:
                psi_g = tables.at("adjoint", gamma)
                a = adjoint_coords_values(noise, u, psi_g)
                drift = epsilon**2 * gamma_coeffs.drift_at(gamma)
                gamma = gamma + drift * dt + epsilon * np.sum(a * coeffs_r, axis=-1)

            u = step_values(u, dt, epsilon, noise, params, kh, coeffs_r)
            k = done + r + 1

            if need_newton and (track_newton or k % health_every == 0):
                beta_new, solved = newton_phase_batch(u, beta, tables)
                newly_bad = ok & ~solved
                if np.any(newly_bad):
                    ok[newly_bad] = False
                    if sup_amp is not None:
                        sup_amp[newly_bad] = np.inf
                beta = np.where(solved, beta_new, beta)
                if sup_amp is not None:
                    amp = norm_values(u - tables.at("profile", beta), spacing)
                    live = ok
                    sup_amp[live] = np.maximum(sup_amp[live], amp[live])
                    if amp_limit is not None:
                        over = live & (amp > amp_limit)
                        ok[over] = False
                        if sup_amp is not None:
                            sup_amp[over] = np.inf

            if k % save_stride == 0:
                for rec, vals in ((rec_beta, beta), (rec_beta_sde, beta_sde), (rec_gamma, gamma)):
                    if rec is not None:
                        rec[:, saved] = vals
                saved += 1
        done += m

    if not np.all(np.isfinite(u)):
        bad = ~np.all(np.isfinite(u), axis=-1)
        ok[bad] = False
    return EnsembleResult(save_times=save_times, ok=ok, sup_amp=sup_amp,
                          beta_newton=rec_beta, beta_sde=rec_beta_sde, gamma=rec_gamma,
                          final_states=u if keep_final else None)

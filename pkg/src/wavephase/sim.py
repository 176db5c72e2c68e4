"""Time integration of the stochastic neural-field equation in mild form.

The linear part is -u, so the semigroup factor is exactly exp(-dt) and one
step of the exponential Euler scheme reads

    u_{t+dt} = e^{-dt} u_t + (1 - e^{-dt}) (J * F(u_t)) + eps e^{-dt} B(u_t) dW.

The scheme preserves the bump fixed point to machine precision at eps = 0.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import BlowUpError
from .grid import Field, translate_values
from .model import ManifoldAtlas, RingModelParams, _kernel_hat, firing_rate
from .noise import NoiseModel, WienerIncrement, WienerStream, apply_increment_values
from .grid import convolve_values


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    t_end: float = 1.0
    epsilon: float = 0.0
    save_stride: int = 1
    initial_phase: float = 0.0
    substeps: int = 1  # Brownian sub-draws per step; 2 nests with a dt/2 run

    def __post_init__(self):
        if not (0 < self.dt <= 0.1):
            raise ValueError("dt must be in (0, 0.1]")
        if self.t_end < self.dt:
            raise ValueError("t_end must be >= dt")
        if self.save_stride < 1:
            raise ValueError("save_stride must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass
class Trajectory:
    """Saved snapshots of one simulated path plus the data needed to replay
    its increments (seed lives in the NoiseModel; id and stepping here)."""

    times: np.ndarray
    states: np.ndarray  # (n_saved, n_points)
    config: SimConfig
    trajectory_id: int
    exit_flag: Optional[tuple] = None  # (time, reason)

    def state_field(self, grid, i: int) -> Field:
        return Field(grid, self.states[i])


def step_values(u: np.ndarray, dt: float, epsilon: float, noise: NoiseModel,
                params: RingModelParams, kernel_hat: np.ndarray,
                coeffs: Optional[np.ndarray]) -> np.ndarray:
    """One exponential-Euler step on raw values, batched over leading axes."""
    n = noise.grid.n_points
    spacing = noise.grid.spacing
    conv = convolve_values(kernel_hat, firing_rate(params, u), n, spacing)
    decay = np.exp(-dt)
    out = decay * u + (1.0 - decay) * conv
    if epsilon > 0 and coeffs is not None:
        out = out + epsilon * decay * apply_increment_values(noise, u, coeffs)
    return out


def step(u: Field, dt: float, epsilon: float, noise: NoiseModel,
         params: RingModelParams, incr: Optional[WienerIncrement] = None) -> Field:
    coeffs = None if incr is None else np.asarray(incr.coeffs)
    out = step_values(u.values, dt, epsilon, noise, params,
                      _kernel_hat(params, u.grid), coeffs)
    if not np.all(np.isfinite(out)):
        raise BlowUpError("blow-up: non-finite state after step")
    return Field(u.grid, out)


def run(config: SimConfig, noise: NoiseModel, params: RingModelParams,
        atlas: ManifoldAtlas, trajectory_id: int = 0,
        exit_threshold: Optional[float] = None) -> Trajectory:
    """Simulate from u_0 = phi_{initial_phase}, saving every save_stride steps.

    With exit_threshold set, the amplitude ||u - phi_beta|| is monitored via
    the warm-started orthogonality phase solve and the run stops at the first
    crossing, recording exit_flag = (time, "amplitude exceeded threshold").
    """
    from .variational import newton_phase  # local import to avoid a cycle

    grid = atlas.grid
    n_steps = int(round(config.t_end / config.dt))
    kernel_hat = _kernel_hat(params, grid)
    u = translate_values(atlas.profile.values, config.initial_phase, grid.n_points)
    stream = WienerStream(noise, trajectory_id, substeps=config.substeps)

    times = [0.0]
    states = [u.copy()]
    exit_flag = None
    beta = config.initial_phase

    chunk = 4096
    done = 0
    while done < n_steps and exit_flag is None:
        m = min(chunk, n_steps - done)
        xi = stream.block(m, config.dt) if config.epsilon > 0 else None
        for r in range(m):
            coeffs = xi[r] if xi is not None else None
            u = step_values(u, config.dt, config.epsilon, noise, params, kernel_hat, coeffs)
            k = done + r + 1
            t = k * config.dt
            if not np.all(np.isfinite(u)):
                raise BlowUpError(f"blow-up: non-finite state at t={t:.6g}")
            if exit_threshold is not None:
                beta = newton_phase(Field(grid, u), beta, atlas)
                amp = np.sqrt(grid.spacing * np.sum(
                    (u - translate_values(atlas.profile.values, beta, grid.n_points))**2))
                if amp > exit_threshold:
                    exit_flag = (t, "amplitude exceeded threshold")
            if k % config.save_stride == 0 or exit_flag is not None:
                times.append(t)
                states.append(u.copy())
            if exit_flag is not None:
                break
        done += m

    return Trajectory(times=np.array(times), states=np.array(states),
                      config=config, trajectory_id=trajectory_id, exit_flag=exit_flag)


def replay_increments(config: SimConfig, noise: NoiseModel, trajectory_id: int) -> np.ndarray:
    """All increment coefficients of a run, shape (n_steps, n_modes).

    Streams are pure functions of (seed, trajectory_id), so the increments a
    run consumed can always be regenerated instead of stored.
    """
    n_steps = int(round(config.t_end / config.dt))
    stream = WienerStream(noise, trajectory_id, substeps=config.substeps)
    return stream.block(n_steps, config.dt)

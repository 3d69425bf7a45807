"""Time grids and the three samplers: flow Euler, probability-flow Euler,
and the Euler-Maruyama reverse SDE.

All integrators are shape-agnostic: the state may be a single vector or a
batch (..., d) as long as the callable maps like-shaped arrays to
like-shaped arrays.  One callable invocation per step, so the number of
function evaluations equals the number of steps regardless of batching.
Stochastic solvers draw all noise from the caller's Generator, making
runs bit-reproducible per seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .paths import StateVector
from .sde import FLOW, ScoreFn, SdeSpec, diffusion, drift, kernel_moments, pf_ode_rhs


class SolverError(RuntimeError):
    """Invalid grid or a diverging trajectory."""


FieldFn = Callable[[StateVector, StateVector, float], StateVector]


@dataclass(frozen=True)
class TimeGrid:
    """Ascending flow-time grid 0 = t_0 < ... < t_N = 1."""

    points: np.ndarray
    t_delta: float

    @property
    def n_steps(self) -> int:
        return len(self.points) - 1


def make_fm_grid(n_steps: int, t_delta: float = 0.03) -> TimeGrid:
    """Flow grid {0, d, 2d, ..., 1 - t_delta, 1} with d = (1 - t_delta)/(N - 1).

    N function evaluations over N+1 points; the final step has length
    t_delta so the last evaluation happens at 1 - t_delta, away from the
    sigma_t = 0 singularity.  N = 1 degenerates to the single step {0, 1}.
    """
    if n_steps < 1:
        raise SolverError("n_steps must be >= 1")
    if not 0.0 < t_delta < 1.0:
        raise SolverError(f"t_delta={t_delta} outside (0, 1)")
    if n_steps == 1:
        points = np.array([0.0, 1.0])
    else:
        points = np.concatenate([np.linspace(0.0, 1.0 - t_delta, n_steps), [1.0]])
    return TimeGrid(points, t_delta)


def reverse_grid(n_rev: int, t_rsp: float, t_delta: float) -> np.ndarray:
    """Descending diffusion-time grid t_rsp = t_n > ... > t_1 = t_delta > t_0 = 0.

    Uniform from t_rsp down to t_delta with a final step of length
    t_delta; n_rev = 1 degenerates to the single step {t_rsp, 0}.
    """
    if n_rev < 1:
        raise SolverError("n_rev must be >= 1")
    if n_rev > 1 and not t_delta < t_rsp < 1.0:
        raise SolverError(f"need t_delta < t_rsp < 1, got t_rsp={t_rsp}")
    if n_rev == 1:
        return np.array([float(t_rsp), 0.0])
    return np.concatenate([np.linspace(t_rsp, t_delta, n_rev), [0.0]])


def _check_finite(x: StateVector, step: int, t: float) -> None:
    if not np.all(np.isfinite(x)):
        raise SolverError(f"non-finite state at step {step}, t={t:.6g}")


def euler_ode(
    field_fn: FieldFn,
    x0: StateVector,
    y: StateVector,
    grid: TimeGrid,
    record_trajectory: bool = False,
) -> tuple[StateVector, list[StateVector] | None]:
    """Euler integration x_{i} = x_{i-1} + v(x_{i-1}, y, t_{i-1}) * dt_i.

    Exactly ``grid.n_steps`` evaluations of ``field_fn``.  Trajectory
    recording is off by default to keep inference memory flat.
    """
    ts = grid.points
    x = np.asarray(x0, dtype=float).copy()
    traj = [x.copy()] if record_trajectory else None
    for i in range(len(ts) - 1):
        v = field_fn(x, y, float(ts[i]))
        _check_finite(v, i, float(ts[i]))
        x = x + v * (ts[i + 1] - ts[i])
        if traj is not None:
            traj.append(x.copy())
    return x, traj


def euler_maruyama_reverse(
    sde: SdeSpec,
    score_fn: ScoreFn,
    y: StateVector,
    n_rev: int,
    t_rsp: float,
    t_delta: float,
    rng: np.random.Generator,
    moment_steps: int = 2000,
) -> StateVector:
    """Reverse-SDE sampler x <- x + [f - g^2 s](dt) + g sqrt(-dt) eps.

    Starts from N(y, std^2 I) with std taken from the forward kernel at
    t_rsp and walks the descending grid down to 0; dt < 0 throughout.
    Exactly n_rev score evaluations.
    """
    taus = reverse_grid(n_rev, t_rsp, t_delta)
    y = np.asarray(y, dtype=float)
    std0 = kernel_moments(sde, y, y, float(taus[0]), steps=moment_steps).std
    x = y + std0 * rng.standard_normal(y.shape)
    for i in range(len(taus) - 1):
        t = float(taus[i])
        dt = float(taus[i + 1] - taus[i])
        g = diffusion(sde, t)
        s = score_fn(x, y, t)
        x = x + (drift(sde, x, y, t) - g**2 * s) * dt + g * np.sqrt(-dt) * rng.standard_normal(x.shape)
        _check_finite(x, i, t)
    return x


def pf_ode_solve(
    sde: SdeSpec,
    score_fn: ScoreFn,
    y: StateVector,
    n_steps: int,
    t_delta: float,
    rng: np.random.Generator,
    record_trajectory: bool = False,
) -> tuple[StateVector, list[StateVector] | None]:
    """Probability-flow sampler: Euler on f - g^2 s / 2, descending to 0.

    Initialized at diffusion time 1 - t_delta from N(y, std^2 I); for the
    flow family std = (1 - t_delta) * sigma, matching the flow-matching
    initial law under time reversal.  Deterministic after the single
    initial draw.
    """
    taus = reverse_grid(n_steps, 1.0 - t_delta, t_delta)
    y = np.asarray(y, dtype=float)
    if sde.kind == FLOW:
        std0 = (1.0 - t_delta) * sde.sigma
    else:
        std0 = kernel_moments(sde, y, y, float(taus[0])).std
    x = y + std0 * rng.standard_normal(y.shape)
    traj = [x.copy()] if record_trajectory else None
    for i in range(len(taus) - 1):
        t = float(taus[i])
        v = pf_ode_rhs(sde, score_fn(x, y, t), x, y, t)
        _check_finite(v, i, t)
        x = x + v * (taus[i + 1] - taus[i])
        if traj is not None:
            traj.append(x.copy())
    return x, traj

"""Diffusion SDE coefficient families and the score/vector-field bridge.

Two forward SDEs dx = f(x, y, t) dt + g(t) dw on t in [0, 1):

* ``flow`` -- f = (y - x)/(1 - t), g = sqrt(2 t sigma^2 / (1 - t)).
  Its perturbation kernel reproduces the denoise probability path with
  reversed time: N((1-t)*x0 + t*y, (t*sigma)^2 I).
* ``bbed`` -- same Brownian-bridge drift with exponential diffusion
  g = c * k**t (c, k > 0), the strongest prior diffusion baseline.

Both drifts are singular at t = 1; evaluation inside [1 - 1e-9, 1] is an
error rather than a clamp so callers must use t_delta-truncated grids.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .paths import StateVector

FLOW = "flow"
BBED = "bbed"

_SINGULAR_EDGE = 1.0 - 1e-9
_MOMENT_EDGE = 1.0 - 1e-6


class SdeError(ValueError):
    """Invalid SDE configuration or evaluation at a singular time."""


@dataclass(frozen=True)
class SdeSpec:
    """Drift/diffusion coefficient family.

    ``sigma`` parametrizes the flow-matched family; ``c`` and ``k`` the
    bbed family.  The bbed defaults are stability-test values only, no
    reference settings exist for them here.
    """

    kind: str = FLOW
    sigma: float = 0.487
    c: float = 0.1
    k: float = 2.0

    def __post_init__(self) -> None:
        if self.kind not in (FLOW, BBED):
            raise SdeError(f"unknown sde kind {self.kind!r}")
        if self.kind == FLOW and self.sigma < 0:
            raise SdeError("sigma must be nonnegative")
        if self.kind == BBED and (self.c <= 0 or self.k <= 0):
            raise SdeError("bbed requires c > 0 and k > 0")


class KernelMoments(NamedTuple):
    mean: StateVector
    std: float


def _check_drift_time(t: float) -> float:
    t = float(t)
    if t >= _SINGULAR_EDGE:
        raise SdeError(f"drift is singular at t={t} (t >= 1 - 1e-9)")
    if t < 0.0:
        raise SdeError(f"t={t} < 0")
    return t


def drift(sde: SdeSpec, x: StateVector, y: StateVector, t: float) -> StateVector:
    """Brownian-bridge drift f(x, y, t) = (y - x)/(1 - t), shared by both families."""
    t = _check_drift_time(t)
    return (y - x) / (1.0 - t)


def diffusion(sde: SdeSpec, t: float) -> float:
    """Diffusion coefficient g(t) >= 0."""
    t = float(t)
    if t < 0.0:
        raise SdeError(f"t={t} < 0")
    if sde.kind == FLOW:
        if t >= 1.0:
            raise SdeError(f"flow diffusion undefined at t={t} >= 1")
        return float(np.sqrt(2.0 * t * sde.sigma**2 / (1.0 - t)))
    return float(sde.c * sde.k**t)


def _dfdx(t: float) -> float:
    # d/dx of the shared bridge drift
    return -1.0 / (1.0 - t)


def kernel_moments(
    sde: SdeSpec, x0: StateVector, y: StateVector, t: float, steps: int = 2000
) -> KernelMoments:
    """Perturbation-kernel moments of the forward SDE started at x0.

    Integrates the mean and variance ODEs

        d mu/ds = f(mu, y, s),      d P/ds = 2 (df/dx) P + g(s)^2

    from s = 0 (mu = x0, P = 0) to s = t with fixed-step classical RK4.
    For the flow family the closed form is mu = (1-t)*x0 + t*y, std = t*sigma.
    """
    t = float(t)
    if steps < 1:
        raise SdeError("steps must be >= 1")
    if t >= _MOMENT_EDGE:
        raise SdeError(f"t={t} inside the singularity window [1 - 1e-6, 1]")
    if t < 0.0:
        raise SdeError(f"t={t} < 0")
    x0 = np.asarray(x0, dtype=float)
    if t == 0.0:
        return KernelMoments(x0.copy(), 0.0)

    h = t / steps
    mu = x0.copy()
    p = 0.0

    def rhs(s: float, mu_s: StateVector, p_s: float) -> tuple[StateVector, float]:
        return (y - mu_s) / (1.0 - s), 2.0 * _dfdx(s) * p_s + diffusion(sde, s) ** 2

    for i in range(steps):
        s = i * h
        k1m, k1p = rhs(s, mu, p)
        k2m, k2p = rhs(s + h / 2, mu + h / 2 * k1m, p + h / 2 * k1p)
        k3m, k3p = rhs(s + h / 2, mu + h / 2 * k2m, p + h / 2 * k2p)
        k4m, k4p = rhs(s + h, mu + h * k3m, p + h * k3p)
        mu = mu + h / 6 * (k1m + 2 * k2m + 2 * k3m + k4m)
        p = p + h / 6 * (k1p + 2 * k2p + 2 * k3p + k4p)
    return KernelMoments(mu, float(np.sqrt(max(p, 0.0))))


def pf_ode_rhs(
    sde: SdeSpec, score: StateVector, x: StateVector, y: StateVector, t: float
) -> StateVector:
    """Probability flow ODE right-hand side f(x, y, t) - g(t)^2 score / 2."""
    return drift(sde, x, y, t) - 0.5 * diffusion(sde, t) ** 2 * score


ScoreFn = Callable[[StateVector, StateVector, float], StateVector]


def fm_field_from_score(
    sde: SdeSpec, score_fn: ScoreFn, x: StateVector, y: StateVector, t_fm: float
) -> StateVector:
    """Flow-matching vector field induced by a score model via time reversal.

    Flow time t_fm maps to diffusion time 1 - t_fm, and the probability
    flow ODE traversed backwards is the flow ODE, so

        v(x, y, t_fm) = -[f - g^2 score / 2](x, y, 1 - t_fm).
    """
    t_fm = float(t_fm)
    if t_fm <= 0.0:
        raise SdeError(f"t_fm={t_fm} <= 0 maps to the drift singularity")
    t_diff = 1.0 - t_fm
    return -pf_ode_rhs(sde, score_fn(x, y, t_diff), x, y, t_diff)

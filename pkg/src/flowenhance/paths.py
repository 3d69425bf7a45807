"""Gaussian conditional probability paths, flows, vector fields, and scores.

A path prescribes the law p_t(x_t | x1, y) = N(mu_t, sigma_t^2 I) on t in
[0, 1].  Two families are provided:

* ``denoise``  -- mu_t = t*x1 + (1-t)*y,  sigma_t = (1-t)*sigma.
  The mean moves linearly from the noisy signal y to the clean target x1
  while the spread shrinks linearly to zero, so the path is pinned to x1
  at t = 1 and starts at N(y, sigma^2 I) at t = 0.
* ``ot``       -- mu_t = t*x1,  sigma_t = 1 - (1-sigma)*t.
  The classic optimal-transport path from a standard normal; kept as a
  cross-check of the generic Gaussian-path formulas (y is ignored).

All operations are pure functions of their arguments plus an explicit
numpy Generator; they are safe to call concurrently as long as each
caller owns its Generator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

StateVector = np.ndarray

DENOISE = "denoise"
OT = "ot"


class PathError(ValueError):
    """Invalid path configuration or evaluation outside the path's domain."""


@dataclass(frozen=True)
class PathSpec:
    """Gaussian conditional path family and its spread hyperparameter."""

    kind: str = DENOISE
    sigma: float = 0.487

    def __post_init__(self) -> None:
        if self.kind not in (DENOISE, OT):
            raise PathError(f"unknown path kind {self.kind!r}")
        if self.sigma < 0:
            raise PathError("sigma must be nonnegative")
        if self.kind == OT and self.sigma >= 1:
            raise PathError("ot path requires sigma < 1")


@dataclass(frozen=True)
class GaussianTarget:
    """Isotropic Gaussian target law q(x1 | y) = N(mean, std^2 I)."""

    mean: StateVector
    std: float

    def __post_init__(self) -> None:
        if self.std <= 0:
            raise PathError("target std must be positive")


class PathCoeffs(NamedTuple):
    mu: StateVector
    sigma: float
    mu_dot: StateVector
    sigma_dot: float


def _check_time(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise PathError(f"t={t} outside [0, 1]")
    return t


def _check_shapes(*vecs: StateVector) -> None:
    shapes = {np.shape(v) for v in vecs}
    if len(shapes) > 1:
        raise PathError(f"shape mismatch: {sorted(shapes)}")


def path_coeffs(path: PathSpec, x1: StateVector, y: StateVector, t: float) -> PathCoeffs:
    """Mean, spread, and their exact time derivatives at time t."""
    t = _check_time(t)
    _check_shapes(x1, y)
    if path.kind == DENOISE:
        mu = t * x1 + (1.0 - t) * y
        sigma = (1.0 - t) * path.sigma
        mu_dot = x1 - y
        sigma_dot = -path.sigma
    else:
        mu = t * x1
        sigma = 1.0 - (1.0 - path.sigma) * t
        mu_dot = np.asarray(x1, dtype=float)
        sigma_dot = -(1.0 - path.sigma)
    return PathCoeffs(mu, sigma, mu_dot, sigma_dot)


def cond_flow(
    path: PathSpec, x0: StateVector, x1: StateVector, y: StateVector, t: float
) -> StateVector:
    """Conditional flow phi_t(x0 | x1, y) = (sigma_t/sigma_0)*(x0 - mu_0) + mu_t."""
    _check_shapes(x0, x1, y)
    mu0, sigma0, _, _ = path_coeffs(path, x1, y, 0.0)
    if sigma0 == 0.0:
        raise PathError("degenerate path: sigma_0 = 0")
    mu, sigma, _, _ = path_coeffs(path, x1, y, t)
    return (sigma / sigma0) * (x0 - mu0) + mu


def cond_vector_field(
    path: PathSpec, x: StateVector, x1: StateVector, y: StateVector, t: float
) -> StateVector:
    """Conditional vector field v_t(x | x1, y) = (sigma'_t/sigma_t)*(x - mu_t) + mu'_t.

    Singular where sigma_t = 0 (the denoise path at t = 1); callers must
    stay on t <= 1 - t_delta grids.
    """
    _check_shapes(x, x1, y)
    mu, sigma, mu_dot, sigma_dot = path_coeffs(path, x1, y, t)
    if sigma <= 0.0:
        raise PathError(f"sigma_t = 0 at t={t}: vector field is singular")
    return (sigma_dot / sigma) * (x - mu) + mu_dot


def sample_conditional(
    path: PathSpec,
    x1: StateVector,
    y: StateVector,
    t: float,
    rng: np.random.Generator,
) -> StateVector:
    """Draw x_t ~ N(mu_t, sigma_t^2 I)."""
    mu, sigma, _, _ = path_coeffs(path, x1, y, t)
    return mu + sigma * rng.standard_normal(np.shape(mu))


def cond_score(
    path: PathSpec, x: StateVector, x1: StateVector, y: StateVector, t: float
) -> StateVector:
    """Score of the Gaussian kernel, grad_x log N(x; mu_t, sigma_t^2 I) = -(x - mu_t)/sigma_t^2."""
    _check_shapes(x, x1, y)
    mu, sigma, _, _ = path_coeffs(path, x1, y, t)
    if sigma <= 0.0:
        raise PathError(f"sigma_t = 0 at t={t}: score undefined")
    return -(x - mu) / sigma**2


def posterior_mean(
    path: PathSpec, target: GaussianTarget, x: StateVector, y: StateVector, t: float
) -> StateVector:
    """E[x1 | x_t = x, y] for the denoise path and a Gaussian target.

    With q(x1 | y) = N(m, gamma^2 I) the joint (x1, x_t) is Gaussian and

        E[x1 | x_t = x] = m + a*(x - t*m - (1-t)*y),
        a = t*gamma^2 / (t^2*gamma^2 + (1-t)^2*sigma^2).
    """
    if path.kind != DENOISE:
        raise PathError("posterior_mean is defined for the denoise path")
    t = _check_time(t)
    _check_shapes(x, target.mean, y)
    gamma2 = target.std**2
    var = t**2 * gamma2 + (1.0 - t) ** 2 * path.sigma**2
    if var <= 0.0:
        raise PathError(f"degenerate marginal variance at t={t}")
    a = t * gamma2 / var
    return target.mean + a * (x - t * target.mean - (1.0 - t) * y)


def marginal_moments(
    path: PathSpec, target: GaussianTarget, y: StateVector, t: float
) -> tuple[StateVector, float]:
    """Mean and std of the marginal p_t(x_t | y) for a Gaussian target."""
    if path.kind != DENOISE:
        raise PathError("marginal_moments is defined for the denoise path")
    t = _check_time(t)
    mean = t * target.mean + (1.0 - t) * y
    std = float(np.sqrt(t**2 * target.std**2 + (1.0 - t) ** 2 * path.sigma**2))
    return mean, std


def marginal_field_oracle(
    path: PathSpec, target: GaussianTarget, x: StateVector, y: StateVector, t: float
) -> StateVector:
    """Analytic marginal vector field for a Gaussian target.

    The marginal field is the posterior expectation of the conditional
    field; since the conditional field is affine in x1, it equals the
    conditional field evaluated at the posterior mean of x1.  Used as a
    learning-free verification oracle.
    """
    if t >= 1.0:
        raise PathError("marginal field is singular at t = 1")
    x1_hat = posterior_mean(path, target, x, y, t)
    return cond_vector_field(path, x, x1_hat, y, t)

"""Small fully-connected field model with exact analytic gradients.

The network maps (x, y, t) -> state-shaped output and serves either as a
vector-field model or a score model (the ``mode`` tag records the intent;
the architecture is identical).  Input features are [x, y, y - x,
sinusoidal_embedding(t)] feeding a tanh stack with a linear head, plus a
residual term r * (y - x) with a learned scalar r so the freshly
initialized model already points from the state toward the conditioner.

Parameters live in one flat float64 vector; ``forward`` reads them
through views, so optimizers, EMA, and checkpoints can treat the model as
a plain array.  forward/backward are read-only on the parameters and safe
to call concurrently; updates require a single writer.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .paths import StateVector


class ModelError(ValueError):
    """Architecture/parameter mismatch."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor: layer widths, embedding size, and role tag."""

    state_dim: int
    hidden: tuple[int, ...] = (256, 256, 256)
    time_embed_dim: int = 32
    mode: str = "vector_field"  # or "score"

    def __post_init__(self) -> None:
        if self.state_dim < 1:
            raise ModelError("state_dim must be >= 1")
        if self.time_embed_dim % 2 != 0:
            raise ModelError("time_embed_dim must be even")
        if self.mode not in ("vector_field", "score"):
            raise ModelError(f"unknown mode {self.mode!r}")

    @property
    def layer_dims(self) -> list[int]:
        return [3 * self.state_dim + self.time_embed_dim, *self.hidden, self.state_dim]

    @property
    def n_params(self) -> int:
        dims = self.layer_dims
        return sum(a * b + b for a, b in zip(dims[:-1], dims[1:])) + 1


def _param_views(spec: ModelSpec, theta: np.ndarray) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    if theta.shape != (spec.n_params,):
        raise ModelError(f"expected {spec.n_params} parameters, got {theta.shape}")
    dims = spec.layer_dims
    layers = []
    off = 0
    for a, b in zip(dims[:-1], dims[1:]):
        w = theta[off : off + a * b].reshape(b, a)
        off += a * b
        bias = theta[off : off + b]
        off += b
        layers.append((w, bias))
    return layers, theta[off : off + 1]


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Fan-in-scaled uniform weights, zero biases, residual scale 1."""
    theta = np.zeros(spec.n_params)
    layers, res = _param_views(spec, theta)
    for w, _ in layers:
        lim = 1.0 / np.sqrt(w.shape[1])
        w[:] = rng.uniform(-lim, lim, size=w.shape)
    res[:] = 1.0
    return theta


def time_embedding(spec: ModelSpec, t: np.ndarray) -> np.ndarray:
    """Sinusoidal embedding with log-spaced frequencies on [1, 1000]."""
    half = spec.time_embed_dim // 2
    freqs = np.exp(np.linspace(np.log(1.0), np.log(1000.0), half))
    t = np.atleast_1d(np.asarray(t, dtype=float))[:, None]
    return np.concatenate([np.sin(freqs * t), np.cos(freqs * t)], axis=1)


def _features(spec: ModelSpec, x: np.ndarray, y: np.ndarray, t) -> np.ndarray:
    emb = time_embedding(spec, t)
    if emb.shape[0] == 1 and x.shape[0] > 1:
        emb = np.broadcast_to(emb, (x.shape[0], spec.time_embed_dim))
    elif emb.shape[0] != x.shape[0]:
        raise ModelError(f"t batch {emb.shape[0]} does not match state batch {x.shape[0]}")
    return np.concatenate([x, y, y - x, emb], axis=1)


def _as_batch(spec: ModelSpec, x: StateVector, y: StateVector) -> tuple[np.ndarray, np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ModelError(f"x shape {x.shape} != y shape {y.shape}")
    if x.shape[-1] != spec.state_dim:
        raise ModelError(f"state dim {x.shape[-1]} != spec.state_dim {spec.state_dim}")
    single = x.ndim == 1
    if single:
        x = x[None, :]
        y = y[None, :]
    return x, y, single


def _forward_cached(
    spec: ModelSpec, theta: np.ndarray, x: np.ndarray, y: np.ndarray, t
) -> tuple[np.ndarray, list[np.ndarray]]:
    layers, res = _param_views(spec, theta)
    h = _features(spec, x, y, t)
    cache = [h]
    for w, b in layers[:-1]:
        h = np.tanh(h @ w.T + b)
        cache.append(h)
    w, b = layers[-1]
    out = h @ w.T + b + res[0] * (y - x)
    return out, cache


def forward(spec: ModelSpec, theta: np.ndarray, x: StateVector, y: StateVector, t) -> StateVector:
    """Evaluate the model; accepts a single state (d,) or a batch (B, d)."""
    xb, yb, single = _as_batch(spec, x, y)
    out, _ = _forward_cached(spec, theta, xb, yb, t)
    return out[0] if single else out


def backprop(
    spec: ModelSpec,
    theta: np.ndarray,
    x: StateVector,
    y: StateVector,
    t,
    dout: np.ndarray,
    wrt_input: bool = False,
) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian product: gradient of sum(dout * forward) in theta.

    With ``wrt_input`` also returns the gradient in x (used when loss
    gradients must flow through the state, e.g. trajectory backprop).
    """
    xb, yb, single = _as_batch(spec, x, y)
    dout = np.asarray(dout, dtype=float)
    if single:
        dout = dout[None, :]
    _, cache = _forward_cached(spec, theta, xb, yb, t)
    layers, res = _param_views(spec, theta)

    grad = np.zeros_like(theta)
    glayers, gres = _param_views(spec, grad)

    gres[0] = np.sum(dout * (yb - xb))
    d = dout
    for i in range(len(layers) - 1, -1, -1):
        gw, gb = glayers[i]
        gw += d.T @ cache[i]
        gb += d.sum(axis=0)
        if i > 0:
            d = (d @ layers[i][0]) * (1.0 - cache[i] ** 2)
        elif wrt_input:
            d = d @ layers[0][0]
    if not wrt_input:
        return grad
    dim = spec.state_dim
    dx = d[:, :dim] - d[:, 2 * dim : 3 * dim] - res[0] * dout
    return grad, (dx[0] if single else dx)


def regression_loss_grad(
    spec: ModelSpec,
    theta: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    t,
    target: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Batch-mean squared-norm regression loss and its exact gradient.

    loss = mean_i ||forward(x_i, y_i, t_i) - target_i||^2, accumulated in
    float64.  Duplicating the batch leaves both outputs unchanged.
    """
    xb, yb, _ = _as_batch(spec, x, y)
    target = np.asarray(target, dtype=float)
    if target.shape != xb.shape:
        raise ModelError(f"target shape {target.shape} != batch shape {xb.shape}")
    out, _ = _forward_cached(spec, theta, xb, yb, t)
    resid = out - target
    n = xb.shape[0]
    loss = float(np.sum(resid * resid) / n)
    if not np.isfinite(loss):
        raise ModelError("non-finite loss")
    grad = backprop(spec, theta, xb, yb, t, 2.0 * resid / n)
    return loss, grad


@dataclass(frozen=True)
class EmaState:
    """Exponential moving average of a parameter vector."""

    shadow: np.ndarray
    decay: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.decay <= 1.0:
            raise ModelError("decay must lie in [0, 1]")


def ema_init(theta: np.ndarray, decay: float = 0.999) -> EmaState:
    return EmaState(np.asarray(theta, dtype=float).copy(), float(decay))


def ema_update(ema: EmaState, theta: np.ndarray) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * theta."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != ema.shadow.shape:
        raise ModelError(f"theta shape {theta.shape} != shadow shape {ema.shadow.shape}")
    return replace(ema, shadow=ema.decay * ema.shadow + (1.0 - ema.decay) * theta)

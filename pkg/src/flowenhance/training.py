"""Losses (CFM, DSM, CRP), the optimization loop, and checkpoint persistence.

The three regression losses share one shape: draw a time, draw a
perturbed state, regress the model onto an analytic target, average the
squared norm over the batch.

* CFM: t ~ U[0, 1 - t_delta], x_t from the conditional path, target is
  the conditional vector field.
* DSM: diffusion time t ~ U[t_delta, 1 - t_delta] (both endpoints are
  singular, the kernel std at 0 and the drift at 1), x_t from the
  analytic perturbation kernel of the flow-family SDE, target is the
  kernel score.
* CRP: run the discretized reverse SDE with the current score model and
  regress the terminal state onto the clean signal; gradients flow only
  through the final score evaluation unless full trajectory backprop is
  requested.
"""

from __future__ import annotations

import base64
import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import model as mdl
from . import paths as pth
from . import sde as sdes
from . import solvers
from .model import EmaState, ModelSpec
from .paths import PathSpec, StateVector
from .sde import SdeSpec

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Training aborted or misconfigured."""


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint file."""


@dataclass(frozen=True)
class TrainConfig:
    path: PathSpec = field(default_factory=PathSpec)
    sde: SdeSpec = field(default_factory=SdeSpec)
    loss: str = "cfm"  # cfm | dsm | crp
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 1
    t_delta: float = 0.03
    ema_decay: float = 0.999
    seed: int = 0
    n_rev: int = 5
    t_rsp: float | None = None  # reverse start; defaults to 1 - t_delta
    crp_full_backprop: bool = False
    lr_final: float | None = None  # linear decay target over the last 40% of steps

    def __post_init__(self) -> None:
        if self.loss not in ("cfm", "dsm", "crp"):
            raise TrainingError(f"unknown loss {self.loss!r}")
        if self.learning_rate <= 0:
            raise TrainingError("learning_rate must be positive")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if not 0.0 < self.t_delta < 1.0:
            raise TrainingError("t_delta must lie in (0, 1)")


# --------------------------------------------------------------------------
# batch construction and losses
# --------------------------------------------------------------------------

def _stack_pairs(pairs: Sequence[tuple[StateVector, StateVector]]) -> tuple[np.ndarray, np.ndarray]:
    if len(pairs) == 0:
        raise TrainingError("empty batch")
    a = np.stack([np.asarray(p[0], dtype=float) for p in pairs])
    b = np.stack([np.asarray(p[1], dtype=float) for p in pairs])
    return a, b


def cfm_batch(
    path: PathSpec, x1: np.ndarray, y: np.ndarray, t_delta: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized (x_t, t, target) draw for the CFM regression.

    Row i reproduces sample_conditional / cond_vector_field at t_i
    exactly; the batched form only avoids the per-row call overhead.
    """
    if path.kind != pth.DENOISE:
        raise TrainingError("cfm_batch supports the denoise path")
    n = x1.shape[0]
    t = rng.uniform(0.0, 1.0 - t_delta, size=n)
    tc = t[:, None]
    mu = tc * x1 + (1.0 - tc) * y
    sig = (1.0 - tc) * path.sigma
    xt = mu + sig * rng.standard_normal(x1.shape)
    target = (x1 - y) - (xt - mu) / (1.0 - tc)
    return xt, t, target


def cfm_loss(
    field_fn: Callable,
    pairs: Sequence[tuple[StateVector, StateVector]],
    path: PathSpec,
    t_delta: float,
    rng: np.random.Generator,
) -> float:
    """Monte-Carlo CFM objective for any field callable (model or stub)."""
    x1, y = _stack_pairs(pairs)
    xt, t, target = cfm_batch(path, x1, y, t_delta, rng)
    out = field_fn(xt, y, t)
    r = out - target
    return float(np.sum(r * r) / x1.shape[0])


def dsm_batch(
    sde: SdeSpec, x0: np.ndarray, y: np.ndarray, t_delta: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(x_t, t, score target) draw for denoising score matching.

    Flow-family kernel in closed form: mu = (1-t) x0 + t y, std = t sigma.
    """
    if sde.kind != sdes.FLOW:
        raise TrainingError("dsm_batch supports the flow-family sde")
    n = x0.shape[0]
    t = rng.uniform(t_delta, 1.0 - t_delta, size=n)
    tc = t[:, None]
    mu = (1.0 - tc) * x0 + tc * y
    std = tc * sde.sigma
    eps = rng.standard_normal(x0.shape)
    xt = mu + std * eps
    target = -eps / std
    return xt, t, target


def dsm_loss(
    score_fn: Callable,
    pairs: Sequence[tuple[StateVector, StateVector]],
    sde: SdeSpec,
    t_delta: float,
    rng: np.random.Generator,
) -> float:
    """Monte-Carlo DSM objective for any score callable."""
    x0, y = _stack_pairs(pairs)
    xt, t, target = dsm_batch(sde, x0, y, t_delta, rng)
    out = score_fn(xt, y, t)
    r = out - target
    return float(np.sum(r * r) / x0.shape[0])


# --------------------------------------------------------------------------
# CRP: reverse rollout loss and its restricted gradient
# --------------------------------------------------------------------------

@dataclass
class _CrpStep:
    x: np.ndarray
    t: float
    dt: float
    g: float


def crp_rollout(
    score_fn: Callable,
    x0: np.ndarray,
    y: np.ndarray,
    sde: SdeSpec,
    n_rev: int,
    t_rsp: float,
    t_delta: float,
    rng: np.random.Generator,
) -> tuple[float, np.ndarray, list[_CrpStep]]:
    """Run the reverse EuM chain and return (loss, x_tilde, step cache)."""
    taus = solvers.reverse_grid(n_rev, t_rsp, t_delta)
    std0 = sdes.kernel_moments(sde, y, y, float(taus[0])).std
    x = y + std0 * rng.standard_normal(y.shape)
    steps: list[_CrpStep] = []
    for i in range(len(taus) - 1):
        t = float(taus[i])
        dt = float(taus[i + 1] - taus[i])
        g = sdes.diffusion(sde, t)
        steps.append(_CrpStep(x=x, t=t, dt=dt, g=g))
        s = score_fn(x, y, t)
        x = x + (sdes.drift(sde, x, y, t) - g**2 * s) * dt + g * np.sqrt(-dt) * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise TrainingError(f"divergent reverse trajectory at t={t:.4g}")
    r = x - x0
    loss = float(np.sum(r * r) / x0.shape[0])
    return loss, x, steps


def crp_finetune_step(
    spec: ModelSpec,
    theta: np.ndarray,
    pairs: Sequence[tuple[StateVector, StateVector]],
    sde: SdeSpec,
    n_rev: int,
    t_rsp: float,
    t_delta: float,
    rng: np.random.Generator,
    full_backprop: bool = False,
) -> tuple[float, np.ndarray]:
    """Reverse-process loss and gradient for a score model.

    By default the gradient is restricted to the final score evaluation
    (the one at t_1 = t_delta); ``full_backprop`` propagates through the
    whole trajectory instead.
    """
    x0, y = _stack_pairs(pairs)

    def score_fn(x, yy, t):
        return mdl.forward(spec, theta, x, yy, np.full(x.shape[0], t))

    loss, x_tilde, steps = crp_rollout(score_fn, x0, y, sde, n_rev, t_rsp, t_delta, rng)
    lam = 2.0 * (x_tilde - x0) / x0.shape[0]

    if not full_backprop:
        last = steps[-1]
        dout = (-last.g**2 * last.dt) * lam
        grad = mdl.backprop(spec, theta, last.x, y, np.full(x0.shape[0], last.t), dout)
        return loss, grad

    grad = np.zeros_like(theta)
    for st in reversed(steps):
        dout = (-st.g**2 * st.dt) * lam
        g_theta, dx_s = mdl.backprop(
            spec, theta, st.x, y, np.full(x0.shape[0], st.t), dout, wrt_input=True
        )
        grad += g_theta
        # d x_next / d x = (1 + dt * df/dx) I - dt g^2 ds/dx
        lam = lam * (1.0 + st.dt * (-1.0 / (1.0 - st.t))) + dx_s
    return loss, grad


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Checkpoint:
    spec: ModelSpec
    theta: np.ndarray
    ema: np.ndarray
    config: TrainConfig
    step: int
    format_version: int = CHECKPOINT_VERSION

    def field_fn(self, use_ema: bool = True) -> Callable:
        """Callable (x, y, t) -> output over the stored parameters."""
        params = self.ema if use_ema else self.theta

        def fn(x, y, t):
            t_arr = np.full(x.shape[0], t) if np.ndim(x) > 1 and np.ndim(t) == 0 else t
            return mdl.forward(self.spec, params, x, y, t_arr)

        return fn


def _encode_array(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode_array(blob: str, n: int) -> np.ndarray:
    raw = base64.b64decode(blob.encode("ascii"), validate=True)
    if len(raw) != 8 * n:
        raise CheckpointError(f"parameter blob holds {len(raw)//8} values, expected {n}")
    return np.frombuffer(raw, dtype="<f8").astype(float)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Versioned JSON checkpoint, written atomically (temp file + rename)."""
    doc = {
        "format_version": ckpt.format_version,
        "spec": dataclasses.asdict(ckpt.spec),
        "config": dataclasses.asdict(ckpt.config),
        "step": ckpt.step,
        "theta_b64": _encode_array(ckpt.theta),
        "ema_b64": _encode_array(ckpt.ema),
    }
    doc["spec"]["hidden"] = list(ckpt.spec.hidden)
    text = json.dumps(doc, sort_keys=True, indent=1)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="ascii") as fh:
        fh.write(text)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        with open(path, encoding="ascii") as fh:
            doc = json.load(fh)
    except (OSError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if doc["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {doc['format_version']} unsupported (expected {CHECKPOINT_VERSION})"
        )
    try:
        spec_doc = dict(doc["spec"])
        spec_doc["hidden"] = tuple(spec_doc["hidden"])
        spec = ModelSpec(**spec_doc)
        cfg_doc = dict(doc["config"])
        cfg_doc["path"] = PathSpec(**cfg_doc["path"])
        cfg_doc["sde"] = SdeSpec(**cfg_doc["sde"])
        config = TrainConfig(**cfg_doc)
        theta = _decode_array(doc["theta_b64"], spec.n_params)
        ema = _decode_array(doc["ema_b64"], spec.n_params)
        step = int(doc["step"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    return Checkpoint(spec=spec, theta=theta, ema=ema, config=config, step=step)


# --------------------------------------------------------------------------
# the optimization loop
# --------------------------------------------------------------------------

class _Adam:
    """Adaptive-moment descent on a flat parameter vector (b1=0.9, b2=0.999, eps=1e-8)."""

    def __init__(self, n: int):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.buf = np.empty(n)
        self.t = 0

    def update(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> None:
        self.t += 1
        c1 = 1.0 / (1.0 - 0.9**self.t)
        c2 = 1.0 / (1.0 - 0.999**self.t)
        m, v, buf = self.m, self.v, self.buf
        m *= 0.9
        m += 0.1 * grad
        np.multiply(grad, grad, out=buf)
        v *= 0.999
        v += 0.001 * buf
        np.multiply(v, c2, out=buf)
        np.sqrt(buf, out=buf)
        buf += 1e-8
        np.divide(m, buf, out=buf)
        theta -= (lr * c1) * buf


@dataclass
class LogRow:
    epoch: int
    step: int
    train_loss: float
    val_metric: float
    best_val: float


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list[LogRow]


ValFn = Callable[[ModelSpec, np.ndarray], float]


def train(
    config: TrainConfig,
    pairs: Sequence[tuple[StateVector, StateVector]],
    spec: ModelSpec | None = None,
    val_fn: ValFn | None = None,
) -> TrainResult:
    """Fit the model on (clean, noisy) state pairs.

    ``val_fn(spec, ema_params)`` is evaluated once per epoch (higher is
    better) and selects the returned best checkpoint; without it the
    negative running train loss is used.  A non-finite loss aborts the
    run and returns the checkpoints accumulated so far.
    """
    if len(pairs) == 0:
        raise TrainingError("dataset is empty")
    x_all, y_all = _stack_pairs(pairs)
    dim = x_all.shape[1]
    if spec is None:
        spec = ModelSpec(state_dim=dim, mode="score" if config.loss in ("dsm", "crp") else "vector_field")
    if spec.state_dim != dim:
        raise TrainingError(f"spec.state_dim {spec.state_dim} != data dim {dim}")

    init_rng = np.random.default_rng([config.seed, 0])
    step_rng = np.random.default_rng([config.seed, 1])
    theta = mdl.init_params(spec, init_rng)
    ema = mdl.ema_init(theta, config.ema_decay)
    adam = _Adam(theta.size)

    n = x_all.shape[0]
    steps_per_epoch = max(1, n // config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    t_rsp = config.t_rsp if config.t_rsp is not None else 1.0 - config.t_delta

    def lr_at(step: int) -> float:
        if config.lr_final is None or total_steps <= 1:
            return config.learning_rate
        frac = step / total_steps
        if frac < 0.6:
            return config.learning_rate
        w = (frac - 0.6) / 0.4
        return config.learning_rate + w * (config.lr_final - config.learning_rate)

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(
            spec=spec, theta=theta.copy(), ema=ema.shadow.copy(), config=config, step=step
        )

    history: list[LogRow] = []
    best_val = -np.inf
    best = snapshot(0)
    step = 0
    aborted = False

    for epoch in range(config.epochs):
        order = step_rng.permutation(n)
        epoch_loss = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            x1, y = x_all[idx], y_all[idx]
            step += 1
            try:
                if config.loss == "cfm":
                    xt, t, target = cfm_batch(config.path, x1, y, config.t_delta, step_rng)
                    loss, grad = mdl.regression_loss_grad(spec, theta, xt, y, t, target)
                elif config.loss == "dsm":
                    xt, t, target = dsm_batch(config.sde, x1, y, config.t_delta, step_rng)
                    loss, grad = mdl.regression_loss_grad(spec, theta, xt, y, t, target)
                else:
                    loss, grad = crp_finetune_step(
                        spec, theta, list(zip(x1, y)), config.sde, config.n_rev,
                        t_rsp, config.t_delta, step_rng,
                        full_backprop=config.crp_full_backprop,
                    )
            except (mdl.ModelError, TrainingError):
                aborted = True
                break
            adam.update(theta, grad, lr_at(step))
            ema = mdl.ema_update(ema, theta)
            epoch_loss += loss
        if aborted:
            break
        epoch_loss /= steps_per_epoch
        val = val_fn(spec, ema.shadow) if val_fn is not None else -epoch_loss
        if val >= best_val:
            best_val = val
            best = snapshot(step)
        history.append(LogRow(epoch, step, epoch_loss, val, best_val))

    return TrainResult(best=best, last=snapshot(step), history=history)


def write_log_csv(history: Sequence[LogRow], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("epoch,step,train_loss,val_metric,best_val\n")
        for row in history:
            fh.write(f"{row.epoch},{row.step},{row.train_loss:.10g},{row.val_metric:.10g},{row.best_val:.10g}\n")

"""Conditional flow matching for signal enhancement.

Gaussian conditional probability paths with closed-form flows, fields,
and scores; the equivalent diffusion SDE with its probability-flow ODE;
Euler and Euler-Maruyama samplers; CFM/DSM/CRP training for a small
exact-gradient field model; and a synthetic enhancement benchmark with
SI-SDR metrics.
"""

__version__ = "0.1.0"

from .paths import (
    DENOISE,
    OT,
    GaussianTarget,
    PathSpec,
    cond_flow,
    cond_score,
    cond_vector_field,
    marginal_field_oracle,
    path_coeffs,
    sample_conditional,
)
from .sde import BBED, FLOW, SdeSpec, diffusion, drift, fm_field_from_score, kernel_moments, pf_ode_rhs
from .solvers import TimeGrid, euler_maruyama_reverse, euler_ode, make_fm_grid, pf_ode_solve
from .model import EmaState, ModelSpec, ema_init, ema_update, forward, init_params
from .training import (
    Checkpoint,
    TrainConfig,
    cfm_loss,
    crp_finetune_step,
    dsm_loss,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .audio import (
    MetricsRecord,
    SpectroConfig,
    SynthConfig,
    Waveform,
    enhance,
    mix_at_snr,
    si_metrics,
    synth_clean,
    synth_noise,
)

__all__ = [
    "DENOISE",
    "OT",
    "FLOW",
    "BBED",
    "PathSpec",
    "GaussianTarget",
    "SdeSpec",
    "TimeGrid",
    "ModelSpec",
    "EmaState",
    "TrainConfig",
    "Checkpoint",
    "SpectroConfig",
    "SynthConfig",
    "Waveform",
    "MetricsRecord",
    "path_coeffs",
    "cond_flow",
    "cond_vector_field",
    "cond_score",
    "sample_conditional",
    "marginal_field_oracle",
    "drift",
    "diffusion",
    "kernel_moments",
    "pf_ode_rhs",
    "fm_field_from_score",
    "make_fm_grid",
    "euler_ode",
    "euler_maruyama_reverse",
    "pf_ode_solve",
    "init_params",
    "forward",
    "ema_init",
    "ema_update",
    "cfm_loss",
    "dsm_loss",
    "crp_finetune_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "enhance",
    "synth_clean",
    "synth_noise",
    "mix_at_snr",
    "si_metrics",
]

"""Waveforms, the STFT front end, synthetic data, SI metrics, and enhancement.

The enhancement state is a block of consecutive compressed STFT frames
flattened to a real vector (real parts then imaginary parts, frame by
frame).  An utterance becomes a batch of overlapping blocks; the sampler
integrates all block ODEs with one model call per step, and overlapping
block predictions are averaged before synthesis.  Together with the
overlap-add of the inverse STFT this averages the independent per-block
sampling noise without extra model evaluations.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.signal import check_NOLA, get_window, istft, stft

from . import solvers
from .paths import StateVector
from .sde import FLOW
from .training import Checkpoint


class AudioError(ValueError):
    """Invalid audio configuration or degenerate signal."""


INF_DB = math.inf
CSV_DB_CAP = 300.0  # +inf sentinel cap used when writing metrics to CSV


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    rate: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=float))
        if self.rate <= 0:
            raise AudioError("sample rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class SpectroConfig:
    """STFT (periodic Hann) and magnitude-compression settings.

    Defaults are the conventional settings for this model family
    (window 510, hop 128, 256 bins, |c|^0.5 scaled by 0.15); they are
    configuration, not values with any special status here.  The window
    and hop must satisfy the nonzero overlap-add condition so the
    least-squares inverse reconstructs interior samples exactly.
    """

    window: int = 510
    hop: int = 128
    fft: int = 510
    alpha: float = 0.5
    beta: float = 0.15
    block: int = 1  # frames per model state

    def __post_init__(self) -> None:
        if not 0 < self.hop <= self.window <= self.fft:
            raise AudioError("need 0 < hop <= window <= fft")
        if not 0.0 < self.alpha <= 1.0:
            raise AudioError("alpha must lie in (0, 1]")
        if self.beta <= 0.0:
            raise AudioError("beta must be positive")
        if self.block < 1:
            raise AudioError("block must be >= 1")
        if not check_NOLA(get_window("hann", self.window), self.window, self.window - self.hop):
            raise AudioError(f"window {self.window}/hop {self.hop} violates the overlap-add condition")

    @property
    def bins(self) -> int:
        return self.fft // 2 + 1

    @property
    def state_dim(self) -> int:
        return 2 * self.bins * self.block

    def _stft_kwargs(self) -> dict:
        return dict(
            window="hann", nperseg=self.window, noverlap=self.window - self.hop, nfft=self.fft
        )


@dataclass(frozen=True)
class SpecLayout:
    """Frame count and original length needed to invert a packed spectrogram."""

    frames: int
    bins: int
    n_samples: int
    rate: int


# --------------------------------------------------------------------------
# synthesis
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    rate: int = 16000
    duration: float = 0.192
    f0_range: tuple[float, float] = (80.0, 300.0)
    harmonics: tuple[int, int] = (3, 8)
    tilt_range: tuple[float, float] = (-1.0, 1.0)

    @property
    def n_samples(self) -> int:
        return int(round(self.rate * self.duration))


def synth_clean(cfg: SynthConfig, rng: np.random.Generator) -> Waveform:
    """Harmonic comb with random fundamental, partial amplitudes, and a
    slow amplitude envelope; normalized to unit RMS."""
    t = np.arange(cfg.n_samples) / cfg.rate
    f0 = rng.uniform(*cfg.f0_range)
    n_harm = int(rng.integers(cfg.harmonics[0], cfg.harmonics[1] + 1))
    x = np.zeros(cfg.n_samples)
    for k in range(1, n_harm + 1):
        amp = rng.uniform(0.3, 1.0) / k
        x += amp * np.sin(2.0 * np.pi * k * f0 * t + rng.uniform(0.0, 2.0 * np.pi))
    rate_hz = rng.uniform(1.0, 6.0)
    x *= 1.0 + 0.5 * np.sin(2.0 * np.pi * rate_hz * t + rng.uniform(0.0, 2.0 * np.pi))
    return Waveform(x / np.sqrt(np.mean(x**2)), cfg.rate)


def synth_noise(cfg: SynthConfig, rng: np.random.Generator) -> Waveform:
    """White noise shaped by a random spectral tilt, unit RMS."""
    w = rng.standard_normal(cfg.n_samples)
    spec = np.fft.rfft(w)
    f = np.fft.rfftfreq(cfg.n_samples, 1.0 / cfg.rate)
    tilt = rng.uniform(*cfg.tilt_range)
    spec *= (np.maximum(f, f[1]) / 1000.0) ** (tilt / 2.0)
    n = np.fft.irfft(spec, cfg.n_samples)
    return Waveform(n / np.sqrt(np.mean(n**2)), cfg.rate)


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """clean + noise rescaled so 10 log10(||s||^2/||n||^2) equals snr_db."""
    if clean.rate != noise.rate or len(clean) != len(noise):
        raise AudioError("clean and noise must share length and rate")
    p_noise = float(np.sum(noise.samples**2))
    if p_noise == 0.0:
        raise AudioError("zero-energy noise")
    scale = math.sqrt(float(np.sum(clean.samples**2)) / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(clean.samples + scale * noise.samples, clean.rate)


# --------------------------------------------------------------------------
# STFT, compression, block packing
# --------------------------------------------------------------------------

def stft_frames(wav: Waveform, cfg: SpectroConfig) -> tuple[np.ndarray, SpecLayout]:
    """Complex spectrogram as (frames, bins) plus the layout to invert it."""
    _, _, z = stft(wav.samples, fs=wav.rate, **cfg._stft_kwargs())
    z = z.T
    return z, SpecLayout(frames=z.shape[0], bins=z.shape[1], n_samples=len(wav), rate=wav.rate)


def istft_frames(z: np.ndarray, layout: SpecLayout, cfg: SpectroConfig) -> Waveform:
    _, x = istft(z.T, fs=layout.rate, **cfg._stft_kwargs())
    return Waveform(x[: layout.n_samples], layout.rate)


def compress(z: np.ndarray, cfg: SpectroConfig) -> np.ndarray:
    """c -> beta * |c|^alpha * exp(i angle(c)); zero bins stay zero."""
    mag = np.abs(z)
    out = np.zeros_like(z)
    nz = mag > 0
    out[nz] = cfg.beta * mag[nz] ** cfg.alpha * (z[nz] / mag[nz])
    return out


def expand(z: np.ndarray, cfg: SpectroConfig) -> np.ndarray:
    """Exact inverse of compress."""
    mag = np.abs(z)
    out = np.zeros_like(z)
    nz = mag > 0
    out[nz] = (mag[nz] / cfg.beta) ** (1.0 / cfg.alpha) * (z[nz] / mag[nz])
    return out


def pack_frames(z: np.ndarray) -> np.ndarray:
    """(frames, bins) complex -> (frames, 2*bins) real [re | im]."""
    return np.concatenate([z.real, z.imag], axis=1)


def unpack_frames(fr: np.ndarray) -> np.ndarray:
    bins = fr.shape[1] // 2
    return fr[:, :bins] + 1j * fr[:, bins:]


def frames_to_blocks(fr: np.ndarray, block: int) -> np.ndarray:
    """Overlapping blocks of consecutive frames, hop one frame."""
    k = fr.shape[0]
    if k < block:
        raise AudioError(f"{k} frames < block size {block}")
    if block == 1:
        return fr.copy()
    return np.stack([fr[i : i + block].ravel() for i in range(k - block + 1)])


def blocks_to_frames(bl: np.ndarray, block: int, frames: int) -> np.ndarray:
    """Average overlapping block predictions back into per-frame rows."""
    if block == 1:
        return bl.copy()
    width = bl.shape[1] // block
    acc = np.zeros((frames, width))
    cnt = np.zeros((frames, 1))
    for i in range(bl.shape[0]):
        acc[i : i + block] += bl[i].reshape(block, width)
        cnt[i : i + block] += 1.0
    return acc / cnt


def waveform_to_state(wav: Waveform, cfg: SpectroConfig) -> tuple[np.ndarray, SpecLayout]:
    """stft -> compress -> pack -> blocks; the model-facing representation."""
    z, layout = stft_frames(wav, cfg)
    fr = pack_frames(compress(z, cfg))
    return frames_to_blocks(fr, cfg.block), layout


def state_to_waveform(blocks: np.ndarray, layout: SpecLayout, cfg: SpectroConfig) -> Waveform:
    fr = blocks_to_frames(blocks, cfg.block, layout.frames)
    z = expand(unpack_frames(fr), cfg)
    return istft_frames(z, layout, cfg)


# --------------------------------------------------------------------------
# scale-invariant metrics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsRecord:
    si_sdr: float
    si_sir: float
    si_sar: float

    def capped(self) -> tuple[float, float, float, str]:
        """CSV encoding: +inf mapped to the 300 dB cap plus a flag string."""
        vals = []
        flags = []
        for name, v in (("sdr", self.si_sdr), ("sir", self.si_sir), ("sar", self.si_sar)):
            if math.isinf(v):
                vals.append(CSV_DB_CAP)
                flags.append(name)
            else:
                vals.append(v)
        return (*vals, "+".join(flags) if flags else "")


def _ratio_db(num: float, den: float) -> float:
    if den == 0.0:
        return INF_DB
    return 10.0 * math.log10(num / den)


def si_metrics(estimate: Waveform, clean: Waveform, noise: Waveform) -> MetricsRecord:
    """Projection-based SI-SDR / SI-SIR / SI-SAR.

    target       = projection of the estimate onto span(clean)
    interference = projection of the residual onto span(noise orthogonalized
                   against clean)
    artifact     = what remains; target + interference + artifact == estimate.
    Zero denominators yield +inf rather than an error.
    """
    e = estimate.samples
    s = clean.samples
    n = noise.samples
    if not len(e) == len(s) == len(n):
        raise AudioError("metric inputs must share length")
    s_energy = float(np.dot(s, s))
    if s_energy == 0.0:
        raise AudioError("clean reference is identically zero")
    target = (float(np.dot(e, s)) / s_energy) * s
    resid = e - target
    n_perp = n - (float(np.dot(n, s)) / s_energy) * s
    n_perp_energy = float(np.dot(n_perp, n_perp))
    if n_perp_energy > 0.0:
        interference = (float(np.dot(resid, n_perp)) / n_perp_energy) * n_perp
    else:
        interference = np.zeros_like(resid)
    artifact = resid - interference
    t_energy = float(np.dot(target, target))
    return MetricsRecord(
        si_sdr=_ratio_db(t_energy, float(np.dot(resid, resid))),
        si_sir=_ratio_db(t_energy, float(np.dot(interference, interference))),
        si_sar=_ratio_db(t_energy, float(np.dot(artifact, artifact))),
    )


# --------------------------------------------------------------------------
# enhancement
# --------------------------------------------------------------------------

SAMPLERS = ("fm", "pfode", "eum")


def enhance_states(
    fn: Callable,
    y_blocks: np.ndarray,
    sampler: str,
    n_steps: int,
    sigma: float,
    t_delta: float,
    rng: np.random.Generator,
    sde_spec=None,
    t_rsp: float | None = None,
) -> np.ndarray:
    """Run one of the three samplers on a batch of conditioner states.

    ``fn`` is a vector-field model for the fm sampler and a score model
    for pfode/eum.  Exactly n_steps model calls.
    """
    if sampler == "fm":
        grid = solvers.make_fm_grid(n_steps, t_delta)
        x0 = y_blocks + sigma * rng.standard_normal(y_blocks.shape)
        out, _ = solvers.euler_ode(fn, x0, y_blocks, grid)
        return out
    if sde_spec is None:
        raise AudioError(f"sampler {sampler!r} requires an sde spec")
    if sampler == "pfode":
        out, _ = solvers.pf_ode_solve(sde_spec, fn, y_blocks, n_steps, t_delta, rng)
        return out
    if sampler == "eum":
        start = t_rsp if t_rsp is not None else 1.0 - t_delta
        return solvers.euler_maruyama_reverse(
            sde_spec, fn, y_blocks, n_steps, start, t_delta, rng
        )
    raise AudioError(f"unknown sampler {sampler!r}; expected one of {SAMPLERS}")


def enhance(
    ckpt: Checkpoint,
    noisy: Waveform,
    n_steps: int,
    rng: np.random.Generator,
    cfg: SpectroConfig,
    sampler: str = "fm",
    use_ema: bool = True,
    t_rsp: float | None = None,
) -> Waveform:
    """Full enhancement: stft -> compress -> sample -> expand -> istft."""
    if sampler == "fm" and ckpt.spec.mode != "vector_field":
        raise AudioError("fm sampler needs a vector-field checkpoint")
    if sampler in ("pfode", "eum") and ckpt.spec.mode != "score":
        raise AudioError(f"{sampler} sampler needs a score checkpoint")
    y_blocks, layout = waveform_to_state(noisy, cfg)
    if y_blocks.shape[1] != ckpt.spec.state_dim:
        raise AudioError(
            f"state dim {y_blocks.shape[1]} does not match checkpoint dim {ckpt.spec.state_dim}"
        )
    out = enhance_states(
        ckpt.field_fn(use_ema=use_ema),
        y_blocks,
        sampler,
        n_steps,
        ckpt.config.path.sigma,
        ckpt.config.t_delta,
        rng,
        sde_spec=ckpt.config.sde,
        t_rsp=t_rsp if t_rsp is not None else ckpt.config.t_rsp,
    )
    return state_to_waveform(out, layout, cfg)


# --------------------------------------------------------------------------
# WAV I/O (PCM 16-bit little-endian mono)
# --------------------------------------------------------------------------

WAV_FULL_SCALE = 0.25  # amplitude mapped to int16 full scale; headroom for mixes


def write_wav(path, wav: Waveform) -> None:
    x = np.clip(wav.samples / WAV_FULL_SCALE, -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wav.rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise AudioError(f"{path}: expected mono 16-bit PCM")
        rate = fh.getframerate()
        pcm = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    return Waveform(pcm.astype(float) / 32767.0 * WAV_FULL_SCALE, rate)

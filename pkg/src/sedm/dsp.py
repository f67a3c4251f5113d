"""Time-frequency analysis and synthesis.

STFT/ISTFT with Hann windowing and window-square overlap-add
normalization, polar decomposition of complex spectra, and phase
wrap/unwrap along the time axis. All grids are (frames, bins) arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PIPELINE_SAMPLE_RATE = 16000

# Window-sum cells below peak * this factor count as uncovered and
# synthesize to 0 instead of being divided through.
_OLA_EPS = 1e-12


@dataclass
class Waveform:
    """Mono time-domain signal with its sample rate."""

    samples: np.ndarray
    sample_rate: int = PIPELINE_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be mono 1-D, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis framing parameters."""

    window_len: int = 512
    hop: int = 256
    window_fn: str = "hann"

    def __post_init__(self):
        if self.window_len % 2 != 0:
            raise ValueError(f"window_len must be even, got {self.window_len}")
        if not 0 < self.hop <= self.window_len:
            raise ValueError(f"hop must satisfy 0 < hop <= window_len, got {self.hop}")
        if self.window_fn != "hann":
            raise ValueError(f"unsupported window function: {self.window_fn!r}")

    @property
    def bins(self) -> int:
        return self.window_len // 2 + 1

    def frames_for(self, n_samples: int) -> int:
        return (n_samples - self.window_len) // self.hop + 1


@dataclass
class MagPhase:
    """Polar decomposition of a spectrogram: mag >= 0, phase in (-pi, pi]."""

    mag: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        self.mag = np.asarray(self.mag, dtype=np.float64)
        self.phase = np.asarray(self.phase, dtype=np.float64)
        if self.mag.shape != self.phase.shape:
            raise ValueError(
                f"mag/phase shape mismatch: {self.mag.shape} vs {self.phase.shape}"
            )

    @property
    def shape(self):
        return self.mag.shape


def hann_window(length: int) -> np.ndarray:
    """Periodic Hann window (satisfies constant overlap-add at 50% hop)."""
    n = np.arange(length)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / length))


def stft(w: Waveform, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Short-time Fourier transform.

    Returns a complex (T, F) grid with T = (len - window_len)//hop + 1
    frames and F = window_len/2 + 1 one-sided bins. No padding or
    centering is applied; frames start at sample 0.
    """
    x = np.asarray(w.samples if isinstance(w, Waveform) else w, dtype=np.float64)
    n = len(x)
    if n < cfg.window_len:
        raise ValueError(
            f"signal of {n} samples is shorter than one window ({cfg.window_len})"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("signal contains non-finite samples")
    n_frames = cfg.frames_for(n)
    win = hann_window(cfg.window_len)
    idx = np.arange(cfg.window_len)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    frames = x[idx] * win[None, :]
    return np.fft.rfft(frames, axis=1)


def istft(spec: np.ndarray, cfg: StftConfig = StftConfig(),
          sample_rate: int = PIPELINE_SAMPLE_RATE) -> Waveform:
    """Inverse STFT by overlap-add with window-square normalization.

    Samples whose accumulated squared-window weight is (numerically)
    zero are defined as 0 rather than divided through.
    """
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[1] != cfg.bins:
        raise ValueError(
            f"spectrogram shape {spec.shape} inconsistent with F={cfg.bins}"
        )
    n_frames = spec.shape[0]
    win = hann_window(cfg.window_len)
    length = cfg.window_len + (n_frames - 1) * cfg.hop
    out = np.zeros(length)
    win_sq = np.zeros(length)
    frames = np.fft.irfft(spec, n=cfg.window_len, axis=1)
    for t in range(n_frames):
        start = t * cfg.hop
        out[start:start + cfg.window_len] += frames[t] * win
        win_sq[start:start + cfg.window_len] += win * win
    covered = win_sq > win_sq.max() * _OLA_EPS
    out[covered] /= win_sq[covered]
    out[~covered] = 0.0
    return Waveform(out, sample_rate)


def to_mag_phase(spec: np.ndarray) -> MagPhase:
    """Polar decomposition; the phase of a zero-modulus cell is 0."""
    spec = np.asarray(spec)
    if not np.all(np.isfinite(spec)):
        raise ValueError("spectrogram contains non-finite values")
    mag = np.abs(spec)
    phase = np.angle(spec)
    # np.angle yields [-pi, pi]; fold -pi onto pi for the (-pi, pi] range.
    phase = np.where(phase <= -np.pi, phase + 2.0 * np.pi, phase)
    phase = np.where(mag == 0.0, 0.0, phase)
    return MagPhase(mag, phase)


def from_mag_phase(mp: MagPhase) -> np.ndarray:
    """Recompose a complex grid from magnitude and phase."""
    if np.any(mp.mag < 0):
        raise ValueError("magnitude must be non-negative")
    return mp.mag * np.cos(mp.phase) + 1j * (mp.mag * np.sin(mp.phase))


def unwrap_phase(phase: np.ndarray) -> np.ndarray:
    """Unwrap along the time (frame) axis, per frequency bin."""
    phase = np.asarray(phase, dtype=np.float64)
    if phase.ndim == 1:
        return np.unwrap(phase)
    return np.unwrap(phase, axis=0)


def wrap_phase(phase: np.ndarray) -> np.ndarray:
    """Map arbitrary real phase back into (-pi, pi]."""
    wrapped = np.mod(np.asarray(phase, dtype=np.float64), 2.0 * np.pi)
    return np.where(wrapped > np.pi, wrapped - 2.0 * np.pi, wrapped)

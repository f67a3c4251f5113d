"""Real-noise ingestion, clip splitting and SNR mixing.

Each source recording is halved; the first half is cut into
non-overlapping training clips, the second half into evaluation clips,
so the two splits never share a sample. Clips keep their source offsets
so disjointness stays verifiable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from sedm.dsp import Waveform
from sedm.wavio import read_wav


@dataclass
class NoiseClip:
    samples: np.ndarray
    noise_type: str
    split: str
    index: int
    source_offset: int
    source_file: str = ""

    def waveform(self, sample_rate: int = 16000) -> Waveform:
        return Waveform(self.samples, sample_rate)


@dataclass
class NoiseBank:
    """Per-type train/eval clip pools of uniform length."""

    clip_len: int
    entries: dict[str, dict[str, list[NoiseClip]]] = field(default_factory=dict)

    @property
    def noise_types(self) -> list[str]:
        return sorted(self.entries)

    def clips(self, noise_type: str, split: str) -> list[NoiseClip]:
        if split not in ("train", "eval"):
            raise ValueError(f"unknown split {split!r}, expected 'train' or 'eval'")
        if noise_type == "any":
            pool = []
            for t in self.noise_types:
                pool.extend(self.entries[t][split])
            return pool
        if noise_type not in self.entries:
            raise ValueError(
                f"unknown noise type {noise_type!r}; have {self.noise_types}"
            )
        return self.entries[noise_type][split]


@dataclass(frozen=True)
class MixSpec:
    """One mixing condition: SNR, noise type and the stream seed."""

    snr_db: float
    noise_type: str = "any"
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise ValueError(f"snr_db must be finite, got {self.snr_db}")


def _segment_half(samples: np.ndarray, start: int, clip_len: int, noise_type: str,
                  split: str, base_index: int, source_file: str) -> list[NoiseClip]:
    clips = []
    for i in range(len(samples) // clip_len):
        off = i * clip_len
        clips.append(NoiseClip(
            samples=samples[off:off + clip_len].copy(),
            noise_type=noise_type,
            split=split,
            index=base_index + i,
            source_offset=start + off,
            source_file=source_file,
        ))
    return clips


def load_noise_dir(path: str, clip_len: int) -> NoiseBank:
    """Build a NoiseBank from ``<path>/<noise_type>/*.wav``.

    Every recording is split into two equal halves (train first, eval
    second), each half segmented into non-overlapping clips of
    ``clip_len`` samples; trailing remainders are dropped.
    """
    if clip_len <= 0:
        raise ValueError(f"clip_len must be positive, got {clip_len}")
    if not os.path.isdir(path):
        raise ValueError(f"noise directory does not exist: {path}")
    type_dirs = sorted(
        d for d in os.listdir(path) if os.path.isdir(os.path.join(path, d))
    )
    if not type_dirs:
        raise ValueError(f"noise directory has no noise-type subdirectories: {path}")
    bank = NoiseBank(clip_len=clip_len)
    for noise_type in type_dirs:
        tdir = os.path.join(path, noise_type)
        files = sorted(f for f in os.listdir(tdir) if f.lower().endswith(".wav"))
        if not files:
            raise ValueError(f"no WAV files for noise type {noise_type!r} in {tdir}")
        train: list[NoiseClip] = []
        eval_: list[NoiseClip] = []
        for fname in files:
            fpath = os.path.join(tdir, fname)
            rec = read_wav(fpath)
            if len(rec) < 2 * clip_len:
                raise ValueError(
                    f"{fpath}: recording of {len(rec)} samples is shorter than "
                    f"2*clip_len = {2 * clip_len}"
                )
            half = len(rec) // 2
            train.extend(_segment_half(
                rec.samples[:half], 0, clip_len, noise_type, "train",
                len(train), fname))
            eval_.extend(_segment_half(
                rec.samples[half:], half, clip_len, noise_type, "eval",
                len(eval_), fname))
        bank.entries[noise_type] = {"train": train, "eval": eval_}
    return bank


def sample_clip(bank: NoiseBank, noise_type: str, split: str,
                rng: np.random.Generator) -> NoiseClip:
    """Uniformly select one clip from the requested pool."""
    pool = bank.clips(noise_type, split)
    if not pool:
        raise ValueError(f"no clips available for type={noise_type!r} split={split!r}")
    return pool[int(rng.integers(len(pool)))]


def fit_to_length(samples: np.ndarray, length: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Tile a short clip (wrap-around) or crop a long one at a random offset."""
    n = len(samples)
    if n == length:
        return np.asarray(samples, dtype=np.float64).copy()
    if n < length:
        reps = -(-length // n)
        return np.tile(samples, reps)[:length]
    off = int(rng.integers(n - length + 1))
    return np.asarray(samples[off:off + length], dtype=np.float64).copy()


def mix_at_snr(speech: Waveform, noise: Waveform,
               snr_db: float) -> tuple[Waveform, Waveform]:
    """Mix speech and noise at a target SNR (mean-square power).

    Returns the noisy mixture and the scaled noise actually added. The
    achieved SNR matches the request to well under 1e-6 dB.
    """
    s = speech.samples
    v = noise.samples
    if len(s) != len(v):
        raise ValueError(f"length mismatch: speech {len(s)} vs noise {len(v)}")
    p_s = float(np.mean(s ** 2))
    p_n = float(np.mean(v ** 2))
    if p_s <= 0.0:
        raise ValueError("speech has zero power; cannot set an SNR")
    if p_n <= 0.0:
        raise ValueError("noise has zero power; cannot set an SNR")
    gain = np.sqrt(p_s / (p_n * 10.0 ** (snr_db / 10.0)))
    scaled = v * gain
    return Waveform(s + scaled, speech.sample_rate), Waveform(scaled, speech.sample_rate)


def manifest_lines(bank: NoiseBank) -> list[str]:
    """Render the bank as ``split<TAB>type<TAB>index<TAB>offset`` rows."""
    lines = []
    for noise_type in bank.noise_types:
        for split in ("train", "eval"):
            for clip in bank.entries[noise_type][split]:
                lines.append(
                    f"{split}\t{noise_type}\t{clip.index}\t{clip.source_offset}"
                )
    return lines

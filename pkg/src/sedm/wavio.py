"""RIFF/WAVE reading and writing for pipeline audio.

Accepts only PCM 16-bit signed little-endian mono files; everything else
is rejected with a descriptive error. Samples map to [-1, 1) through
division by 32768.
"""

from __future__ import annotations

import os
import wave

import numpy as np

from sedm.dsp import PIPELINE_SAMPLE_RATE, Waveform

_SCALE = 32768.0


def read_wav(path: str, expect_rate: int | None = PIPELINE_SAMPLE_RATE) -> Waveform:
    """Read a mono 16-bit PCM WAV file into a normalized Waveform."""
    try:
        with wave.open(path, "rb") as f:
            channels = f.getnchannels()
            width = f.getsampwidth()
            rate = f.getframerate()
            comp = f.getcomptype()
            n = f.getnframes()
            raw = f.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise ValueError(f"{path}: not a decodable WAV file ({exc})") from exc
    if comp != "NONE":
        raise ValueError(f"{path}: compressed WAV ({comp}) not supported, need PCM")
    if channels != 1:
        raise ValueError(f"{path}: expected mono audio, got {channels} channels")
    if width != 2:
        raise ValueError(f"{path}: expected 16-bit samples, got {8 * width}-bit")
    if expect_rate is not None and rate != expect_rate:
        raise ValueError(f"{path}: expected {expect_rate} Hz, got {rate} Hz")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / _SCALE
    return Waveform(samples, rate)


def write_wav(path: str, w: Waveform) -> None:
    """Write a Waveform as mono 16-bit PCM, clamping to [-1, 1)."""
    clamped = np.clip(w.samples, -1.0, 32767.0 / _SCALE)
    pcm = np.round(clamped * _SCALE).astype("<i2")
    tmp = path + ".tmp"
    with wave.open(tmp, "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())
    os.replace(tmp, path)

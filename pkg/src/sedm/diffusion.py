"""Noise schedule and the real-noise forward corruption process.

The forward chain is the discrete update ``Y_n = gamma_n * Y_{n-1} +
theta_n * I_n`` with retention coefficients ``gamma_n`` in (0, 1),
injection gains ``theta_n = sqrt(1 - gamma_n^2)`` (variance preserving
for unit-variance injections) and cumulative products ``gamma_bar``.
``I_n`` is a standardized feature grid of a randomly drawn noise clip,
or a standard-normal grid in the Gaussian ablation mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sedm.dsp import StftConfig, Waveform, stft, to_mag_phase, unwrap_phase


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step coefficients; step 1..N maps to array index 0..N-1."""

    gamma: np.ndarray
    theta: np.ndarray
    gamma_bar: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.gamma)

    def gamma_bar_at(self, n: int) -> float:
        """Cumulative product up to step n, with gamma_bar_0 = 1."""
        if not 0 <= n <= self.steps:
            raise ValueError(f"step {n} out of range [0, {self.steps}]")
        return 1.0 if n == 0 else float(self.gamma_bar[n - 1])

    def dump_lines(self) -> list[str]:
        """Audit listing: ``n gamma theta gamma_bar`` per step."""
        return [
            f"{n + 1} {self.gamma[n]:.9g} {self.theta[n]:.9g} {self.gamma_bar[n]:.9g}"
            for n in range(self.steps)
        ]


def make_schedule(steps: int, gamma_start: float = 0.999,
                  gamma_end: float = 0.95) -> DiffusionSchedule:
    """Linear retention schedule from gamma_start down to gamma_end."""
    if steps < 1:
        raise ValueError(f"schedule needs at least one step, got {steps}")
    if not 0.0 < gamma_end <= gamma_start < 1.0:
        raise ValueError(
            f"need 0 < gamma_end <= gamma_start < 1, got "
            f"({gamma_start}, {gamma_end})"
        )
    if steps == 1:
        gamma = np.array([gamma_start])
    else:
        gamma = np.linspace(gamma_start, gamma_end, steps)
    theta = np.sqrt(1.0 - gamma ** 2)
    gamma_bar = np.cumprod(gamma)
    return DiffusionSchedule(gamma=gamma, theta=theta, gamma_bar=gamma_bar)


def forward_step(y_prev: np.ndarray, clip_feat: np.ndarray, n: int,
                 sched: DiffusionSchedule) -> np.ndarray:
    """One corruption step ``Y_n = gamma_n * Y_{n-1} + theta_n * I_n``."""
    y_prev = np.asarray(y_prev)
    clip_feat = np.asarray(clip_feat)
    if y_prev.shape != clip_feat.shape:
        raise ValueError(
            f"forward_step: state {y_prev.shape} vs clip {clip_feat.shape}"
        )
    if not 1 <= n <= sched.steps:
        raise ValueError(f"step {n} out of range [1, {sched.steps}]")
    return sched.gamma[n - 1] * y_prev + sched.theta[n - 1] * clip_feat


def forward_process(y0: np.ndarray, clip_sampler, sched: DiffusionSchedule,
                    rng: np.random.Generator, steps: int | None = None):
    """Run the corruption chain, sampling one clip feature per step.

    ``clip_sampler(rng)`` must return a feature grid shaped like ``y0``
    (optionally a (grid, identity) pair). Returns the state list
    ``[Y_0, ..., Y_N]``, the injected feature grids and clip identities.
    """
    steps = sched.steps if steps is None else steps
    if steps > sched.steps:
        raise ValueError(f"requested {steps} steps but schedule has {sched.steps}")
    states = [np.asarray(y0, dtype=np.float64)]
    feats = []
    idents = []
    for n in range(1, steps + 1):
        drawn = clip_sampler(rng)
        if isinstance(drawn, tuple):
            feat, ident = drawn
        else:
            feat, ident = drawn, None
        feats.append(np.asarray(feat, dtype=np.float64))
        idents.append(ident)
        states.append(forward_step(states[-1], feats[-1], n, sched))
    return states, feats, idents


def gaussian_forward_step(y_prev: np.ndarray, n: int, sched: DiffusionSchedule,
                          rng: np.random.Generator) -> np.ndarray:
    """Forward step with a standard-normal grid instead of a clip."""
    noise = rng.standard_normal(np.asarray(y_prev).shape)
    return forward_step(y_prev, noise, n, sched)


def standardize(grid: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance normalization of a feature grid."""
    grid = np.asarray(grid, dtype=np.float64)
    std = grid.std()
    if std == 0.0:
        return grid - grid.mean()
    return (grid - grid.mean()) / std


def _span_clip(samples: np.ndarray, cfg: StftConfig, frames: int) -> np.ndarray:
    """Tile or crop a clip so its spectrogram spans exactly ``frames``."""
    need = cfg.window_len + (frames - 1) * cfg.hop
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < need:
        x = np.tile(x, -(-need // len(x)))
    return x[:need]


def clip_features(samples: np.ndarray, cfg: StftConfig, frames: int,
                  component: str) -> np.ndarray:
    """Standardized feature grid of a noise clip.

    ``component`` is 'mag', 'phase' (unwrapped) or 'complex'
    (standardized real/imag stacked along the bin axis).
    """
    spec = stft(Waveform(_span_clip(samples, cfg, frames)), cfg)
    if component == "complex":
        return np.concatenate(
            [standardize(spec.real), standardize(spec.imag)], axis=1)
    mp = to_mag_phase(spec)
    if component == "mag":
        return standardize(mp.mag)
    if component == "phase":
        return standardize(unwrap_phase(mp.phase))
    raise ValueError(f"unknown clip feature component {component!r}")


class ClipFeatureCache:
    """Memoized clip features, keyed by clip identity and component."""

    def __init__(self, cfg: StftConfig, frames: int):
        self.cfg = cfg
        self.frames = frames
        self._cache: dict[tuple, np.ndarray] = {}

    def features(self, clip, component: str) -> np.ndarray:
        key = (clip.noise_type, clip.split, clip.index, component)
        if key not in self._cache:
            self._cache[key] = clip_features(
                clip.samples, self.cfg, self.frames, component)
        return self._cache[key]


def make_clip_sampler(bank, noise_type: str, split: str,
                      cache: ClipFeatureCache, component: str):
    """Sampler closure over a noise bank for ``forward_process``."""
    from sedm.noisebank import sample_clip

    def sampler(rng: np.random.Generator):
        clip = sample_clip(bank, noise_type, split, rng)
        ident = f"{clip.noise_type}/{clip.split}/{clip.index}"
        return cache.features(clip, component), ident

    return sampler


def forward_pair(y0_mag, y0_phase, bank, noise_type: str, split: str,
                 cache: ClipFeatureCache, sched: DiffusionSchedule,
                 rng: np.random.Generator, shared_clip: bool = True,
                 gaussian: bool = False):
    """Corrupt the magnitude and phase grids side by side.

    With ``shared_clip`` the same drawn clip supplies both the magnitude
    feature (magnitude path) and the unwrapped-phase feature (phase
    path) at each step; otherwise each path draws independently. The
    Gaussian mode replaces clip features with standard-normal grids.
    Returns per-path (states, feats) plus the clip identities.
    """
    from sedm.noisebank import sample_clip

    states_a = [np.asarray(y0_mag, dtype=np.float64)]
    states_p = [np.asarray(y0_phase, dtype=np.float64)]
    feats_a, feats_p, idents = [], [], []
    for n in range(1, sched.steps + 1):
        if gaussian:
            fa = rng.standard_normal(states_a[0].shape)
            fp = rng.standard_normal(states_p[0].shape)
            idents.append("gaussian")
        else:
            clip = sample_clip(bank, noise_type, split, rng)
            fa = cache.features(clip, "mag")
            if shared_clip:
                fp = cache.features(clip, "phase")
            else:
                other = sample_clip(bank, noise_type, split, rng)
                fp = cache.features(other, "phase")
            idents.append(f"{clip.noise_type}/{clip.split}/{clip.index}")
        feats_a.append(fa)
        feats_p.append(fp)
        states_a.append(forward_step(states_a[-1], fa, n, sched))
        states_p.append(forward_step(states_p[-1], fp, n, sched))
    return (states_a, feats_a), (states_p, feats_p), idents

"""Diffusion/reverse block stacks and the noise-aware reverse process.

The magnitude and phase domains get parameter-disjoint networks. Each
network owns an encoder of downsampling diffusion blocks (multi-
resolution skip outputs are length-aligned and learned-weight summed
into a reconstruction target) and a stack of reverse blocks. Reverse
block m carries trainable step coefficients (gamma_m, theta_m) and two
heads that predict the injected noise feature and the clean speech
feature; the reverse update is

    Y_{m-1} = (1/gamma_m) * (Y_m - theta_m/(1-gamma_m) * I_hat_m) + sigma_m
    sigma_m = (1 - gbar_{m-1}) / (1 - gbar_m) * theta_m

with sigma_m applied as a deterministic additive bias. Inference runs
only the reverse stack, starting from the noisy spectrogram.
"""

from __future__ import annotations

import os
import struct
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from sedm import autodiff as ad
from sedm.autodiff import Parameter, Tensor
from sedm.diffusion import DiffusionSchedule, forward_step, make_schedule
from sedm.dsp import MagPhase, StftConfig, unwrap_phase, wrap_phase

LAYERS_PER_BLOCK = 2

CHECKPOINT_MAGIC = b"SEDM"
CHECKPOINT_VERSION = 1

_COEFF_LO = 1e-4
_COEFF_HI = 1.0 - 1e-4


@dataclass(frozen=True)
class SEDMConfig:
    """Model shape: block count N (= diffusion steps), channels, kernel."""

    n_blocks: int = 6
    channels: int = 16
    kernel: int = 3
    stft: StftConfig = field(default_factory=StftConfig)
    steps: int | None = None

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.kernel % 2 != 1:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.steps is None:
            object.__setattr__(self, "steps", self.n_blocks)
        elif self.steps != self.n_blocks:
            raise ValueError(
                f"reverse steps ({self.steps}) must equal n_blocks "
                f"({self.n_blocks})"
            )


def step_embedding(m: int, dim: int) -> np.ndarray:
    """Sinusoidal index embedding; constant norm sqrt(dim/2) for even dim."""
    if m < 0:
        raise ValueError(f"step index must be >= 0, got {m}")
    half = (dim + 1) // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    ang = m * freqs
    emb = np.empty(dim)
    emb[0::2] = np.sin(ang[: (dim + 1) // 2])
    emb[1::2] = np.cos(ang[: dim // 2])
    return emb


def block_dilations(n_layers: int) -> list[int]:
    """Dilation doubles at each layer within a block: [1, 2, 4, ...]."""
    return [2 ** l for l in range(n_layers)]


class _Registry:
    """Insertion-ordered parameter store shared by one model."""

    def __init__(self):
        self.params: dict[str, Parameter] = {}

    def make(self, name: str, data) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data)
        self.params[name] = p
        return p


class BiDilConv:
    """Two parallel dilated 1-D convs, one causal and one anti-causal."""

    def __init__(self, reg: _Registry, name: str, channels: int, kernel: int,
                 dilation: int, rng: np.random.Generator):
        std = np.sqrt(1.0 / (channels * kernel * 2))
        self.kernel = kernel
        self.dilation = dilation
        shape = (channels, channels, kernel)
        self.w_fwd = reg.make(f"{name}.w_fwd", rng.standard_normal(shape) * std)
        self.w_bwd = reg.make(f"{name}.w_bwd", rng.standard_normal(shape) * std)
        self.bias = reg.make(f"{name}.bias", np.zeros((channels, 1)))

    def __call__(self, x: Tensor) -> Tensor:
        span = (self.kernel - 1) * self.dilation
        causal = ad.conv1d_dilated(x, self.w_fwd, self.dilation, (span, 0))
        anti = ad.conv1d_dilated(x, self.w_bwd, self.dilation, (0, span))
        return ad.add(ad.add(causal, anti), self.bias)


class _ConvStack:
    """Shared body of diffusion and reverse blocks.

    conv -> step-embedding add -> PReLU -> conv -> ... -> residual add.
    """

    def __init__(self, reg: _Registry, name: str, channels: int, kernel: int,
                 rng: np.random.Generator, n_layers: int = LAYERS_PER_BLOCK):
        self.channels = channels
        self.convs = [
            BiDilConv(reg, f"{name}.conv{l}", channels, kernel, d, rng)
            for l, d in enumerate(block_dilations(n_layers))
        ]
        self.slopes = [
            reg.make(f"{name}.slope{l}", np.full((channels, 1), 0.25))
            for l in range(1, n_layers)
        ]
        std = np.sqrt(1.0 / channels)
        self.emb_w = reg.make(
            f"{name}.emb_w", rng.standard_normal((channels, channels)) * std)

    def __call__(self, x: Tensor, step: int) -> Tensor:
        emb = ad.constant(step_embedding(step, self.channels)[:, None])
        h = self.convs[0](x)
        h = ad.add(h, ad.matmul(self.emb_w, emb))
        for conv, slope in zip(self.convs[1:], self.slopes):
            h = conv(ad.prelu(h, slope))
        return ad.add(h, x)


class DiffusionBlock:
    """Residual conv stack followed by a stride-2 downsampler; also emits
    a full-length skip projection for the multi-resolution sum."""

    def __init__(self, reg: _Registry, name: str, channels: int, kernel: int,
                 rng: np.random.Generator, n_layers: int = LAYERS_PER_BLOCK):
        self.body = _ConvStack(reg, name, channels, kernel, rng, n_layers)
        std = np.sqrt(1.0 / channels)
        self.skip_w = reg.make(
            f"{name}.skip_w", rng.standard_normal((channels, channels)) * std)

    def __call__(self, x: Tensor, step: int) -> tuple[Tensor, Tensor]:
        h = self.body(x, step)
        skip = ad.matmul(self.skip_w, h)
        return ad.downsample_stride2(h), skip


class ReverseBlock:
    """Conv stack at half resolution, a 2x upsampler and two estimate
    heads (injected noise and clean speech), plus the trainable step
    coefficients gamma_m and theta_m."""

    def __init__(self, reg: _Registry, name: str, channels: int, kernel: int,
                 bins: int, gamma_init: float, theta_init: float,
                 rng: np.random.Generator, n_layers: int = LAYERS_PER_BLOCK):
        self.body = _ConvStack(reg, name, channels, kernel, rng, n_layers)
        # Zero-initialized heads: the first untrained iteration predicts
        # I_hat = 0 so the reverse update collapses to its theta-free form.
        self.noise_w = reg.make(f"{name}.noise_w", np.zeros((bins, channels)))
        self.noise_b = reg.make(f"{name}.noise_b", np.zeros((bins, 1)))
        self.speech_w = reg.make(f"{name}.speech_w", np.zeros((bins, channels)))
        self.speech_b = reg.make(f"{name}.speech_b", np.zeros((bins, 1)))
        self.gamma = reg.make(f"{name}.gamma", np.array([gamma_init]))
        self.theta = reg.make(f"{name}.theta", np.array([theta_init]))

    def __call__(self, down: Tensor, step: int) -> tuple[Tensor, Tensor]:
        h = self.body(down, step)
        up = ad.upsample_nearest2x(h)
        i_hat = ad.add(ad.matmul(self.noise_w, up), self.noise_b)
        s_raw = ad.add(ad.matmul(self.speech_w, up), self.speech_b)
        return i_hat, s_raw


class PathNetwork:
    """Encoder + reverse stack for one feature domain."""

    def __init__(self, reg: _Registry, name: str, cfg: SEDMConfig, bins: int,
                 sched: DiffusionSchedule, rng: np.random.Generator,
                 softplus_head: bool):
        c = cfg.channels
        self.name = name
        self.bins = bins
        self.softplus_head = softplus_head
        self.n_blocks = cfg.n_blocks
        std_in = np.sqrt(1.0 / bins)
        std_c = np.sqrt(1.0 / c)
        self.in_w = reg.make(f"{name}.in_w", rng.standard_normal((c, bins)) * std_in)
        self.in_b = reg.make(f"{name}.in_b", np.zeros((c, 1)))
        self.blocks = [
            DiffusionBlock(reg, f"{name}.block{n}", c, cfg.kernel, rng)
            for n in range(cfg.n_blocks)
        ]
        self.enc_w = reg.make(f"{name}.enc_w", rng.standard_normal((c, c)) * std_c)
        self.enc_b = reg.make(f"{name}.enc_b", np.zeros((c, 1)))
        self.skip_scales = [
            reg.make(f"{name}.skip_scale{n}", np.array([1.0 / cfg.n_blocks]))
            for n in range(cfg.n_blocks)
        ]
        self.recon_w = reg.make(
            f"{name}.recon_w", rng.standard_normal((bins, c)) * std_c)
        self.recon_b = reg.make(f"{name}.recon_b", np.zeros((bins, 1)))
        self.rev_in_w = reg.make(
            f"{name}.rev_in_w", rng.standard_normal((c, bins)) * std_in)
        self.rev_in_b = reg.make(f"{name}.rev_in_b", np.zeros((c, 1)))
        self.rev_blocks = [
            ReverseBlock(reg, f"{name}.rev{m}", c, cfg.kernel, bins,
                         float(sched.gamma[m]), float(sched.theta[m]), rng)
            for m in range(cfg.n_blocks)
        ]

    # -- encoder ------------------------------------------------------

    def encode(self, grid_ch: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Run the diffusion blocks over a (bins, L) feature grid.

        Returns (latent, skip_sum, recon); L must be divisible by
        2**n_blocks.
        """
        length = grid_ch.shape[1]
        if length % (2 ** self.n_blocks) != 0:
            raise ValueError(
                f"encoder length {length} not divisible by 2^{self.n_blocks}"
            )
        h = ad.add(ad.matmul(self.in_w, grid_ch), self.in_b)
        skip_sum = None
        for n, block in enumerate(self.blocks):
            h, skip = block(h, n + 1)
            for _ in range(n):
                skip = ad.upsample_nearest2x(skip)
            term = ad.mul(skip, self.skip_scales[n])
            skip_sum = term if skip_sum is None else ad.add(skip_sum, term)
        latent = ad.add(ad.matmul(self.enc_w, h), self.enc_b)
        recon = ad.add(ad.matmul(self.recon_w, skip_sum), self.recon_b)
        return latent, skip_sum, recon

    # -- reverse ------------------------------------------------------

    def head_step(self, y_ch: Tensor, m: int) -> tuple[Tensor, Tensor]:
        """Run reverse block m's heads on a (bins, L) grid; L even."""
        if y_ch.shape[1] % 2 != 0:
            raise ValueError(f"reverse step needs even length, got {y_ch.shape[1]}")
        block = self.rev_blocks[m - 1]
        stem = ad.add(ad.matmul(self.rev_in_w, y_ch), self.rev_in_b)
        down = ad.downsample_stride2(stem)
        i_hat, s_raw = block(down, m)
        s_hat = ad.softplus(s_raw) if self.softplus_head else s_raw
        return i_hat, s_hat

    def reverse_step_ch(self, y_ch: Tensor, m: int, sched: DiffusionSchedule):
        """Full reverse step on a (bins, L) grid: heads plus the update."""
        if not 1 <= m <= len(self.rev_blocks):
            raise ValueError(f"reverse step {m} out of range [1, {len(self.rev_blocks)}]")
        block = self.rev_blocks[m - 1]
        self._clamp_coeff(block)
        i_hat, s_hat = self.head_step(y_ch, m)
        gamma, theta = block.gamma, block.theta
        gb_prev = sched.gamma_bar_at(m - 1)
        gb_cur = sched.gamma_bar_at(m)
        inv_gamma = ad.reciprocal(gamma)
        noise_coeff = ad.mul(theta, ad.reciprocal(ad.sub(1.0, gamma)))
        sigma = ad.mul(theta, (1.0 - gb_prev) / (1.0 - gb_cur))
        y_prev = ad.add(
            ad.mul(inv_gamma, ad.sub(y_ch, ad.mul(noise_coeff, i_hat))),
            sigma,
        )
        return y_prev, i_hat, s_hat

    def _clamp_coeff(self, block: ReverseBlock) -> None:
        g = float(block.gamma.data[0])
        if not _COEFF_LO < g < _COEFF_HI:
            clamped = min(max(g, _COEFF_LO), _COEFF_HI)
            warnings.warn(
                f"{block.gamma.name} = {g:.6g} outside (0, 1); "
                f"clamped to {clamped:.6g}",
                RuntimeWarning,
            )
            block.gamma.data[0] = clamped


class SEDMModel:
    """Paired (or single, in ablation modes) domain networks."""

    def __init__(self, cfg: SEDMConfig, sched: DiffusionSchedule, mode: str,
                 rng: np.random.Generator):
        if mode not in ("dual", "mag", "complex"):
            raise ValueError(f"unknown model mode {mode!r}")
        self.cfg = cfg
        self.sched = sched
        self.mode = mode
        self._reg = _Registry()
        bins = cfg.stft.bins
        if mode == "dual":
            self.nets = {
                "A": PathNetwork(self._reg, "A", cfg, bins, sched, rng, True),
                "P": PathNetwork(self._reg, "P", cfg, bins, sched, rng, False),
            }
        elif mode == "mag":
            self.nets = {
                "A": PathNetwork(self._reg, "A", cfg, bins, sched, rng, True),
            }
        else:
            self.nets = {
                "C": PathNetwork(self._reg, "C", cfg, 2 * bins, sched, rng, False),
            }

    @property
    def params(self) -> dict[str, Parameter]:
        return self._reg.params

    def parameters(self) -> list[Parameter]:
        return list(self._reg.params.values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def check_finite(self) -> None:
        for p in self.parameters():
            if not np.isfinite(p.data).all():
                raise FloatingPointError(f"parameter {p.name} is not finite")


def build_model(cfg: SEDMConfig, rng: np.random.Generator,
                sched: DiffusionSchedule | None = None,
                mode: str = "dual") -> SEDMModel:
    """Deterministically initialize a model for the given seed stream."""
    if sched is None:
        sched = make_schedule(cfg.steps)
    if sched.steps != cfg.steps:
        raise ValueError(
            f"schedule has {sched.steps} steps but config wants {cfg.steps}"
        )
    return SEDMModel(cfg, sched, mode, rng)


# ---------------------------------------------------------------------------
# Grid plumbing: padding, normalization, orientation
# ---------------------------------------------------------------------------

def pad_frames(grid: np.ndarray, multiple: int) -> tuple[np.ndarray, int]:
    """Zero-pad the frame axis of a (T, F) grid up to a multiple."""
    t = grid.shape[0]
    target = -(-t // multiple) * multiple
    if target == t:
        return grid, t
    pad = np.zeros((target - t, grid.shape[1]), dtype=grid.dtype)
    return np.concatenate([grid, pad], axis=0), t


def rms_scale(grid: np.ndarray) -> float:
    """Per-utterance normalization scale; 1.0 for an all-zero grid."""
    s = float(np.sqrt(np.mean(np.asarray(grid) ** 2)))
    return s if s > 0.0 else 1.0


# ---------------------------------------------------------------------------
# Public operations on (T, F) grids
# ---------------------------------------------------------------------------

def reverse_update(y, i_hat, gamma: float, theta: float,
                   gb_prev: float, gb_cur: float):
    """The reverse-step update rule on plain arrays or scalars."""
    sigma = (1.0 - gb_prev) / (1.0 - gb_cur) * theta
    return (np.asarray(y) - theta / (1.0 - gamma) * np.asarray(i_hat)) / gamma + sigma


def reverse_step(model: SEDMModel, y_m: np.ndarray, m: int,
                 sched: DiffusionSchedule | None = None, path: str | None = None):
    """One reverse step on a (T, F) grid; returns (y_prev, i_hat, s_hat)."""
    sched = sched or model.sched
    net = model.nets[path or next(iter(model.nets))]
    grid = np.asarray(y_m, dtype=np.float64)
    padded, t0 = pad_frames(grid, 2)
    y_ch = ad.constant(padded.T)
    y_prev, i_hat, s_hat = net.reverse_step_ch(y_ch, m, sched)
    return (
        y_prev.data.T[:t0].astype(np.float64),
        i_hat.data.T[:t0].astype(np.float64),
        s_hat.data.T[:t0].astype(np.float64),
    )


def diffusion_net_forward(model: SEDMModel, y0: np.ndarray, clips, sched=None,
                          path: str | None = None):
    """Corrupt ``y0`` with the given per-step clip features, then encode.

    Returns (latent, skip_sum, recon) as (channels-or-bins, L) arrays;
    skip_sum and recon are stripped back to the input frame count, the
    latent keeps the padded length / 2**N.
    """
    sched = sched or model.sched
    net = model.nets[path or next(iter(model.nets))]
    state = np.asarray(y0, dtype=np.float64)
    for n, feat in enumerate(clips, start=1):
        state = forward_step(state, feat, n, sched)
    padded, t0 = pad_frames(state, 2 ** net.n_blocks)
    latent, skip_sum, recon = net.encode(ad.constant(padded.T))
    return (
        latent.data.astype(np.float64),
        skip_sum.data[:, :t0].astype(np.float64),
        recon.data[:, :t0].astype(np.float64),
    )


def enhance(model: SEDMModel, noisy: MagPhase) -> MagPhase:
    """Run the reverse stack over both domains of a noisy spectrogram."""
    model.check_finite()
    if model.mode == "complex":
        return _enhance_complex(model, noisy)
    t0 = noisy.mag.shape[0]
    mult = 2 ** model.cfg.n_blocks
    mag_pad, _ = pad_frames(noisy.mag, mult)
    mag_scale = rms_scale(mag_pad)
    mag_est = _run_reverse(model.nets["A"], mag_pad / mag_scale, model.sched)
    mag_out = mag_est.T[:t0] * mag_scale
    if model.mode == "mag":
        phase_out = noisy.phase
    else:
        un = unwrap_phase(noisy.phase)
        ph_pad, _ = pad_frames(un, mult)
        ph_scale = rms_scale(ph_pad)
        ph_est = _run_reverse(model.nets["P"], ph_pad / ph_scale, model.sched)
        phase_out = wrap_phase(ph_est.T[:t0] * ph_scale)
    return MagPhase(mag_out, phase_out)


def _run_reverse(net: PathNetwork, grid: np.ndarray,
                 sched: DiffusionSchedule) -> np.ndarray:
    """M reverse steps from a normalized (T, F) grid; returns (F, T)."""
    y = ad.constant(grid.T)
    s_hat = None
    for m in range(len(net.rev_blocks), 0, -1):
        y, _, s_hat = net.reverse_step_ch(y, m, sched)
    return s_hat.data


def _enhance_complex(model: SEDMModel, noisy: MagPhase) -> MagPhase:
    bins = model.cfg.stft.bins
    t0 = noisy.mag.shape[0]
    mult = 2 ** model.cfg.n_blocks
    re = noisy.mag * np.cos(noisy.phase)
    im = noisy.mag * np.sin(noisy.phase)
    grid = np.concatenate([re, im], axis=1)
    grid_pad, _ = pad_frames(grid, mult)
    scale = rms_scale(grid_pad)
    est = _run_reverse(model.nets["C"], grid_pad / scale, model.sched).T[:t0] * scale
    re_e, im_e = est[:, :bins], est[:, bins:]
    mag = np.sqrt(re_e ** 2 + im_e ** 2)
    phase = np.where(mag == 0.0, 0.0, np.arctan2(im_e, re_e))
    phase = np.where(phase <= -np.pi, phase + 2.0 * np.pi, phase)
    return MagPhase(mag, phase)


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, model: SEDMModel) -> None:
    """Serialize config, schedule and parameters with a trailing CRC32."""
    cfg = model.cfg
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack(
        "<6I", cfg.n_blocks, cfg.channels, cfg.kernel, cfg.steps,
        cfg.stft.window_len, cfg.stft.hop,
    )

    def tensor_record(name: str, array: np.ndarray) -> bytes:
        name_b = name.encode("utf-8")
        arr = np.asarray(array, dtype=np.float32)
        rec = struct.pack("<I", len(name_b)) + name_b
        rec += struct.pack("<I", arr.ndim)
        rec += struct.pack(f"<{arr.ndim}I", *arr.shape)
        rec += arr.astype("<f4").tobytes()
        return rec

    out += tensor_record("schedule.gamma", model.sched.gamma)
    out += tensor_record("schedule.theta", model.sched.theta)
    out += tensor_record("schedule.gamma_bar", model.sched.gamma_bar)
    for p in model.parameters():
        out += tensor_record(p.name, p.data)
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(bytes(out))
    os.replace(tmp, path)


def load_checkpoint(path: str) -> SEDMModel:
    """Rebuild a model from a checkpoint, verifying magic and CRC."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8 + 24 + 4:
        raise CheckpointError(f"{path}: truncated checkpoint")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path}: CRC mismatch, refusing to load")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    n_blocks, channels, kernel, steps, window_len, hop = struct.unpack_from(
        "<6I", blob, 8)
    pos = 8 + 24
    tensors: dict[str, np.ndarray] = {}
    end = len(blob) - 4
    while pos < end:
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
        pos += 4 * count
        tensors[name] = arr.reshape(dims).copy()
    if pos != end:
        raise CheckpointError(f"{path}: trailing bytes in tensor section")
    for key in ("schedule.gamma", "schedule.theta", "schedule.gamma_bar"):
        if key not in tensors:
            raise CheckpointError(f"{path}: missing {key}")
    sched = DiffusionSchedule(
        gamma=tensors.pop("schedule.gamma").astype(np.float64),
        theta=tensors.pop("schedule.theta").astype(np.float64),
        gamma_bar=tensors.pop("schedule.gamma_bar").astype(np.float64),
    )
    if any(n.startswith("C.") for n in tensors):
        mode = "complex"
    elif any(n.startswith("P.") for n in tensors):
        mode = "dual"
    else:
        mode = "mag"
    cfg = SEDMConfig(
        n_blocks=n_blocks, channels=channels, kernel=kernel,
        stft=StftConfig(window_len=window_len, hop=hop), steps=steps,
    )
    model = build_model(cfg, np.random.default_rng(0), sched, mode)
    expected = set(model.params)
    got = set(tensors)
    if expected != got:
        missing = sorted(expected - got)[:3]
        extra = sorted(got - expected)[:3]
        raise CheckpointError(
            f"{path}: parameter set mismatch (missing {missing}, extra {extra})"
        )
    for name, arr in tensors.items():
        p = model.params[name]
        if p.data.shape != arr.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: {arr.shape} vs {p.data.shape}"
            )
        p.data = arr.astype(np.float32)
    return model

"""Optimization loop: Adam with weight decay, LR schedule, seeding,
checkpointing, and the plain-text config file the CLI consumes.

Training is fully deterministic under a fixed seed: one master random
stream drives batch shuffling and clip sampling, parameters update in a
fixed order, and logs are written with fixed formatting.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from sedm import ccc as ccc_mod
from sedm.autodiff import Parameter
from sedm.ccc import CCCModule, EpochSetup, SampleFeatures, ccc_train_epoch
from sedm.diffusion import ClipFeatureCache, DiffusionSchedule, make_schedule
from sedm.dsp import StftConfig, Waveform, stft, to_mag_phase, unwrap_phase
from sedm.model import (SEDMConfig, SEDMModel, build_model, pad_frames,
                        rms_scale, save_checkpoint)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr_init: float = 0.03
    lr_drops: tuple = ((0.6, 0.1), (0.8, 0.1))
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_fraction: float = 0.1
    seed: int = 0
    grad_clip: float = 5.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lr_init <= 0:
            raise ValueError(f"lr_init must be positive, got {self.lr_init}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError(
                f"warmup_fraction must be in [0, 1), got {self.warmup_fraction}"
            )
        for frac, _ in self.lr_drops:
            if not 0.0 < frac < 1.0:
                raise ValueError(f"lr drop fraction {frac} outside (0, 1)")

    @property
    def warmup_epochs(self) -> int:
        return int(round(self.warmup_fraction * self.epochs))


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Piecewise-constant learning rate with multiplicative drops."""
    if epoch < 1:
        raise ValueError(f"epoch must be >= 1, got {epoch}")
    lr = cfg.lr_init
    for frac, mult in cfg.lr_drops:
        if epoch >= int(round(frac * cfg.epochs)):
            lr *= mult
    return lr


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: list
    v: list
    t: int = 0


def adam_step(state: OptimizerState, params: list[Parameter], grads: list,
              lr: float, cfg: TrainConfig) -> None:
    """Standard Adam with bias correction; weight decay enters the
    gradient as a classic L2 term."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {p.name}")
        g = g + np.float32(cfg.weight_decay) * p.data
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data = p.data - np.float32(lr) * m_hat / (np.sqrt(v_hat) + np.float32(cfg.eps))


class AdamOptimizer:
    """Owns the moment buffers and applies clipping + Adam per step."""

    def __init__(self, params: list[Parameter], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state = OptimizerState(
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
        )

    def step(self, lr: float) -> None:
        grads = [
            p.grad if p.grad is not None else np.zeros_like(p.data)
            for p in self.params
        ]
        clip = self.cfg.grad_clip
        if clip > 0:
            norm_sq = 0.0
            for g in grads:
                norm_sq += float(np.sum(g.astype(np.float64) ** 2))
            norm = np.sqrt(norm_sq)
            if norm > clip:
                scale = np.float32(clip / norm)
                grads = [g * scale for g in grads]
        adam_step(self.state, self.params, grads, lr, self.cfg)
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# Sample preparation
# ---------------------------------------------------------------------------

def prepare_sample(name: str, clean: Waveform, stft_cfg: StftConfig,
                   n_blocks: int, complex_mode: bool = False) -> SampleFeatures:
    """Grids, padding and normalization scales for one clean utterance."""
    spec = stft(clean, stft_cfg)
    mp = to_mag_phase(spec)
    frames = mp.mag.shape[0]
    mult = 2 ** n_blocks
    a0, _ = pad_frames(mp.mag, mult)
    p0, _ = pad_frames(unwrap_phase(mp.phase), mult)
    scale_a, scale_p = rms_scale(a0), rms_scale(p0)
    sample = SampleFeatures(
        name=name, clean=clean, frames=frames,
        a0_raw=a0, p0_raw=p0,
        a0n=a0 / scale_a, p0n=p0 / scale_p,
        scale_a=scale_a, scale_p=scale_p,
    )
    if complex_mode:
        c0 = np.concatenate([spec.real, spec.imag], axis=1)
        c0, _ = pad_frames(c0, mult)
        scale_c = rms_scale(c0)
        sample.c0_raw = c0
        sample.c0n = c0 / scale_c
        sample.scale_c = scale_c
    return sample


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: SEDMModel
    ccc: CCCModule
    loss_rows: list
    epoch_summaries: list
    checkpoint_path: str | None


def train(model: SEDMModel, ccc: CCCModule, samples: list[SampleFeatures],
          bank, sched: DiffusionSchedule, cfg: TrainConfig,
          setup: EpochSetup, out_checkpoint: str | None = None,
          loss_log: str | None = None, metrics_log: str | None = None) -> TrainResult:
    """Full training run; one Adam step per batch, checkpoints at the end
    (and at ``checkpoint_every`` intervals). A non-finite loss aborts,
    keeping the last good checkpoint on disk."""
    if not samples:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    optimizer = AdamOptimizer(model.parameters() + ccc.parameters(), cfg)
    loss_rows: list[dict] = []
    epoch_summaries: list[dict] = []
    wrote_checkpoint = False
    try:
        for epoch in range(1, cfg.epochs + 1):
            lr = lr_at(epoch, cfg)
            order = rng.permutation(len(samples))
            batches = [
                [samples[j] for j in order[i:i + cfg.batch_size]]
                for i in range(0, len(order), cfg.batch_size)
            ]
            report = ccc_train_epoch(ccc, model, batches, epoch, optimizer,
                                     setup, rng, lr)
            loss_rows.extend(report["rows"])
            epoch_summaries.append(_summarize(report, lr))
            if (cfg.checkpoint_every and out_checkpoint
                    and epoch % cfg.checkpoint_every == 0):
                save_checkpoint(out_checkpoint, model)
                wrote_checkpoint = True
    except FloatingPointError as exc:
        kept = out_checkpoint if wrote_checkpoint else None
        raise RuntimeError(
            f"training aborted: {exc}; last good checkpoint: {kept}"
        ) from exc
    if out_checkpoint:
        save_checkpoint(out_checkpoint, model)
    if loss_log:
        write_loss_log(loss_log, loss_rows)
    if metrics_log:
        write_metrics_log(metrics_log, epoch_summaries)
    return TrainResult(model, ccc, loss_rows, epoch_summaries, out_checkpoint)


def _summarize(report: dict, lr: float) -> dict:
    rows = report["rows"]
    summary = {"epoch": report["epoch"], "lr": lr, "mean_loss": report["mean_loss"]}
    for key in ("l_A", "l_P", "l_PtoA", "l_AtoP", "l_A_combined", "l_P_combined"):
        vals = [r[key] for r in rows if key in r]
        if vals:
            summary[key] = sum(vals) / len(vals)
    return summary


LOSS_LOG_HEADER = "epoch,step,l_A,l_P,l_PtoA,l_AtoP,l_A_combined,l_P_combined"
METRICS_LOG_HEADER = ("epoch,lr,mean_loss,l_A,l_P,l_PtoA,l_AtoP,"
                      "l_A_combined,l_P_combined")


def _fmt(value) -> str:
    return "" if value is None else f"{value:.9g}"


def write_loss_log(path: str, rows: list[dict]) -> None:
    lines = [LOSS_LOG_HEADER]
    for r in rows:
        cells = [str(r["epoch"]), str(r["step"])]
        for key in ("l_A", "l_P", "l_PtoA", "l_AtoP",
                    "l_A_combined", "l_P_combined"):
            cells.append(_fmt(r.get(key)))
        lines.append(",".join(cells))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_metrics_log(path: str, summaries: list[dict]) -> None:
    lines = [METRICS_LOG_HEADER]
    for s in summaries:
        cells = [str(s["epoch"]), _fmt(s["lr"]), _fmt(s["mean_loss"])]
        for key in ("l_A", "l_P", "l_PtoA", "l_AtoP",
                    "l_A_combined", "l_P_combined"):
            cells.append(_fmt(s.get(key)))
        lines.append(",".join(cells))
    atomic_write_text(path, "\n".join(lines) + "\n")


def atomic_write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Config file: ``key = value`` lines, '#' comments
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Everything a full training/evaluation run needs."""

    model: SEDMConfig = field(default_factory=SEDMConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gamma_start: float = 0.999
    gamma_end: float = 0.95
    lambda1: float = 0.1
    lambda2: float = 0.1
    speech_dir: str = ""
    noise_dir: str = ""
    clip_len: int = 16000
    noise_type: str = "any"
    holdout: int = 0
    mix_snr_db: float = 0.0
    use_diffusion: bool = True
    use_phase: bool = True
    use_ccc: bool = True
    noise_mode: str = "real"
    cross_mode: str = "dual"
    update_reverse: bool = True
    joint_diffusion: bool = True
    shared_clip: bool = True
    trained_paths: tuple = ("A", "P")

    @property
    def model_mode(self) -> str:
        if self.use_phase:
            return "dual"
        return "complex" if self.use_ccc else "mag"

    def make_schedule(self) -> DiffusionSchedule:
        return make_schedule(self.model.steps, self.gamma_start, self.gamma_end)

    def make_setup(self, bank, cache) -> EpochSetup:
        return EpochSetup(
            sched=self.make_schedule(),
            stft_cfg=self.model.stft,
            bank=bank,
            cache=cache,
            warmup_epochs=self.train.warmup_epochs,
            noise_type=self.noise_type,
            shared_clip=self.shared_clip,
            gaussian=(self.noise_mode == "gaussian"),
            use_diffusion=self.use_diffusion,
            use_ccc=self.use_ccc,
            cross_mode=self.cross_mode,
            update_reverse=self.update_reverse,
            joint_diffusion=self.joint_diffusion,
            trained_paths=self.trained_paths,
            mix_snr_db=self.mix_snr_db,
        )


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value': {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


_BOOL_KEYS = ("use_diffusion", "use_phase", "use_ccc", "update_reverse",
              "joint_diffusion", "shared_clip")
_FLOAT_KEYS = ("gamma_start", "gamma_end", "lambda1", "lambda2", "mix_snr_db")
_TRAIN_INT = ("epochs", "batch_size", "seed", "checkpoint_every")
_TRAIN_FLOAT = ("lr_init", "weight_decay", "beta1", "beta2", "eps",
                "warmup_fraction", "grad_clip")
_MODEL_INT = ("n_blocks", "channels", "kernel")


def _parse_bool(key: str, value: str) -> bool:
    low = value.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"config key {key}: expected a boolean, got {value!r}")


def config_from_values(values: dict[str, str]) -> RunConfig:
    cfg = RunConfig()
    model_kwargs: dict = {}
    stft_kwargs: dict = {}
    train_kwargs: dict = {}
    for key, value in values.items():
        if key in _MODEL_INT:
            model_kwargs[key] = int(value)
        elif key in ("window_len", "hop"):
            stft_kwargs[key] = int(value)
        elif key in _TRAIN_INT:
            train_kwargs[key] = int(value)
        elif key in _TRAIN_FLOAT:
            train_kwargs[key] = float(value)
        elif key == "lr_drops":
            drops = []
            for part in value.split(","):
                frac, mult = part.split(":")
                drops.append((float(frac), float(mult)))
            train_kwargs["lr_drops"] = tuple(drops)
        elif key in _FLOAT_KEYS:
            setattr(cfg, key, float(value))
        elif key in _BOOL_KEYS:
            setattr(cfg, key, _parse_bool(key, value))
        elif key in ("speech_dir", "noise_dir", "noise_type", "noise_mode",
                     "cross_mode"):
            setattr(cfg, key, value)
        elif key == "clip_len":
            cfg.clip_len = int(value)
        elif key == "holdout":
            cfg.holdout = int(value)
        elif key == "trained_paths":
            cfg.trained_paths = tuple(p.strip() for p in value.split(",") if p.strip())
        else:
            raise ValueError(f"unknown config key {key!r}")
    if cfg.noise_mode not in ("real", "gaussian"):
        raise ValueError(f"noise_mode must be 'real' or 'gaussian', got {cfg.noise_mode!r}")
    if cfg.cross_mode not in ("dual", "a_with_p", "p_with_a"):
        raise ValueError(f"unknown cross_mode {cfg.cross_mode!r}")
    if stft_kwargs:
        model_kwargs["stft"] = StftConfig(**stft_kwargs)
    if model_kwargs:
        cfg.model = SEDMConfig(**model_kwargs)
    if train_kwargs:
        cfg.train = TrainConfig(**train_kwargs)
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return config_from_values(parse_config_text(f.read()))

"""Complex-cycle-consistent learning.

Two LSTM mapping networks bridge the magnitude and phase domains: one
maps magnitude grids to phase grids, the other phase grids to magnitude
grids. Their mapping errors against the clean-domain targets augment
the base estimation losses,

    combined_mag   = base_mag   + lambda1 * cross(phase -> magnitude)
    combined_phase = base_phase + lambda2 * cross(magnitude -> phase)

and the combined losses replace the base losses after a warm-up period.
Minimizing their sum updates both mappers and (optionally) the reverse
networks that produced the estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sedm import autodiff as ad
from sedm.autodiff import Tensor
from sedm.diffusion import DiffusionSchedule, forward_pair, forward_step
from sedm.dsp import unwrap_phase
from sedm.model import rms_scale

LSTM_LAYERS = 3
LSTM_HIDDEN = 30


class LstmMapper:
    """Stacked LSTM over time frames with a per-frame linear head."""

    def __init__(self, reg, name: str, bins: int, rng: np.random.Generator,
                 layers: int = LSTM_LAYERS, hidden: int = LSTM_HIDDEN):
        self.bins = bins
        self.hidden = hidden
        self.cells = []
        for l in range(layers):
            d = bins if l == 0 else hidden
            std_ih = np.sqrt(1.0 / d)
            std_hh = np.sqrt(1.0 / hidden)
            self.cells.append((
                reg.make(f"{name}.l{l}.w_ih",
                         rng.standard_normal((4 * hidden, d)) * std_ih),
                reg.make(f"{name}.l{l}.w_hh",
                         rng.standard_normal((4 * hidden, hidden)) * std_hh),
                reg.make(f"{name}.l{l}.b", np.zeros(4 * hidden)),
            ))
        # Zero-initialized head: an untrained mapper outputs all zeros.
        self.head_w = reg.make(f"{name}.head_w", np.zeros((bins, hidden)))
        self.head_b = reg.make(f"{name}.head_b", np.zeros(bins))

    def __call__(self, grid_tm: Tensor) -> Tensor:
        """Map a time-major (T, F) tensor to a (T, F) tensor."""
        if grid_tm.shape[1] != self.bins:
            raise ValueError(
                f"mapper configured for F={self.bins}, got grid {grid_tm.shape}"
            )
        frames = grid_tm.shape[0]
        h = [ad.constant(np.zeros(self.hidden)) for _ in self.cells]
        c = [ad.constant(np.zeros(self.hidden)) for _ in self.cells]
        rows = []
        for t in range(frames):
            x = ad.row(grid_tm, t)
            for l, (w_ih, w_hh, b) in enumerate(self.cells):
                h[l], c[l] = ad.lstm_cell(x, h[l], c[l], w_ih, w_hh, b)
                x = h[l]
            rows.append(ad.add(ad.matvec(self.head_w, x), self.head_b))
        return ad.stack_rows(rows)


class _CCCRegistry:
    def __init__(self):
        self.params = {}

    def make(self, name, data):
        from sedm.autodiff import Parameter
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data)
        self.params[name] = p
        return p


class CCCModule:
    """Mapping networks plus the cross-loss weights."""

    def __init__(self, bins: int, rng: np.random.Generator,
                 lambda1: float = 0.1, lambda2: float = 0.1):
        if lambda1 < 0 or lambda2 < 0:
            raise ValueError(f"lambda weights must be >= 0, got {lambda1}, {lambda2}")
        self._reg = _CCCRegistry()
        self.bins = bins
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.mag_to_phase = LstmMapper(self._reg, "ccc.theta_A", bins, rng)
        self.phase_to_mag = LstmMapper(self._reg, "ccc.theta_P", bins, rng)

    @property
    def params(self):
        return self._reg.params

    def parameters(self):
        return list(self._reg.params.values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def map_A_to_P(ccc: CCCModule, mag_tm) -> Tensor:
    """Magnitude -> phase mapping over a time-major grid."""
    return ccc.mag_to_phase(ad.as_tensor(mag_tm))


def map_P_to_A(ccc: CCCModule, phase_tm) -> Tensor:
    """Phase -> magnitude mapping over a time-major grid."""
    return ccc.phase_to_mag(ad.as_tensor(phase_tm))


def base_losses(est_A, est_P, clean_A, clean_P) -> tuple[Tensor, Tensor]:
    """Per-domain mean squared errors against the clean targets."""
    return (
        ad.mse_loss(ad.as_tensor(est_A), ad.as_tensor(clean_A)),
        ad.mse_loss(ad.as_tensor(est_P), ad.as_tensor(clean_P)),
    )


@dataclass
class CCCLosses:
    """The six loss terms; combined = base + lambda * cross exactly."""

    l_A: Tensor
    l_P: Tensor
    l_P_to_A: Tensor
    l_A_to_P: Tensor
    l_A_combined: Tensor
    l_P_combined: Tensor

    def scalars(self, lambda1: float, lambda2: float) -> dict[str, float]:
        """Logged values; combined recomputed in float64 so the
        combined - base = lambda * cross identity is exact on the log."""
        l_a, l_p = self.l_A.item(), self.l_P.item()
        l_pa, l_ap = self.l_P_to_A.item(), self.l_A_to_P.item()
        return {
            "l_A": l_a,
            "l_P": l_p,
            "l_PtoA": l_pa,
            "l_AtoP": l_ap,
            "l_A_combined": l_a + lambda1 * l_pa,
            "l_P_combined": l_p + lambda2 * l_ap,
        }


def ccc_losses(ccc: CCCModule, est_A, est_P, clean_A, clean_P,
               cross_mode: str = "dual", detach_cross: bool = False) -> CCCLosses:
    """All six loss terms on time-major grids.

    ``cross_mode`` limits which cross term is active ('dual',
    'a_with_p', 'p_with_a'); an inactive cross term is still reported
    as zero so the combined = base identity holds. ``detach_cross``
    stops cross-loss gradients from reaching the estimates (they then
    update only the mapping networks).
    """
    est_A, est_P = ad.as_tensor(est_A), ad.as_tensor(est_P)
    clean_A, clean_P = ad.as_tensor(clean_A), ad.as_tensor(clean_P)
    l_a, l_p = base_losses(est_A, est_P, clean_A, clean_P)
    cross_a_in = ad.constant(est_A.data) if detach_cross else est_A
    cross_p_in = ad.constant(est_P.data) if detach_cross else est_P
    zero = ad.constant(np.zeros(()))
    if cross_mode in ("dual", "a_with_p"):
        s_p_to_a = map_P_to_A(ccc, cross_p_in)
        l_p_to_a = ad.mse_loss(s_p_to_a, clean_A)
    else:
        l_p_to_a = zero
    if cross_mode in ("dual", "p_with_a"):
        s_a_to_p = map_A_to_P(ccc, cross_a_in)
        l_a_to_p = ad.mse_loss(s_a_to_p, clean_P)
    else:
        l_a_to_p = zero
    l_a_comb = ad.add(l_a, ad.mul(l_p_to_a, ccc.lambda1))
    l_p_comb = ad.add(l_p, ad.mul(l_a_to_p, ccc.lambda2))
    return CCCLosses(l_a, l_p, l_p_to_a, l_a_to_p, l_a_comb, l_p_comb)


# ---------------------------------------------------------------------------
# Training epoch
# ---------------------------------------------------------------------------

@dataclass
class SampleFeatures:
    """Per-utterance grids precomputed once before training.

    Grids are (L_pad, F) with the frame axis zero-padded to a multiple
    of 2**n_blocks; ``*_n`` variants are divided by their RMS scale.
    Complex-mode fields stack real/imag along the bin axis (L_pad, 2F).
    """

    name: str
    clean: object
    frames: int
    a0_raw: np.ndarray
    p0_raw: np.ndarray
    a0n: np.ndarray
    p0n: np.ndarray
    scale_a: float
    scale_p: float
    c0_raw: np.ndarray | None = None
    c0n: np.ndarray | None = None
    scale_c: float = 1.0


@dataclass
class EpochSetup:
    """Everything one training epoch needs besides the batch data."""

    sched: DiffusionSchedule
    stft_cfg: object
    bank: object = None
    cache: object = None
    warmup_epochs: int = 5
    noise_type: str = "any"
    split: str = "train"
    shared_clip: bool = True
    gaussian: bool = False
    use_diffusion: bool = True
    use_ccc: bool = True
    cross_mode: str = "dual"
    update_reverse: bool = True
    joint_diffusion: bool = True
    trained_paths: tuple = ("A", "P")
    mix_snr_db: float = 0.0


def is_warmup(epoch: int, setup: EpochSetup) -> bool:
    """Warm-up epochs train with base losses only (no mapping cycles)."""
    return epoch <= setup.warmup_epochs


def ccc_train_epoch(ccc: CCCModule, model, batches, epoch: int, optimizer,
                    setup: EpochSetup, rng: np.random.Generator,
                    lr: float) -> dict:
    """One full training epoch; one optimizer step per batch.

    Returns a report with per-step loss rows. Warm-up rows carry no
    cross-loss entries; afterwards the combined losses replace the base
    losses in the minimized objective.
    """
    if epoch < 1:
        raise ValueError(f"epoch must be >= 1, got {epoch}")
    warm = is_warmup(epoch, setup) or not setup.use_ccc
    report_rows = []
    total_accum = 0.0
    for step, batch in enumerate(batches, start=1):
        terms = []
        comps_accum: dict[str, float] = {}
        for sample in batch:
            loss_t, comps = _sample_loss(ccc, model, sample, warm, setup, rng)
            terms.append(loss_t)
            for k, v in comps.items():
                comps_accum[k] = comps_accum.get(k, 0.0) + v
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        total = ad.mul(total, 1.0 / len(terms))
        loss_val = total.item()
        if not np.isfinite(loss_val):
            raise FloatingPointError(
                f"non-finite training loss at epoch {epoch} step {step}"
            )
        ad.backward(total)
        optimizer.step(lr)
        n = len(batch)
        row = {"epoch": epoch, "step": step, "loss": loss_val}
        for k in ("l_A", "l_P"):
            if k in comps_accum:
                row[k] = comps_accum[k] / n
        if not warm:
            base_a = comps_accum.get("l_A", 0.0) / n
            base_p = comps_accum.get("l_P", 0.0) / n
            cross_pa = comps_accum.get("l_PtoA", 0.0) / n
            cross_ap = comps_accum.get("l_AtoP", 0.0) / n
            row["l_PtoA"] = cross_pa
            row["l_AtoP"] = cross_ap
            row["l_A_combined"] = base_a + ccc.lambda1 * cross_pa
            row["l_P_combined"] = base_p + ccc.lambda2 * cross_ap
        report_rows.append(row)
        total_accum += loss_val
    return {
        "epoch": epoch,
        "warmup": warm,
        "rows": report_rows,
        "mean_loss": total_accum / max(len(report_rows), 1),
    }


def _chain_losses(net, y_in: np.ndarray, feats, target_tm: np.ndarray,
                  sched: DiffusionSchedule):
    """Reverse chain from a corrupted grid with per-step supervision.

    Returns (noise_loss_mean, speech_loss_mean, est) where est is the
    final-step speech estimate as a channel-first tensor.
    """
    steps = len(net.rev_blocks)
    y = ad.constant(y_in.T)
    target_ch = ad.constant(target_tm.T)
    noise_terms, speech_terms = [], []
    s_hat = None
    for m in range(steps, 0, -1):
        y, i_hat, s_hat = net.reverse_step_ch(y, m, sched)
        if feats is not None:
            noise_terms.append(ad.mse_loss(i_hat, ad.constant(feats[m - 1].T)))
        speech_terms.append(ad.mse_loss(s_hat, target_ch))
    noise_loss = _mean_terms(noise_terms) if noise_terms else None
    return noise_loss, _mean_terms(speech_terms), s_hat


def _refine_losses(net, y_in: np.ndarray, target_tm: np.ndarray):
    """Iterative refinement without the reverse update (diffusion off)."""
    steps = len(net.rev_blocks)
    y = ad.constant(y_in.T)
    target_ch = ad.constant(target_tm.T)
    speech_terms = []
    s_hat = None
    for m in range(steps, 0, -1):
        _, s_hat = net.head_step(y, m)
        speech_terms.append(ad.mse_loss(s_hat, target_ch))
        y = s_hat
    return _mean_terms(speech_terms), s_hat


def _mean_terms(terms):
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(terms))


def _mix_grids(sample: SampleFeatures, setup: EpochSetup,
               rng: np.random.Generator):
    """Time-domain mixture grids for the no-diffusion baseline."""
    from sedm.dsp import Waveform, stft, to_mag_phase
    from sedm.model import pad_frames
    from sedm.noisebank import fit_to_length, mix_at_snr, sample_clip

    clip = sample_clip(setup.bank, setup.noise_type, setup.split, rng)
    noise = fit_to_length(clip.samples, len(sample.clean), rng)
    noisy, _ = mix_at_snr(sample.clean, Waveform(noise, sample.clean.sample_rate),
                          setup.mix_snr_db)
    mp = to_mag_phase(stft(noisy, setup.stft_cfg))
    pad_to = sample.a0_raw.shape[0]
    mag_pad, _ = pad_frames(mp.mag, pad_to)
    ph_pad, _ = pad_frames(unwrap_phase(mp.phase), pad_to)
    return mag_pad, ph_pad


def _sample_loss(ccc: CCCModule, model, sample: SampleFeatures, warm: bool,
                 setup: EpochSetup, rng: np.random.Generator):
    if model.mode == "complex":
        return _sample_loss_complex(ccc, model, sample, warm, setup, rng)

    trained = [p for p in setup.trained_paths if p in model.nets]
    terms = []
    comps: dict[str, float] = {}

    if setup.use_diffusion:
        (states_a, feats_a), (states_p, feats_p), _ = forward_pair(
            sample.a0n, sample.p0n, setup.bank, setup.noise_type, setup.split,
            setup.cache, setup.sched, rng, setup.shared_clip, setup.gaussian)
        in_a, in_p = states_a[-1], states_p[-1]
        tgt_a, tgt_p = sample.a0n, sample.p0n
    else:
        mag_pad, ph_pad = _mix_grids(sample, setup, rng)
        s_na, s_np = rms_scale(mag_pad), rms_scale(ph_pad)
        in_a, in_p = mag_pad / s_na, ph_pad / s_np
        tgt_a, tgt_p = sample.a0_raw / s_na, sample.p0_raw / s_np
        feats_a = feats_p = None

    if "A" in trained:
        if setup.use_diffusion:
            noise_l, speech_l, est_a = _chain_losses(
                model.nets["A"], in_a, feats_a, tgt_a, setup.sched)
            terms.append(noise_l)
        else:
            speech_l, est_a = _refine_losses(model.nets["A"], in_a, tgt_a)
        terms.append(speech_l)
        if setup.joint_diffusion and setup.use_diffusion:
            _, _, recon = model.nets["A"].encode(ad.constant(in_a.T))
            terms.append(ad.mse_loss(recon, ad.constant(tgt_a.T)))
    else:
        est_a = ad.constant(in_a.T)

    have_p = "P" in model.nets
    if have_p and "P" in trained:
        if setup.use_diffusion:
            noise_l, speech_l, est_p = _chain_losses(
                model.nets["P"], in_p, feats_p, tgt_p, setup.sched)
            terms.append(noise_l)
        else:
            speech_l, est_p = _refine_losses(model.nets["P"], in_p, tgt_p)
        terms.append(speech_l)
        if setup.joint_diffusion and setup.use_diffusion:
            _, _, recon = model.nets["P"].encode(ad.constant(in_p.T))
            terms.append(ad.mse_loss(recon, ad.constant(tgt_p.T)))
    else:
        est_p = ad.constant(in_p.T)

    est_a_tm = ad.transpose(est_a)
    est_p_tm = ad.transpose(est_p)
    clean_a_tm = ad.constant(tgt_a)
    clean_p_tm = ad.constant(tgt_p)
    if warm:
        l_a, l_p = base_losses(est_a_tm, est_p_tm, clean_a_tm, clean_p_tm)
        if "A" in trained:
            terms.append(l_a)
        if have_p and "P" in trained:
            terms.append(l_p)
        comps["l_A"] = l_a.item()
        comps["l_P"] = l_p.item()
    else:
        losses = ccc_losses(ccc, est_a_tm, est_p_tm, clean_a_tm, clean_p_tm,
                            setup.cross_mode, detach_cross=not setup.update_reverse)
        terms.append(losses.l_A_combined)
        terms.append(losses.l_P_combined)
        for k, v in losses.scalars(ccc.lambda1, ccc.lambda2).items():
            comps[k] = v
    return _mean_terms(terms), comps


def _sample_loss_complex(ccc: CCCModule, model, sample: SampleFeatures,
                         warm: bool, setup: EpochSetup,
                         rng: np.random.Generator):
    from sedm.noisebank import sample_clip

    net = model.nets["C"]
    bins = sample.a0_raw.shape[1]
    terms = []
    comps: dict[str, float] = {}
    state = np.asarray(sample.c0n, dtype=np.float64)
    feats = []
    for n in range(1, setup.sched.steps + 1):
        if setup.gaussian:
            feat = rng.standard_normal(state.shape)
        else:
            clip = sample_clip(setup.bank, setup.noise_type, setup.split, rng)
            feat = setup.cache.features(clip, "complex")
        feats.append(feat)
        state = forward_step(state, feat, n, setup.sched)
    noise_l, speech_l, est_c = _chain_losses(
        net, state, feats, sample.c0n, setup.sched)
    terms.extend([noise_l, speech_l])
    if setup.joint_diffusion:
        _, _, recon = net.encode(ad.constant(state.T))
        terms.append(ad.mse_loss(recon, ad.constant(sample.c0n.T)))
    if not warm:
        re = ad.rows(est_c, 0, bins)
        im = ad.rows(est_c, bins, 2 * bins)
        mag_t = ad.sqrt(ad.add(ad.mul(re, re), ad.mul(im, im)))
        wrapped = np.arctan2(im.data, re.data)
        offsets = np.unwrap(wrapped, axis=1) - wrapped
        phase_t = ad.add(ad.atan2(im, re), ad.constant(offsets))
        est_a_tm = ad.transpose(mag_t)
        est_p_tm = ad.mul(ad.transpose(phase_t), 1.0 / sample.scale_p)
        clean_a_tm = ad.constant(sample.a0_raw / sample.scale_c)
        clean_p_tm = ad.constant(sample.p0n)
        losses = ccc_losses(ccc, est_a_tm, est_p_tm, clean_a_tm, clean_p_tm,
                            setup.cross_mode, detach_cross=not setup.update_reverse)
        terms.extend([losses.l_A_combined, losses.l_P_combined])
        for k, v in losses.scalars(ccc.lambda1, ccc.lambda2).items():
            comps[k] = v
    return _mean_terms(terms), comps

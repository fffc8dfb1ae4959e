"""Conditional denoising diffusion over 3-channel region masks.

The denoiser predicts the clean target directly (not the noise). Masks live in
[0, 1]; the diffusion state uses ``2 * x - 1`` so that it is zero-centred.
Conditioning is built from the MRI contrasts and the baseline prediction in one
of three ways (prediction only, prediction concatenated with the contrasts, or
contrasts masked by the predicted tumor), and a trainable copy of the
denoiser's encoder turns the conditioning into per-level features that are
added onto the denoiser's own encoder outputs.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .discrepancy import discrepancy_target
from .losses import LossWeights, compound_loss
from .nets import Decoder, Encoder, level_widths, sinusoidal_embedding
from .phantom import MultiContrastVolume, RegionMask
from .segmenter import SoftPrediction, TrainingDiverged, deterministic_mode

log = logging.getLogger(__name__)

BACKGROUND_MULTIPLIER = 0.2


class ArchitectureMismatch(ValueError):
    pass


class ConditioningVariant(str, enum.Enum):
    PRED_ONLY = "pred"
    CONCAT = "concat"
    MASKED = "masked"

    @property
    def channels(self):
        return {"pred": 3, "concat": 7, "masked": 4}[self.value]


class TargetMode(str, enum.Enum):
    DIRECT_MASK = "mask"
    DISCREPANCY = "discrepancy"


# ---------------------------------------------------------------- schedule


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # betas[t - 1] is the variance added at step t

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ValueError("betas must be a non-empty 1D array")
        if not ((b > 0).all() and (b < 1).all() and (np.diff(b) >= 0).all()):
            raise ValueError("betas must be non-decreasing inside (0, 1)")
        object.__setattr__(self, "betas", b)

    @property
    def T(self):
        return int(self.betas.size)

    @property
    def alphas(self):
        return 1.0 - self.betas

    @property
    def alpha_bars(self):
        return np.cumprod(self.alphas)

    def alpha_bar(self, t):
        """Cumulative signal fraction at step ``t``; step 0 is the clean state."""
        t = int(t)
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])


def make_schedule(T=1000, beta_min=1e-4, beta_max=0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError("T must be a positive integer")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    return NoiseSchedule(np.linspace(beta_min, beta_max, int(T)))


def to_signed(x0):
    return 2 * x0 - 1


def to_unit(x):
    return (x + 1) / 2


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """Noise a [0, 1] mask to step ``t``: sqrt(ab) * (2 x0 - 1) + sqrt(1 - ab) * eps."""
    if tuple(np.shape(eps)) != tuple(np.shape(x0)):
        raise ValueError("eps must match x0 in shape")
    ab = sched.alpha_bar(t)
    return ab**0.5 * to_signed(x0) + (1.0 - ab) ** 0.5 * eps


# ---------------------------------------------------------------- conditioning


def _pred_channels(upred):
    if isinstance(upred, RegionMask):
        return upred.channels.astype(np.float32)
    return np.asarray(getattr(upred, "probs", upred), dtype=np.float32)


def mask_condition(vol: MultiContrastVolume, upred, background=BACKGROUND_MULTIPLIER) -> MultiContrastVolume:
    """Scale every contrast by 1 inside the predicted whole tumor, ``background`` elsewhere."""
    pred = _pred_channels(upred)
    if pred.shape[1:] != vol.data.shape[1:]:
        raise ValueError(f"prediction {pred.shape} does not match volume {vol.data.shape}")
    data = np.asarray(vol.data)
    multiplier = np.where(pred[0] > 0, 1.0, background).astype(data.dtype)
    return MultiContrastVolume(data * multiplier[None], vol.spacing, dict(vol.meta), vol.foreground)


def build_conditioning(variant, vol: MultiContrastVolume, upred, background=BACKGROUND_MULTIPLIER):
    variant = ConditioningVariant(variant)
    pred = _pred_channels(upred)
    if pred.shape != (3, *vol.data.shape[1:]):
        raise ValueError(f"prediction {pred.shape} does not match volume {vol.data.shape}")
    if variant is ConditioningVariant.PRED_ONLY:
        return pred
    if variant is ConditioningVariant.CONCAT:
        return np.concatenate([pred, np.asarray(vol.data, dtype=np.float32)])
    return mask_condition(vol, upred, background).data.astype(np.float32)


# ---------------------------------------------------------------- model


@dataclass(frozen=True)
class DenoiserConfig:
    variant: ConditioningVariant = ConditioningVariant.CONCAT
    target_mode: TargetMode = TargetMode.DISCREPANCY
    levels: int = 3
    base_width: int = 8
    activation: str = "leaky_relu"
    normalization: str = "instance"
    time_dim: int = 32
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    sample_steps: int = 10
    # condition on the binarised baseline mask (default) or on its probabilities
    soft_conditioning: bool = False
    background_multiplier: float = BACKGROUND_MULTIPLIER

    def __post_init__(self):
        object.__setattr__(self, "variant", ConditioningVariant(self.variant))
        object.__setattr__(self, "target_mode", TargetMode(self.target_mode))
        if self.levels < 2:
            raise ValueError("levels must be >= 2")

    @property
    def cond_channels(self):
        return self.variant.channels

    def as_dict(self):
        d = asdict(self)
        d["variant"] = self.variant.value
        d["target_mode"] = self.target_mode.value
        return d


class DenoiserModel(nn.Module):
    """Denoising U-Net plus a conditioning encoder with the same level layout."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.config = cfg
        self.schedule = make_schedule(cfg.T, cfg.beta_min, cfg.beta_max)
        widths = level_widths(cfg.levels, cfg.base_width)
        self.du_encoder = Encoder(cfg.cond_channels + 3, widths, cfg.normalization, cfg.activation)
        self.xi = Encoder(cfg.cond_channels, widths, cfg.normalization, cfg.activation)
        self.decoder = Decoder(widths, 3, cfg.normalization, cfg.activation)
        hidden = 2 * cfg.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.time_proj = nn.ModuleList(nn.Linear(hidden, w) for w in widths)
        if self.xi.widths != self.du_encoder.widths:
            raise ArchitectureMismatch("conditioning encoder and denoiser encoder differ in width")
        self.baseline_state = None

    def time_embedding(self, t):
        dtype = self.time_mlp[0].weight.dtype
        return self.time_mlp(sinusoidal_embedding(t, self.config.time_dim).to(dtype))

    def condition_features(self, cond):
        return self.xi(cond)

    def forward(self, cond, x_t, t, feature_scale=1.0):
        """Logits of the clean target; ``tanh`` maps them into [-1, 1]."""
        divisor = 2 ** (self.config.levels - 1)
        if any(d % divisor for d in x_t.shape[-3:]):
            raise ValueError(f"spatial dims {tuple(x_t.shape[-3:])} must be divisible by {divisor}")
        feats = self.condition_features(cond)
        temb = self.time_embedding(t)
        if temb.shape[0] != x_t.shape[0]:
            temb = temb.expand(x_t.shape[0], -1)
        h = torch.cat([cond, x_t], dim=1)
        skips = []
        for block, proj, f in zip(self.du_encoder.blocks, self.time_proj, feats):
            h = block(h)
            if f.shape != h.shape:
                raise ArchitectureMismatch(f"feature {tuple(f.shape)} vs encoder output {tuple(h.shape)}")
            h = h + proj(temb)[:, :, None, None, None] + feature_scale * f
            skips.append(h)
        return self.decoder(skips)


def build_denoiser(cfg: DenoiserConfig, seed: int) -> DenoiserModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DenoiserModel(cfg)


def _dtype(model):
    return next(model.parameters()).dtype


@dataclass
class DenoiseOutput:
    signed: np.ndarray  # estimate of the clean target in [-1, 1]
    probs: np.ndarray  # the same estimate mapped to [0, 1]


def denoise_step(model: DenoiserModel, cond, x_t, t, feature_scale=1.0) -> DenoiseOutput:
    if not 1 <= int(t) <= model.schedule.T:
        raise ValueError(f"timestep {t} outside [1, {model.schedule.T}]")
    cond = np.asarray(cond)
    x_t = np.asarray(x_t)
    if cond.shape[0] != model.config.cond_channels:
        raise ValueError(f"expected {model.config.cond_channels} conditioning channels, got {cond.shape[0]}")
    if cond.shape[1:] != x_t.shape[1:] or x_t.shape[0] != 3:
        raise ValueError(f"conditioning {cond.shape} and noisy mask {x_t.shape} disagree")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            dt = _dtype(model)
            logits = model(
                torch.as_tensor(cond, dtype=dt)[None], torch.as_tensor(x_t, dtype=dt)[None], torch.tensor([int(t)]), feature_scale
            )[0]
    finally:
        model.train(was_training)
    signed = torch.tanh(logits)
    return DenoiseOutput(signed.numpy(), to_unit(signed).clamp(0, 1).numpy())


# ---------------------------------------------------------------- training


@dataclass
class DiffusionTrainConfig:
    steps: int = 500
    lr: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    deterministic: bool = True
    loss: LossWeights = field(default_factory=LossWeights)


@dataclass
class DiffusionCase:
    cond: np.ndarray
    target: np.ndarray
    case_id: str = ""


def conditioning_input(cfg: DenoiserConfig, vol, upred_soft: SoftPrediction, threshold=0.5):
    """Conditioning grid from a baseline soft prediction, per the config."""
    if cfg.soft_conditioning:
        src = upred_soft
    else:
        src = RegionMask((np.asarray(upred_soft.probs) >= threshold).astype(np.uint8), upred_soft.spacing)
    return build_conditioning(cfg.variant, vol, src, cfg.background_multiplier)


def make_training_case(cfg: DenoiserConfig, vol, upred_soft: SoftPrediction, gt: RegionMask, case_id="", threshold=0.5):
    cond = conditioning_input(cfg, vol, upred_soft, threshold)
    if cfg.target_mode is TargetMode.DISCREPANCY:
        upred_bin = (np.asarray(upred_soft.probs) >= threshold).astype(np.uint8)
        target = discrepancy_target(upred_bin, gt).channels
    else:
        target = gt.channels
    return DiffusionCase(cond.astype(np.float32), target.astype(np.float32), case_id)


def uniform_sampler(schedule, shape, gen):
    """Default (t, eps) draw: t uniform on [1, T], eps standard normal."""
    t = int(torch.randint(1, schedule.T + 1, (1,), generator=gen))
    eps = torch.randn(shape, generator=gen, dtype=torch.float64)
    return t, eps


def train_diffusion(model: DenoiserModel, cases, hyper: DiffusionTrainConfig, sampler=uniform_sampler):
    """Fit the denoiser to reconstruct each case's target from its noised copy.

    ``sampler(schedule, shape, generator) -> (t, eps)`` draws the timestep and
    noise for every step. Returns ``(model, per_step_loss)``.
    """
    cases = list(cases)
    if not cases:
        raise ValueError("empty training set")
    dt = _dtype(model)
    conds = [torch.as_tensor(c.cond, dtype=dt)[None] for c in cases]
    targets = [torch.as_tensor(c.target, dtype=dt)[None] for c in cases]
    opt = torch.optim.AdamW(model.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    order_rng = np.random.default_rng(hyper.seed)
    gen = torch.Generator().manual_seed(int(hyper.seed))
    sched = model.schedule
    order = []
    trace = []
    model.train()
    with deterministic_mode(hyper.deterministic):
        for step in range(hyper.steps):
            if not order:
                order = list(order_rng.permutation(len(cases)))
            idx = order.pop(0)
            target = targets[idx]
            t, eps = sampler(sched, tuple(target.shape), gen)
            x_t = q_sample(target, t, eps.to(dt), sched)
            probs = torch.sigmoid(2 * model(conds[idx], x_t, torch.tensor([t])))
            loss = compound_loss(probs, target, hyper.loss)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite diffusion loss at step {step} (t={t}, case index {idx})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            trace.append(loss.item())
            if step % 50 == 0:
                log.info("diffusion step %d t=%d loss %.5f", step, t, trace[-1])
    model.eval()
    return model, trace


# ---------------------------------------------------------------- sampling


def ddim_timesteps(T, steps):
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > T:
        raise ValueError(f"steps ({steps}) cannot exceed T ({T})")
    return [T - (i * T) // steps for i in range(steps)]


def sample_from_condition(model: DenoiserModel, cond, steps, seed):
    """Deterministic DDIM reverse pass from seeded Gaussian noise; returns [0, 1] grid."""
    sched = model.schedule
    ts = ddim_timesteps(sched.T, steps)
    dt = _dtype(model)
    gen = torch.Generator().manual_seed(int(seed))
    cond_t = torch.as_tensor(np.asarray(cond), dtype=dt)[None]
    x = torch.randn((1, 3, *cond_t.shape[2:]), generator=gen, dtype=torch.float64).to(dt)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for i, t in enumerate(ts):
                x0 = torch.tanh(model(cond_t, x, torch.tensor([t])))
                t_prev = ts[i + 1] if i + 1 < len(ts) else 0
                ab, ab_prev = sched.alpha_bar(t), sched.alpha_bar(t_prev)
                eps_hat = (x - ab**0.5 * x0) / (1 - ab) ** 0.5
                x = ab_prev**0.5 * x0 + (1 - ab_prev) ** 0.5 * eps_hat
    finally:
        model.train(was_training)
    return to_unit(x0[0]).clamp(0, 1).numpy()


def sample(model: DenoiserModel, vol, upred_soft: SoftPrediction, steps=None, seed=0, threshold=0.5) -> SoftPrediction:
    """Generate a soft mask (or discrepancy, per the model's target mode)."""
    steps = model.config.sample_steps if steps is None else steps
    cond = conditioning_input(model.config, vol, upred_soft, threshold)
    return SoftPrediction(sample_from_condition(model, cond, steps, seed).astype(np.float32), vol.spacing)


# ---------------------------------------------------------------- checkpoints


def save_denoiser(model: DenoiserModel, path, extra=None):
    torch.save(
        {
            "kind": "denoiser",
            "config": model.config.as_dict(),
            "schedule_betas": model.schedule.betas,
            "state_dict": model.state_dict(),
            "baseline": model.baseline_state,
            **(extra or {}),
        },
        path,
    )


def load_denoiser(path) -> DenoiserModel:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("kind") != "denoiser":
        raise ValueError(f"{path} is not a denoiser checkpoint")
    model = DenoiserModel(DenoiserConfig(**ckpt["config"]))
    model.load_state_dict(ckpt["state_dict"])
    model.baseline_state = ckpt.get("baseline")
    model.eval()
    return model

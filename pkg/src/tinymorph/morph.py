"""The morphing pipeline: spherical noise interpolation, condition blending,
channel-statistics adjustment, endpoint attention capture, gated K/V
injection, and frame generation.

Endpoint frames (alpha exactly 0 or 1) collapse bit-identically onto the
captured endpoint reconstructions: every interpolator short-circuits at the
endpoints and the statistics adjustment only applies to interior frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .diffusion import ddim_denoise, ddim_invert
from .lora import LoraFitConfig, apply_lora, effective_residuals, fit_lora, interp_lora
from .unet import ConditionVector, condition_embed

ADAIN_STAGES = ("initial-noise", "final-latent")


@dataclass
class MorphConfig:
    """Pipeline settings.  ``n`` frame intervals produce n+1 frames;
    ``lam`` is the fraction of early denoising steps with K/V injection."""

    n: int = 16
    lam: float = 0.6
    adain: bool = True
    adain_stage: str = "initial-noise"
    reschedule: bool = False
    seed: int = 0
    ddim_steps: int = 50
    inject_mid: bool = False
    lora_interp: str = "product"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.adain_stage not in ADAIN_STAGES:
            raise ValueError(f"adain_stage must be one of {ADAIN_STAGES}")
        if self.lora_interp not in ("product", "factor"):
            raise ValueError("lora_interp must be 'product' or 'factor'")

    def snapshot(self):
        return {
            "n": self.n,
            "lambda": self.lam,
            "adain": self.adain,
            "adain_stage": self.adain_stage,
            "reschedule": self.reschedule,
            "seed": self.seed,
            "ddim_steps": self.ddim_steps,
            "inject_mid": self.inject_mid,
            "lora_interp": self.lora_interp,
        }


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_latent(cls, z):
        z = _chw(z)
        flat = z.reshape(z.shape[0], -1)
        return cls(flat.mean(axis=1), flat.std(axis=1))


@dataclass
class AttnCache:
    """Per-step, per-layer (K, V) records from the two endpoint trajectories,
    plus the endpoint latent trajectories and final reconstructions."""

    taus: tuple
    layers: tuple
    records: tuple      # (endpoint0, endpoint1), each a list over steps of {layer: (K, V)}
    trajectories: tuple  # latents entering each step, highest t first
    finals: tuple        # raw clean latents

    def __post_init__(self):
        steps = len(self.taus)
        for rec in self.records:
            if len(rec) != steps:
                raise ValueError("cache is missing steps")
            for per_step in rec:
                if set(per_step) != set(self.layers):
                    raise ValueError("cache is missing layers")

    def reconstruction(self, endpoint):
        return np.clip(self.finals[endpoint], -1.0, 1.0)


@dataclass
class FrameSequence:
    frames: list
    alphas: list
    config: dict = field(default_factory=dict)
    distances: list = None

    def __post_init__(self):
        if len(self.frames) != len(self.alphas):
            raise ValueError("frames/alphas length mismatch")
        a = self.alphas
        if a[0] != 0.0 or a[-1] != 1.0 or any(x >= y for x, y in zip(a, a[1:])):
            raise ValueError("alphas must increase strictly from 0 to 1")


def _chw(z):
    z = np.asarray(z)
    if z.ndim == 4:
        if z.shape[0] != 1:
            raise ValueError("expected a single latent")
        z = z[0]
    if z.ndim != 3:
        raise ValueError("latent must be (C,H,W) or (1,C,H,W)")
    return z


def slerp(za, zb, alpha):
    """Spherical interpolation of flattened tensors; exact at the endpoints.

    Falls back to linear interpolation when the angle between the inputs is
    numerically degenerate (< 1e-4 or > pi - 1e-4).
    """
    za = np.asarray(za)
    zb = np.asarray(zb)
    if za.shape != zb.shape:
        raise ValueError(f"slerp: shapes {za.shape} vs {zb.shape}")
    alpha = float(alpha)
    if alpha == 0.0:
        return za.copy()
    if alpha == 1.0:
        return zb.copy()
    a = za.reshape(-1).astype(np.float64)
    b = zb.reshape(-1).astype(np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("slerp: zero-norm input")
    cos_phi = np.clip(float(a @ b) / (na * nb), -1.0, 1.0)
    phi = math.acos(cos_phi)
    if phi < 1e-4 or phi > math.pi - 1e-4:
        return ((1.0 - alpha) * za + alpha * zb).astype(za.dtype, copy=False)
    wa = math.sin((1.0 - alpha) * phi) / math.sin(phi)
    wb = math.sin(alpha * phi) / math.sin(phi)
    return (wa * za + wb * zb).astype(za.dtype, copy=False)


def lerp_condition(c0, c1, alpha):
    """Affine blend of two condition vectors."""
    if c0.embedding.shape != c1.embedding.shape:
        raise ValueError("condition dimension mismatch")
    alpha = float(alpha)
    if alpha == 0.0:
        return ConditionVector(c0.embedding.copy(), c0.source)
    if alpha == 1.0:
        return ConditionVector(c1.embedding.copy(), c1.source)
    emb = (1.0 - alpha) * c0.embedding + alpha * c1.embedding
    return ConditionVector(emb, "interpolated")


def adain_adjust(z, stats0, stats1, alpha):
    """Renormalize each channel of ``z`` to the blended target statistics.

    Output channel stats equal ((1-a)*mu0 + a*mu1, (1-a)*sig0 + a*sig1).
    """
    orig = np.asarray(z)
    zc = _chw(orig)
    c = zc.shape[0]
    if stats0.mean.shape != (c,) or stats1.mean.shape != (c,):
        raise ValueError("channel count mismatch between latent and stats")
    alpha = float(alpha)
    flat = zc.reshape(c, -1)
    mu_z = flat.mean(axis=1)
    sig_z = flat.std(axis=1)
    if np.any(sig_z <= 1e-5):
        raise ValueError("zero-variance channel; statistics adjustment undefined")
    mu_t = (1.0 - alpha) * stats0.mean + alpha * stats1.mean
    sig_t = (1.0 - alpha) * stats0.std + alpha * stats1.std
    out = (zc - mu_z[:, None, None]) / sig_z[:, None, None] * sig_t[:, None, None] + mu_t[:, None, None]
    out = out.astype(orig.dtype, copy=False)
    return out.reshape(orig.shape)


def interp_attention(k0, v0, k1, v1, alpha):
    """Affine blend of cached key/value matrices; endpoint exact."""
    if k0.shape != k1.shape or v0.shape != v1.shape:
        raise ValueError("attention record shape mismatch")
    alpha = float(alpha)
    if alpha == 0.0:
        return k0.copy(), v0.copy()
    if alpha == 1.0:
        return k1.copy(), v1.copy()
    k = (1.0 - alpha) * k0 + alpha * k1
    v = (1.0 - alpha) * v0 + alpha * v1
    return k, v


class KVInjectionController:
    """Serves blended endpoint K/V records for the first ceil(lam * S) steps.

    ``count`` tallies override consultations, one per (step, layer).
    """

    def __init__(self, cache, alpha, lam, steps):
        if len(cache.taus) != steps:
            raise ValueError("cache does not match the sampling schedule")
        self.cache = cache
        self.alpha = float(alpha)
        self.active_steps = math.ceil(float(lam) * steps)
        self.count = 0

    def overrides(self, step_index):
        if step_index >= self.active_steps:
            return {}
        out = {}
        for layer in self.cache.layers:
            k0, v0 = self.cache.records[0][step_index][layer]
            k1, v1 = self.cache.records[1][step_index][layer]
            out[layer] = interp_attention(k0, v0, k1, v1, self.alpha)
            self.count += 1
        return out


def capture_endpoint_trajectories(zt0, zt1, c0, c1, lora0, lora1, base, sched,
                                  include_mid=False):
    """Denoise both endpoints with their own adapters, recording K/V at every
    injectable self-attention layer at every step."""
    layers = base.arch.injectable_layer_names(include_mid=include_mid)
    records, trajectories, finals = [], [], []
    for zt, cond, delta in ((zt0, c0, lora0), (zt1, c1, lora1)):
        net = apply_lora(base, effective_residuals(delta))
        _, trace = ddim_denoise(zt, cond, net, sched, capture=True)
        records.append([{name: step_rec[name] for name in layers} for step_rec in trace.attn])
        trajectories.append(trace.latents)
        finals.append(trace.final)
    return AttnCache(taus=sched.taus, layers=layers,
                     records=tuple(records), trajectories=tuple(trajectories),
                     finals=tuple(finals))


@dataclass
class MorphInputs:
    """Shared read-only state consumed by frame generation."""

    zt0: np.ndarray
    zt1: np.ndarray
    c0: ConditionVector
    c1: ConditionVector
    lora0: object
    lora1: object
    noise_stats: tuple   # ChannelStats of the two inverted noises
    latent_stats: tuple  # ChannelStats of the two clean input latents


def generate_frame(alpha, cache, inputs, cfg, base, sched, controller=None):
    """Generate one intermediate image at interpolation ratio ``alpha``."""
    if cache.taus != sched.taus:
        raise ValueError("attention cache was built for a different schedule")
    want_layers = base.arch.injectable_layer_names(include_mid=cfg.inject_mid)
    if tuple(cache.layers) != tuple(want_layers):
        raise ValueError("attention cache layer set does not match the config")
    alpha = float(alpha)
    interior = 0.0 < alpha < 1.0

    residuals = interp_lora(inputs.lora0, inputs.lora1, alpha, mode=cfg.lora_interp)
    net = apply_lora(base, residuals)
    cond = lerp_condition(inputs.c0, inputs.c1, alpha)

    z = slerp(inputs.zt0, inputs.zt1, alpha)
    if cfg.adain and cfg.adain_stage == "initial-noise" and interior:
        z = adain_adjust(z, inputs.noise_stats[0], inputs.noise_stats[1], alpha)

    if controller is None:
        controller = KVInjectionController(cache, alpha, cfg.lam, sched.ddim_steps)
    z0 = ddim_denoise(z, cond, net, sched, controller=controller)

    if cfg.adain and cfg.adain_stage == "final-latent" and interior:
        z0 = adain_adjust(z0, inputs.latent_stats[0], inputs.latent_stats[1], alpha)
    return np.clip(z0, -1.0, 1.0)


def morph(image_a, image_b, class_a, class_b, base, sched, cfg,
          loras=None, fit_config=None):
    """Full pipeline: fit/load adapters, invert both inputs, capture endpoint
    attention, then generate the frame sequence (optionally rescheduled so
    adjacent frames are perceptually equidistant)."""
    image_a = np.asarray(image_a, dtype=np.float32)
    image_b = np.asarray(image_b, dtype=np.float32)
    if image_a.shape != image_b.shape:
        raise ValueError("input images must share one resolution")
    if cfg.ddim_steps != sched.ddim_steps:
        raise ValueError("config ddim_steps does not match the schedule")

    c0 = condition_embed(class_a, base)
    c1 = condition_embed(class_b, base)

    if loras is None:
        fc = fit_config or LoraFitConfig(seed=cfg.seed)
        lora0, _ = fit_lora(image_a, c0, base, sched, fc)
        fc1 = LoraFitConfig(steps=fc.steps, lr=fc.lr, rank=fc.rank, seed=fc.seed + 1,
                            betas=fc.betas, weight_decay=fc.weight_decay)
        lora1, _ = fit_lora(image_b, c1, base, sched, fc1)
    else:
        lora0, lora1 = loras

    net0 = apply_lora(base, effective_residuals(lora0))
    net1 = apply_lora(base, effective_residuals(lora1))
    zt0 = ddim_invert(image_a[None] if image_a.ndim == 3 else image_a, c0, net0, sched)
    zt1 = ddim_invert(image_b[None] if image_b.ndim == 3 else image_b, c1, net1, sched)

    cache = capture_endpoint_trajectories(zt0, zt1, c0, c1, lora0, lora1, base, sched,
                                          include_mid=cfg.inject_mid)
    inputs = MorphInputs(
        zt0=zt0, zt1=zt1, c0=c0, c1=c1, lora0=lora0, lora1=lora1,
        noise_stats=(ChannelStats.from_latent(zt0), ChannelStats.from_latent(zt1)),
        latent_stats=(ChannelStats.from_latent(image_a), ChannelStats.from_latent(image_b)),
    )

    made = {}

    def frame_at(a):
        if a not in made:
            made[a] = generate_frame(a, cache, inputs, cfg, base, sched)
        return made[a]

    alphas = [i / cfg.n for i in range(cfg.n + 1)]
    frames = [frame_at(a) for a in alphas]

    if cfg.reschedule:
        d = [metrics.perceptual_distance(frames[i], frames[i + 1]) for i in range(cfg.n)]
        alphas = metrics.reschedule(metrics.DistanceProfile(n=cfg.n, d=d))
        frames = [frame_at(a) for a in alphas]

    return FrameSequence(frames=frames, alphas=list(alphas), config=cfg.snapshot())

"""Noise schedule, denoiser training, deterministic DDIM sampling and inversion.

Sampling is always deterministic (eta = 0) and never applies classifier-free
guidance.  Inversion runs the same first-order update low-t -> high-t on the
same distilled sub-schedule, so step grids align for attention capture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import unet
from .optim import AdamW
from .tensor import Graph, NonFiniteError, Tensor


class TrainingDiverged(RuntimeError):
    """Loss went non-finite during optimization."""


@dataclass(frozen=True)
class DiffusionSchedule:
    """beta/alpha-bar sequences for T steps plus the distilled DDIM sub-schedule.

    ``beta[t]`` and ``alpha_bar[t]`` are indexed by diffusion step t in
    [0, T]; index 0 is the clean-data anchor with alpha_bar[0] = 1.
    ``taus`` is the ascending sub-sequence of step indices visited by DDIM.
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    taus: tuple

    @property
    def ddim_steps(self):
        return len(self.taus)


def make_schedule(T=1000, beta_start=1e-4, beta_end=0.02, ddim_steps=50):
    """Linear beta schedule; alpha_bar accumulated in float64."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start < beta_end < 1.0) and not (T == 1 and 0.0 < beta_start < 1.0):
        raise ValueError("need 0 < beta_start < beta_end < 1")
    if not 1 <= ddim_steps <= T:
        raise ValueError("ddim_steps must lie in [1, T]")
    beta = np.zeros(T + 1, dtype=np.float64)
    if T == 1:
        beta[1] = beta_start
    else:
        beta[1:] = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.ones(T + 1, dtype=np.float64)
    alpha_bar[1:] = np.cumprod(1.0 - beta[1:])
    taus = tuple(int(round(i * T / ddim_steps)) for i in range(1, ddim_steps + 1))
    if len(set(taus)) != len(taus) or taus[0] < 1 or taus[-1] > T:
        raise ValueError("distilled sub-schedule is degenerate")
    sched = DiffusionSchedule(T=T, beta=beta, alpha_bar=alpha_bar, taus=taus)
    if np.any(np.diff(alpha_bar) >= 0):
        raise ValueError("alpha_bar must be strictly decreasing")
    return sched


def q_sample(z0, t, eps, sched):
    """Noised latent sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"q_sample: shapes {z0.shape} vs {eps.shape}")
    if not 0 <= int(t) <= sched.T:
        raise ValueError(f"t={t} outside [0, {sched.T}]")
    ab = float(sched.alpha_bar[int(t)])
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    weight_decay: float = 0.0
    log_every: int = 100


def train_base(images, labels, params, sched, config):
    """Train the denoiser on the noise-prediction objective.

    Each step draws a batch, per-sample uniform t in [1, T] and fresh
    Gaussian noise, and takes one AdamW step on the MSE between predicted
    and true noise.  Deterministic given the seed.  Returns the loss trace.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("images must be a nonempty (N,C,H,W) array")
    if len(labels) != len(images):
        raise ValueError("labels/images length mismatch")
    n_classes = params.arch.num_classes
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("label outside the architecture's class count")

    rng = np.random.default_rng(config.seed)
    params.set_trainable(True)
    opt = AdamW(params.weights.values(), lr=config.lr, weight_decay=config.weight_decay)
    onehot_eye = np.eye(n_classes, dtype=np.float32)
    losses = []
    try:
        for step in range(config.steps):
            idx = rng.integers(0, len(images), size=config.batch_size)
            t = rng.integers(1, sched.T + 1, size=config.batch_size)
            eps = rng.standard_normal(images[idx].shape).astype(np.float32)
            ab = sched.alpha_bar[t].reshape(-1, 1, 1, 1)
            z_t = (np.sqrt(ab) * images[idx] + np.sqrt(1.0 - ab) * eps).astype(np.float32)
            onehot = Tensor(onehot_eye[labels[idx]])
            try:
                with Graph() as g:
                    cond = T.matmul(onehot, params.weights["cond.embed"])
                    pred, _ = unet.forward(params, z_t, t, cond)
                    loss = T.mse_loss(pred, Tensor(eps))
                    g.backward(loss)
            except NonFiniteError as e:
                raise TrainingDiverged(f"training diverged at step {step}: {e}") from e
            opt.step()
            opt.zero_grad()
            losses.append(float(loss.data))
    finally:
        params.set_trainable(False)
    return losses


def _as_latent(z, what):
    arr = np.asarray(z)
    arr = arr.copy() if arr.dtype in (np.float32, np.float64) else arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} is not finite")
    return arr


class _PlainNet:
    """Adapter so raw UNetParams can drive the samplers directly."""

    def __init__(self, params):
        self.params = params
        self.arch = params.arch

    def predict(self, z, t, cond, attn_override=None, record=False):
        eps, rec = unet.forward(self.params, z, t, cond,
                                attn_override=attn_override, record=record)
        return eps.data, rec


def as_net(net_or_params):
    if isinstance(net_or_params, unet.UNetParams):
        return _PlainNet(net_or_params)
    return net_or_params


@dataclass
class DenoiseTrace:
    """Per-step observations of one denoising trajectory."""

    taus: tuple
    latents: list = field(default_factory=list)   # z entering each step, high t first
    attn: list = field(default_factory=list)      # per-step {layer: (K, V)}
    final: np.ndarray = None


def ddim_denoise(z_T, cond, net, sched, controller=None, capture=False):
    """Deterministic DDIM denoising across the distilled sub-schedule.

    Steps run highest t first.  ``controller``, when given, is consulted
    once per (step, layer) for K/V overrides; ``capture`` records instead.
    Returns the clean latent, or ``(z0, DenoiseTrace)`` when capturing.
    """
    if controller is not None and capture:
        raise ValueError("capture and control are mutually exclusive")
    net = as_net(net)
    z = _as_latent(z_T, "z_T")
    taus = sched.taus
    S = len(taus)
    trace = DenoiseTrace(taus=taus) if capture else None
    for p in range(S):
        t_cur = taus[S - 1 - p]
        t_prev = taus[S - 2 - p] if p < S - 1 else 0
        override = controller.overrides(p) if controller is not None else None
        eps, rec = net.predict(z, t_cur, cond, attn_override=override or None, record=capture)
        if capture:
            trace.latents.append(z.copy())
            trace.attn.append(rec)
        z = _ddim_step(z, eps, sched, t_cur, t_prev)
    if capture:
        trace.final = z.copy()
        return z, trace
    return z


def ddim_invert(z_0, cond, net, sched):
    """DDIM recurrence run low-t -> high-t; returns the terminal latent."""
    net = as_net(net)
    z = _as_latent(z_0, "z_0")
    taus = sched.taus
    for k, t_next in enumerate(taus):
        t_cur = taus[k - 1] if k > 0 else 0
        eps, _ = net.predict(z, t_cur, cond)
        z = _ddim_step(z, eps, sched, t_cur, t_next)
    return z


def _ddim_step(z, eps, sched, t_from, t_to):
    ab_from = float(sched.alpha_bar[t_from])
    ab_to = float(sched.alpha_bar[t_to])
    z0_hat = (z - math.sqrt(1.0 - ab_from) * eps) / math.sqrt(ab_from)
    out = math.sqrt(ab_to) * z0_hat + math.sqrt(1.0 - ab_to) * eps
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"DDIM step {t_from}->{t_to} produced non-finite values")
    return out


def z0_estimate(z, eps, sched, t):
    """Reconstructed clean-data estimate at step t (diagnostic)."""
    ab = float(sched.alpha_bar[int(t)])
    return (z - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)

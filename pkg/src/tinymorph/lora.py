"""Low-rank adapters on the attention Q/K/V projections.

A delta stores factor pairs (A, B) per adapted weight with the effective
residual ``scale * B @ A``.  B starts at zero, so a fresh delta is a
functional no-op.  Interpolation blends the effective residual matrices by
default; blending the raw factors is available for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import unet
from .diffusion import TrainingDiverged, q_sample
from .optim import AdamW
from .tensor import Graph, NonFiniteError, Tensor


@dataclass
class LoraDelta:
    rank: int
    scale: float = 1.0
    factors: dict = field(default_factory=dict)  # weight name -> (A: (r, d_in), B: (d_out, r))

    def adapted_names(self):
        return tuple(self.factors)

    def set_trainable(self, flag):
        for a, b in self.factors.values():
            a.requires_grad = bool(flag)
            b.requires_grad = bool(flag)

    def parameters(self):
        out = []
        for a, b in self.factors.values():
            out.extend((a, b))
        return out


def init_lora(params, rank=16, seed=0, scale=1.0):
    """A ~ N(0, 0.02^2), B = 0, covering every attention Q/K/V projection."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    rng = np.random.default_rng(seed)
    factors = {}
    for name in params.arch.lora_target_names():
        d_out, d_in = params.weights[name].shape
        if rank > min(d_in, d_out):
            raise ValueError(f"rank {rank} exceeds min dim of {name} ({min(d_in, d_out)})")
        a = Tensor((rng.standard_normal((rank, d_in)) * 0.02).astype(np.float32))
        b = Tensor(np.zeros((d_out, rank), dtype=np.float32))
        factors[name] = (a, b)
    return LoraDelta(rank=rank, scale=float(scale), factors=factors)


def effective_residuals(delta):
    """Dense residual per adapted weight: scale * B @ A."""
    return {name: delta.scale * (b.data @ a.data)
            for name, (a, b) in delta.factors.items()}


@dataclass
class LoraFitConfig:
    steps: int = 200
    lr: float = 2e-4
    rank: int = 16
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01


def fit_lora(z0, cond, base, sched, config):
    """Fit a low-rank delta to a single image by noise-prediction MSE.

    Optimizes A and B only (AdamW); per step draws a fresh (t, noise)
    pair with t uniform over [1, T].  The base weights are frozen and
    never mutated.  Returns ``(delta, loss trace)``.
    """
    z0 = np.asarray(z0, dtype=np.float32)
    if z0.ndim == 3:
        z0 = z0[None]
    rng = np.random.default_rng(config.seed)
    delta = init_lora(base, rank=config.rank, seed=rng.integers(2**31), scale=1.0)
    base.set_trainable(False)
    delta.set_trainable(True)
    opt = AdamW(delta.parameters(), lr=config.lr, betas=config.betas,
                weight_decay=config.weight_decay)
    losses = []
    for step in range(config.steps):
        t = int(rng.integers(1, sched.T + 1))
        eps = rng.standard_normal(z0.shape).astype(np.float32)
        z_t = q_sample(z0, t, eps, sched).astype(np.float32)
        try:
            with Graph() as g:
                pred, _ = unet.forward(base, z_t, t, cond, lora=delta)
                loss = T.mse_loss(pred, Tensor(eps))
                g.backward(loss)
        except NonFiniteError as e:
            raise TrainingDiverged(f"LoRA fit diverged at step {step}: {e}") from e
        opt.step()
        opt.zero_grad()
        losses.append(float(loss.data))
    delta.set_trainable(False)
    return delta, losses


def _check_compatible(d0, d1):
    if d0.rank != d1.rank:
        raise ValueError(f"rank mismatch: {d0.rank} vs {d1.rank}")
    if set(d0.factors) != set(d1.factors):
        raise ValueError("adapted weight sets differ")


def interp_lora(d0, d1, alpha, mode="product"):
    """Effective residuals of the blended delta (1-alpha)*d0 + alpha*d1.

    ``product`` blends the dense residual matrices themselves (endpoint
    exact); ``factor`` blends A/B factors before the product, for
    comparison.  alpha in [0, 1].
    """
    _check_compatible(d0, d1)
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 0.0:
        return effective_residuals(d0)
    if alpha == 1.0:
        return effective_residuals(d1)
    if mode == "product":
        r0 = effective_residuals(d0)
        r1 = effective_residuals(d1)
        return {name: (1.0 - alpha) * r0[name] + alpha * r1[name] for name in r0}
    if mode == "factor":
        s = (1.0 - alpha) * d0.scale + alpha * d1.scale
        out = {}
        for name, (a0, b0) in d0.factors.items():
            a1, b1 = d1.factors[name]
            a = (1.0 - alpha) * a0.data + alpha * a1.data
            b = (1.0 - alpha) * b0.data + alpha * b1.data
            out[name] = s * (b @ a)
        return out
    raise ValueError(f"unknown interpolation mode {mode!r}")


def apply_lora(base, residuals):
    """Inference view using W + delta-W per adapted weight; base unmutated."""
    return unet.EffectiveUNet(base, residuals)

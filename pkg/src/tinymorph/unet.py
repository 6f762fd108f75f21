"""Noise-prediction UNet: residual blocks, sinusoidal timestep embedding,
learned class-condition embedding, and single-head self-attention at the low
resolutions.

Self-attention layers expose two hooks used by the morphing pipeline:
recording the K/V matrices a pass computes, and overriding K/V with
externally supplied matrices (Q is always computed locally).  Recording and
overriding are mutually exclusive within one pass: an override upstream
would contaminate every recorded layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ArchSpec:
    """Architecture descriptor; round-trips through checkpoint meta tensors."""

    resolution: int = 32
    img_channels: int = 1
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 4)
    n_res_blocks: int = 1
    attn_resolutions: tuple = (16, 8)
    groups: int = 8
    time_dim: int = 128
    cond_dim: int = 64
    num_classes: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))
        object.__setattr__(self, "attn_resolutions", tuple(int(r) for r in self.attn_resolutions))
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")
        res = self.resolution
        for _ in self.channel_mults[1:]:
            if res % 2:
                raise ValueError("resolution does not halve cleanly across levels")
            res //= 2
        for c in self.level_channels():
            if c % self.groups:
                raise ValueError(f"groups={self.groups} does not divide {c} channels")

    def level_channels(self):
        return tuple(self.base_channels * m for m in self.channel_mults)

    def level_resolutions(self):
        return tuple(self.resolution // (2**i) for i in range(len(self.channel_mults)))

    def attn_layer_names(self):
        """All self-attention layer names in forward execution order."""
        names = []
        for stage in ("down", "mid", "up"):
            names.extend(self.attn_layer_names_for_stage(stage))
        return tuple(names)

    def attn_layer_names_for_stage(self, stage):
        resolutions = self.level_resolutions()
        n_levels = len(self.channel_mults)
        names = []
        if stage == "down":
            for lvl in range(n_levels):
                if resolutions[lvl] in self.attn_resolutions:
                    for j in range(self.n_res_blocks):
                        names.append(f"down{lvl}.b{j}.attn")
        elif stage == "mid":
            names.append("mid.attn")
        elif stage == "up":
            for lvl in reversed(range(n_levels)):
                if resolutions[lvl] in self.attn_resolutions:
                    for j in range(self.n_res_blocks):
                        names.append(f"up{lvl}.b{j}.attn")
        else:
            raise ValueError(f"unknown stage {stage!r}")
        return tuple(names)

    def injectable_layer_names(self, include_mid=False):
        """Layers that accept K/V overrides: upsampling attention, optionally mid."""
        names = list(self.attn_layer_names_for_stage("up"))
        if include_mid:
            names = list(self.attn_layer_names_for_stage("mid")) + names
        return tuple(names)

    def lora_target_names(self):
        """Weight names adapted by low-rank deltas: Q/K/V projections of every attention block."""
        out = []
        for layer in self.attn_layer_names():
            out.extend((f"{layer}.wq", f"{layer}.wk", f"{layer}.wv"))
        return tuple(out)


@dataclass
class UNetParams:
    arch: ArchSpec
    weights: dict = field(default_factory=dict)

    def set_trainable(self, flag):
        for w in self.weights.values():
            w.requires_grad = bool(flag)

    def state_arrays(self):
        return {name: w.data for name, w in self.weights.items()}

    def clone(self):
        return UNetParams(self.arch, {n: Tensor(w.data.copy()) for n, w in self.weights.items()})


@dataclass
class ConditionVector:
    embedding: np.ndarray
    source: object

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float32)
        if self.embedding.ndim != 1:
            raise ValueError("condition embedding must be a vector")
        if not np.all(np.isfinite(self.embedding)):
            raise ValueError("condition embedding must be finite")


def _trunc_normal(rng, shape, std=0.02):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def init_params(arch, seed=0):
    """Fresh weights: truncated normal (std 0.02) projections, zero biases,
    unit norm gains, zeroed final output conv."""
    rng = np.random.default_rng(seed)
    w = {}

    def proj(name, shape):
        w[name] = Tensor(_trunc_normal(rng, shape))

    def zeros(name, shape):
        w[name] = Tensor(np.zeros(shape, dtype=np.float32))

    def ones(name, shape):
        w[name] = Tensor(np.ones(shape, dtype=np.float32))

    def gn(prefix, c):
        ones(f"{prefix}.g", (c,))
        zeros(f"{prefix}.b", (c,))

    def conv(prefix, cin, cout):
        proj(f"{prefix}.w", (cout, cin, 3, 3))
        zeros(f"{prefix}.b", (cout,))

    def res_block(prefix, cin, cout):
        gn(f"{prefix}.gn1", cin)
        conv(f"{prefix}.conv1", cin, cout)
        proj(f"{prefix}.temb.w", (cout, arch.time_dim))
        zeros(f"{prefix}.temb.b", (cout,))
        gn(f"{prefix}.gn2", cout)
        conv(f"{prefix}.conv2", cout, cout)
        if cin != cout:
            conv(f"{prefix}.skip", cin, cout)

    def attn_block(prefix, c):
        gn(f"{prefix}.gn", c)
        for leaf in ("wq", "wk", "wv", "wo"):
            proj(f"{prefix}.{leaf}", (c, c))

    td = arch.time_dim
    proj("temb.fc1.w", (td, td))
    zeros("temb.fc1.b", (td,))
    proj("temb.fc2.w", (td, td))
    zeros("temb.fc2.b", (td,))
    proj("cond.proj.w", (td, arch.cond_dim))
    proj("cond.embed", (arch.num_classes, arch.cond_dim))

    chans = arch.level_channels()
    resolutions = arch.level_resolutions()
    n_levels = len(chans)
    conv("stem", arch.img_channels, chans[0])

    cur = chans[0]
    for lvl in range(n_levels):
        for j in range(arch.n_res_blocks):
            res_block(f"down{lvl}.b{j}", cur, chans[lvl])
            cur = chans[lvl]
            if resolutions[lvl] in arch.attn_resolutions:
                attn_block(f"down{lvl}.b{j}.attn", cur)

    res_block("mid.r0", cur, cur)
    attn_block("mid.attn", cur)
    res_block("mid.r1", cur, cur)

    for lvl in reversed(range(n_levels)):
        for j in range(arch.n_res_blocks):
            cin = cur + chans[lvl] if j == 0 else cur
            res_block(f"up{lvl}.b{j}", cin, chans[lvl])
            cur = chans[lvl]
            if resolutions[lvl] in arch.attn_resolutions:
                attn_block(f"up{lvl}.b{j}.attn", cur)

    gn("head.gn", cur)
    zeros("head.conv.w", (arch.img_channels, cur, 3, 3))
    zeros("head.conv.b", (arch.img_channels,))

    return UNetParams(arch, w)


def timestep_embed(t, dim):
    """Sinusoidal embedding: [sin | cos] halves at geometric frequencies."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    if half > 1:
        freqs = 10000.0 ** (-np.arange(half, dtype=np.float64) / (half - 1))
    else:
        freqs = np.ones(1, dtype=np.float64)
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return emb.astype(np.float32)


def condition_embed(class_id, params):
    """Learned embedding row for a class id."""
    table = params.weights["cond.embed"].data
    cid = int(class_id)
    if not 0 <= cid < table.shape[0]:
        raise ValueError(f"class id {cid} outside trained range [0, {table.shape[0]})")
    return ConditionVector(table[cid].copy(), cid)


def attention_tokens(q, k, v):
    """softmax(q^T k / sqrt(d)) applied to v, all shaped (B, d, tokens)."""
    d = q.shape[-2]
    logits = T.scale(T.matmul(q, k, transpose_a=True), 1.0 / math.sqrt(d))
    return T.matmul(v, T.softmax(logits), transpose_b=True)


def forward(params, z, t, cond, *, lora=None, attn_override=None, record=False):
    """One denoiser pass: predicts the noise component of ``z`` at step ``t``.

    ``lora`` carries trainable low-rank factors; pre-merged dense residuals
    go through :class:`EffectiveUNet` instead.  ``attn_override`` maps
    injectable layer names to (K, V) arrays of shape (tokens, channels).
    Returns ``(eps, records)`` where records is None unless ``record``.
    """
    arch = params.arch
    weights = params.weights
    x = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float32))
    if x.data.ndim != 4:
        raise ValueError("z must be (B, C, H, W)")
    B, C, H, W = x.shape
    if (C, H, W) != (arch.img_channels, arch.resolution, arch.resolution):
        raise ValueError(f"z shape {x.shape} does not match architecture "
                         f"({arch.img_channels},{arch.resolution},{arch.resolution})")

    if record and attn_override:
        raise ValueError("recording and overriding attention are mutually exclusive")
    if (record or attn_override) and B != 1:
        raise ValueError("attention record/override is defined for batch size 1")
    if attn_override:
        legal = set(arch.injectable_layer_names(include_mid=True))
        for name in attn_override:
            if name not in legal:
                raise KeyError(f"unknown or non-injectable attention layer {name!r}")

    lora_factors = lora.factors if lora is not None else {}
    lora_scale = lora.scale if lora is not None else 1.0

    def w(name):
        base = weights[name]
        fac = lora_factors.get(name)
        if fac is None:
            return base
        a, b = fac
        return T.add(base, T.scale(T.matmul(b, a), lora_scale))

    def gn_affine(h, prefix, c):
        y = T.group_norm(h, arch.groups)
        gamma = T.reshape(weights[f"{prefix}.g"], (1, c, 1, 1))
        beta = T.reshape(weights[f"{prefix}.b"], (1, c, 1, 1))
        return T.add(T.mul(y, gamma), beta)

    def conv(h, prefix, cout):
        y = T.conv2d(h, w(f"{prefix}.w"))
        return T.add(y, T.reshape(weights[f"{prefix}.b"], (1, cout, 1, 1)))

    def linear(h, prefix):
        y = T.matmul(h, w(f"{prefix}.w"), transpose_b=True)
        bias = weights[f"{prefix}.b"]
        return T.add(y, T.reshape(bias, (1, bias.shape[0])))

    records = {} if record else None

    def attn(h, prefix, c, hw):
        hn = gn_affine(h, f"{prefix}.gn", c)
        tok = T.reshape(hn, (B, c, hw[0] * hw[1]))
        q = T.matmul(w(f"{prefix}.wq"), tok)
        ov = attn_override.get(prefix) if attn_override else None
        if ov is not None:
            k_arr, v_arr = ov
            k_arr = np.asarray(k_arr, dtype=np.float32)
            v_arr = np.asarray(v_arr, dtype=np.float32)
            want = (hw[0] * hw[1], c)
            if k_arr.shape != want or v_arr.shape != want:
                raise ValueError(f"override for {prefix!r} must have shape {want}, "
                                 f"got {k_arr.shape} / {v_arr.shape}")
            # contiguous (1, c, tokens) layout, matching a locally computed k/v
            k = Tensor(np.ascontiguousarray(k_arr.T)[None])
            v = Tensor(np.ascontiguousarray(v_arr.T)[None])
        else:
            k = T.matmul(w(f"{prefix}.wk"), tok)
            v = T.matmul(w(f"{prefix}.wv"), tok)
            if record:
                records[prefix] = (k.data[0].T.copy(), v.data[0].T.copy())
        o = attention_tokens(q, k, v)
        o = T.matmul(w(f"{prefix}.wo"), o)
        return T.add(h, T.reshape(o, (B, c, hw[0], hw[1])))

    def res_block(h, prefix, cin, cout, temb_act):
        y = gn_affine(h, f"{prefix}.gn1", cin)
        y = conv(T.silu(y), f"{prefix}.conv1", cout)
        tp = linear(temb_act, f"{prefix}.temb")
        y = T.add(y, T.reshape(tp, (B, cout, 1, 1)))
        y = gn_affine(y, f"{prefix}.gn2", cout)
        y = conv(T.silu(y), f"{prefix}.conv2", cout)
        sk = h if cin == cout else conv(h, f"{prefix}.skip", cout)
        return T.add(y, sk)

    # timestep + condition embedding
    t_arr = np.atleast_1d(np.asarray(t))
    if np.any(t_arr < 0):
        raise ValueError("timestep must be non-negative")
    sin = Tensor(np.broadcast_to(timestep_embed(t_arr, arch.time_dim), (B, arch.time_dim)).copy())
    temb = linear(sin, "temb.fc1")
    temb = linear(T.silu(temb), "temb.fc2")

    if isinstance(cond, ConditionVector):
        c_in = Tensor(np.broadcast_to(cond.embedding[None, :], (B, arch.cond_dim)).copy())
    elif isinstance(cond, Tensor):
        c_in = cond
    else:
        c_in = Tensor(np.asarray(cond, dtype=np.float32).reshape(B, arch.cond_dim))
    temb = T.add(temb, T.matmul(c_in, w("cond.proj.w"), transpose_b=True))
    temb_act = T.silu(temb)

    chans = arch.level_channels()
    resolutions = arch.level_resolutions()
    n_levels = len(chans)

    h = conv(x, "stem", chans[0])
    cur = chans[0]
    skips = []
    size = arch.resolution
    for lvl in range(n_levels):
        for j in range(arch.n_res_blocks):
            h = res_block(h, f"down{lvl}.b{j}", cur, chans[lvl], temb_act)
            cur = chans[lvl]
            if resolutions[lvl] in arch.attn_resolutions:
                h = attn(h, f"down{lvl}.b{j}.attn", cur, (size, size))
        skips.append(h)
        if lvl < n_levels - 1:
            h = T.avgpool2(h)
            size //= 2

    h = res_block(h, "mid.r0", cur, cur, temb_act)
    h = attn(h, "mid.attn", cur, (size, size))
    h = res_block(h, "mid.r1", cur, cur, temb_act)

    for lvl in reversed(range(n_levels)):
        for j in range(arch.n_res_blocks):
            if j == 0:
                h = T.concat((h, skips[lvl]), axis=1)
                cin = cur + chans[lvl]
            else:
                cin = cur
            h = res_block(h, f"up{lvl}.b{j}", cin, chans[lvl], temb_act)
            cur = chans[lvl]
            if resolutions[lvl] in arch.attn_resolutions:
                h = attn(h, f"up{lvl}.b{j}.attn", cur, (size, size))
        if lvl > 0:
            h = T.nearest_upsample2(h)
            size *= 2

    h = T.silu(gn_affine(h, "head.gn", cur))
    eps = conv(h, "head.conv", arch.img_channels)
    return eps, records


class EffectiveUNet:
    """Inference view of the denoiser: base weights plus optional dense
    low-rank residuals, merged once at construction.  Base params are never
    mutated."""

    def __init__(self, params, residuals=None):
        if residuals:
            merged = dict(params.weights)
            targets = set(params.arch.lora_target_names())
            for name, delta in residuals.items():
                if name not in merged:
                    raise KeyError(f"unknown weight {name!r}")
                if name not in targets:
                    raise KeyError(f"{name!r} is not a low-rank-adapted projection")
                if delta.shape != merged[name].shape:
                    raise ValueError(f"residual shape {delta.shape} != weight shape {merged[name].shape}")
                merged[name] = Tensor(merged[name].data + np.asarray(delta, dtype=np.float32))
            self.params = UNetParams(params.arch, merged)
        else:
            self.params = params
        self.arch = self.params.arch

    def weight(self, name):
        return self.params.weights[name]

    def predict(self, z, t, cond, attn_override=None, record=False):
        """Numpy-in, numpy-out noise prediction (no graph recording)."""
        eps, records = forward(self.params, z, t, cond,
                               attn_override=attn_override, record=record)
        return eps.data, records


def arch_to_meta_arrays(arch):
    """Encode the architecture descriptor as named float tensors."""
    meta = {
        "meta.arch.resolution": [arch.resolution],
        "meta.arch.img_channels": [arch.img_channels],
        "meta.arch.base_channels": [arch.base_channels],
        "meta.arch.channel_mults": list(arch.channel_mults),
        "meta.arch.n_res_blocks": [arch.n_res_blocks],
        "meta.arch.attn_resolutions": list(arch.attn_resolutions),
        "meta.arch.groups": [arch.groups],
        "meta.arch.time_dim": [arch.time_dim],
        "meta.arch.cond_dim": [arch.cond_dim],
        "meta.arch.num_classes": [arch.num_classes],
    }
    return {k: np.asarray(v, dtype=np.float32) for k, v in meta.items()}


def arch_from_meta_arrays(arrays):
    def one(key):
        return int(arrays[f"meta.arch.{key}"][0])

    return ArchSpec(
        resolution=one("resolution"),
        img_channels=one("img_channels"),
        base_channels=one("base_channels"),
        channel_mults=tuple(int(v) for v in arrays["meta.arch.channel_mults"]),
        n_res_blocks=one("n_res_blocks"),
        attn_resolutions=tuple(int(v) for v in arrays["meta.arch.attn_resolutions"]),
        groups=one("groups"),
        time_dim=one("time_dim"),
        cond_dim=one("cond_dim"),
        num_classes=one("num_classes"),
    )

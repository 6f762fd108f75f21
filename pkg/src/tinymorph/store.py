"""Serialization of models, adapters and latents through the TDM1 container.

Architecture and schedule descriptors ride along as ``meta.*`` tensors so a
model file is self-describing.  ``TINYMORPH_MODEL_DIR`` provides a default
directory for resolving model/adapter paths that are not found as given.
"""

from __future__ import annotations

import os

import numpy as np

from . import checkpoint, unet
from .lora import LoraDelta
from .tensor import Tensor

MODEL_DIR_ENV = "TINYMORPH_MODEL_DIR"


def resolve_path(path):
    """Use the path as given; fall back to $TINYMORPH_MODEL_DIR/<path>."""
    if os.path.exists(path):
        return path
    base = os.environ.get(MODEL_DIR_ENV)
    if base:
        candidate = os.path.join(base, path)
        if os.path.exists(candidate):
            return candidate
    return path


def save_model(path, params, schedule_meta=None):
    tensors = dict(params.state_arrays())
    tensors.update(unet.arch_to_meta_arrays(params.arch))
    if schedule_meta:
        for key, value in schedule_meta.items():
            tensors[f"meta.schedule.{key}"] = np.asarray([value], dtype=np.float32)
    checkpoint.save_tensors(path, tensors)


def load_model(path):
    """Returns (UNetParams, schedule_meta dict)."""
    arrays = checkpoint.load_tensors(resolve_path(path))
    arch = unet.arch_from_meta_arrays(arrays)
    sched_meta = {}
    weights = {}
    for name, arr in arrays.items():
        if name.startswith("meta.schedule."):
            sched_meta[name[len("meta.schedule."):]] = float(arr[0])
        elif not name.startswith("meta."):
            weights[name] = Tensor(arr)
    params = unet.UNetParams(arch, weights)
    # fail fast if the file is missing weights for this architecture
    reference = unet.init_params(arch, seed=0)
    missing = set(reference.weights) - set(weights)
    if missing:
        raise checkpoint.ManifestError(f"{path}: missing weights, e.g. {sorted(missing)[:3]}")
    return params, sched_meta


def save_lora(path, delta):
    tensors = {
        "meta.lora.rank": np.asarray([delta.rank], dtype=np.float32),
        "meta.lora.scale": np.asarray([delta.scale], dtype=np.float32),
    }
    for name, (a, b) in delta.factors.items():
        tensors[f"lora.{name}.A"] = a.data
        tensors[f"lora.{name}.B"] = b.data
    checkpoint.save_tensors(path, tensors)


def load_lora(path):
    arrays = checkpoint.load_tensors(resolve_path(path))
    try:
        rank = int(arrays["meta.lora.rank"][0])
        scale = float(arrays["meta.lora.scale"][0])
    except KeyError as e:
        raise checkpoint.ManifestError(f"{path}: not an adapter file ({e})") from e
    factors = {}
    for name, arr in arrays.items():
        if name.startswith("lora.") and name.endswith(".A"):
            target = name[len("lora."):-2]
            b_name = f"lora.{target}.B"
            if b_name not in arrays:
                raise checkpoint.ManifestError(f"{path}: missing factor {b_name!r}")
            factors[target] = (Tensor(arr), Tensor(arrays[b_name]))
    if not factors:
        raise checkpoint.ManifestError(f"{path}: adapter file has no factors")
    return LoraDelta(rank=rank, scale=scale, factors=factors)


def save_latent(path, z):
    checkpoint.save_tensors(path, {"latent": np.asarray(z, dtype=np.float32)})


def load_latent(path):
    arrays = checkpoint.load_tensors(resolve_path(path))
    if "latent" not in arrays:
        raise checkpoint.ManifestError(f"{path}: no latent tensor")
    return arrays["latent"]

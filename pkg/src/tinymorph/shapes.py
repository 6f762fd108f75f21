"""Procedural training corpus: anti-aliased ellipses, regular polygons and
crosses with randomized pose and intensity."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_CLASSES = ("ellipse", "polygon-4", "cross")
KNOWN_ROSTER = ("ellipse", "polygon-3", "polygon-4", "polygon-5", "polygon-6", "cross")
SUPERSAMPLE = 4


@dataclass
class ShapeSpec:
    class_id: int
    primitive: str
    center: tuple       # (cx, cy) pixels
    rotation: float     # radians
    scale: float        # circumradius, pixels
    fill: float         # [0, 1]
    background: float   # [0, 1]


def parse_classes(spec):
    """Class list from an int count or comma-separated primitive names."""
    if isinstance(spec, int):
        if not 1 <= spec <= len(KNOWN_ROSTER):
            raise ValueError(f"class count must be in [1, {len(KNOWN_ROSTER)}]")
        return list(KNOWN_ROSTER[:spec])
    if isinstance(spec, str):
        if spec.strip().isdigit():
            return parse_classes(int(spec))
        names = [s.strip() for s in spec.split(",") if s.strip()]
        spec = names
    for name in spec:
        if name not in KNOWN_ROSTER:
            raise ValueError(f"unknown primitive {name!r}; choose from {KNOWN_ROSTER}")
    if not spec:
        raise ValueError("empty class list")
    return list(spec)


def random_spec(rng, class_id, primitive, size):
    scale = float(rng.uniform(0.22, 0.36) * size)
    margin = scale + 1.5
    cx = float(rng.uniform(margin, size - margin))
    cy = float(rng.uniform(margin, size - margin))
    rot = float(rng.uniform(0.0, 2.0 * math.pi))
    fill = float(rng.uniform(0.65, 1.0))
    bg = float(rng.uniform(0.0, 0.25))
    return ShapeSpec(class_id=class_id, primitive=primitive, center=(cx, cy),
                     rotation=rot, scale=scale, fill=fill, background=bg)


def _mask(spec, xs, ys):
    """Boolean inside-mask on the given pixel-coordinate grids."""
    cx, cy = spec.center
    cos_r, sin_r = math.cos(spec.rotation), math.sin(spec.rotation)
    dx, dy = xs - cx, ys - cy
    u = dx * cos_r + dy * sin_r
    v = -dx * sin_r + dy * cos_r
    s = spec.scale
    if spec.primitive == "ellipse":
        return (u / s) ** 2 + (v / (0.62 * s)) ** 2 <= 1.0
    if spec.primitive.startswith("polygon-"):
        k = int(spec.primitive.split("-")[1])
        # regular k-gon with circumradius s: radial bound per angular sector
        theta = np.arctan2(v, u)
        rho = np.hypot(u, v)
        sector = np.mod(theta, 2.0 * math.pi / k)
        r_bound = s * math.cos(math.pi / k) / np.cos(sector - math.pi / k)
        return rho <= r_bound
    if spec.primitive == "cross":
        w = 0.30 * s
        return ((np.abs(u) <= s) & (np.abs(v) <= w)) | ((np.abs(v) <= s) & (np.abs(u) <= w))
    raise ValueError(f"unknown primitive {spec.primitive!r}")


def render(spec, size):
    """Anti-aliased rasterization to a (1, size, size) float32 image in [0, 1]."""
    ss = SUPERSAMPLE
    coords = (np.arange(size * ss, dtype=np.float64) + 0.5) / ss
    xs, ys = np.meshgrid(coords, coords)
    inside = _mask(spec, xs, ys).astype(np.float64)
    img = spec.background + (spec.fill - spec.background) * inside
    img = img.reshape(size, ss, size, ss).mean(axis=(1, 3))
    return img.astype(np.float32)[None]


def gen_dataset(classes, count, size, seed):
    """Deterministic image set: ``count`` images per class, mapped to [-1, 1].

    Returns (images (N,1,size,size), labels (N,), class_names).
    """
    if size not in (32, 64):
        raise ValueError("size must be 32 or 64")
    if count < 1:
        raise ValueError("count must be >= 1")
    class_names = parse_classes(classes)
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for cid, prim in enumerate(class_names):
        for _ in range(count):
            spec = random_spec(rng, cid, prim, size)
            images.append(render(spec, size) * 2.0 - 1.0)
            labels.append(cid)
    return np.stack(images), np.asarray(labels, dtype=np.int64), class_names

"""Perceptual distance, path-length and distance-variance metrics, and the
reschedule algorithm that equalizes adjacent-frame distances.

The distance function is a multi-scale RMS pixel distance; anything
satisfying the same pseudometric contract can be passed in its place since
the reschedule algorithm only depends on relative distances.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

DISTANCE_FN_ID = "multiscale-rms-3"


def perceptual_distance(a, b):
    """Sum over scales {1, 1/2, 1/4} of the RMS difference after repeated
    2x average pooling; symmetric and zero iff the images are equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"distance: shapes {a.shape} vs {b.shape}")
    if a.ndim < 2:
        raise ValueError("images need at least 2 spatial dims")
    total = 0.0
    cur_a, cur_b = a, b
    for s in range(3):
        diff = cur_a - cur_b
        total += float(np.sqrt((diff * diff).sum())) / np.sqrt(diff.size)
        h, w = cur_a.shape[-2], cur_a.shape[-1]
        if s == 2 or h < 2 or w < 2 or h % 2 or w % 2:
            break
        shape = cur_a.shape[:-2] + (h // 2, 2, w // 2, 2)
        cur_a = cur_a.reshape(shape).mean(axis=(-3, -1))
        cur_b = cur_b.reshape(shape).mean(axis=(-3, -1))
    return total


def adjacent_distances(frames, distance_fn=perceptual_distance):
    return [distance_fn(frames[i], frames[i + 1]) for i in range(len(frames) - 1)]


def ppl(frames, distance_fn=perceptual_distance):
    """Perceptual path length: sum of adjacent-frame distances."""
    if len(frames) < 2:
        raise ValueError("need at least 2 frames")
    return float(sum(adjacent_distances(frames, distance_fn)))


def pdv(frames, distance_fn=perceptual_distance):
    """Perceptual distance variance (population variance of adjacent distances)."""
    if len(frames) < 3:
        raise ValueError("need at least 3 frames")
    return float(np.var(adjacent_distances(frames, distance_fn)))


@dataclass
class DistanceProfile:
    """Adjacent distances of an n-interval frame sequence."""

    n: int
    d: list
    d_bar: float = None

    def __post_init__(self):
        self.d = [float(x) for x in self.d]
        if len(self.d) != self.n:
            raise ValueError(f"expected {self.n} distances, got {len(self.d)}")
        if any(x < 0 for x in self.d):
            raise ValueError("distances must be non-negative")
        total = float(sum(self.d))
        if self.d_bar is None:
            self.d_bar = total
        elif abs(self.d_bar - total) > 1e-9 * max(1.0, total):
            raise ValueError("d_bar does not equal the sum of distances")


def reschedule(profile):
    """Interpolation ratios that equalize per-interval distances.

    Treats the distances as a piecewise-constant density on [0, 1]
    (normalized to integrate to 1), forms the piecewise-linear cumulative
    distance, and inverts it at the uniform grid i/n.  Flat segments
    (zero-distance intervals) are inverted by left-continuity; the
    endpoints are pinned to exactly 0 and 1.

    The inversion runs in exact rational arithmetic on the (binary float)
    distances, so a uniform profile maps back to exactly i/n and the result
    is invariant to rescaling the distances.
    """
    n = profile.n
    if profile.d_bar <= 0:
        raise ValueError("reschedule needs a strictly positive total distance")
    d = [Fraction(x) for x in profile.d]
    d_bar = sum(d)
    cum = [Fraction(0)]
    for x in d:
        cum.append(cum[-1] + x / d_bar)

    out = [0.0]
    for i in range(1, n):
        y = Fraction(i, n)
        j = next(k for k in range(n + 1) if cum[k] >= y)  # leftmost knot at/above y
        if cum[j] == y:
            alpha = Fraction(j, n)
        else:
            # strictly inside segment [j-1, j], whose slope is positive
            alpha = Fraction(j - 1, n) + (y - cum[j - 1]) / (cum[j] - cum[j - 1]) / n
        out.append(float(alpha))
    out.append(1.0)
    return out


@dataclass
class MetricsReport:
    ppl: float
    pdv: float
    distances: list
    frames: int
    distance_fn: str = DISTANCE_FN_ID
    config_hash: str = None

    @classmethod
    def from_frames(cls, frames, distance_fn=perceptual_distance,
                    fn_id=DISTANCE_FN_ID, config_hash=None):
        d = adjacent_distances(frames, distance_fn)
        return cls(ppl=float(sum(d)), pdv=float(np.var(d)), distances=[float(x) for x in d],
                   frames=len(frames), distance_fn=fn_id, config_hash=config_hash)

    def to_json(self):
        doc = {
            "ppl": self.ppl,
            "pdv": self.pdv,
            "distances": self.distances,
            "frames": self.frames,
            "distance_fn": self.distance_fn,
            "config_hash": self.config_hash,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def psnr(a, b, peak=2.0):
    """Peak signal-to-noise ratio in dB; default peak spans the [-1,1] range."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)

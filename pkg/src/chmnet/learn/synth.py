"""Synthetic image pairs with known similarity transforms.

A textured blob (the object) is rendered on a cluttered background in the
source image, and again under translation + uniform scale on a different
cluttered background in the target. Keypoints are sampled on the object
and mapped through the known transform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass
class SynthConfig:
    size: int = 128
    translation: float = 0.25            # max |t| as a fraction of the image size
    scale_range: tuple[float, float] = (1 / math.sqrt(2), math.sqrt(2))
    n_keypoints: int = 8
    object_radius: float = 0.24          # mean blob radius as a fraction of the size
    n_clutter: int = 12
    texture_sigma: float = 2.5

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError("scale range must satisfy 0 < lo <= hi")
        if self.translation < 0 or self.n_keypoints < 1:
            raise ValueError("invalid synthetic configuration")


@dataclass
class Transform:
    """x' = scale * (x - centre) + centre + shift (pixel coordinates, (x, y) order)."""
    scale: float
    shift: tuple[float, float]
    centre: tuple[float, float]

    def apply(self, pts: np.ndarray) -> np.ndarray:
        c = np.asarray(self.centre)
        return self.scale * (np.asarray(pts, dtype=np.float64) - c) + c + np.asarray(self.shift)

    def inverse(self, pts: np.ndarray) -> np.ndarray:
        c = np.asarray(self.centre)
        return (np.asarray(pts, dtype=np.float64) - c - np.asarray(self.shift)) / self.scale + c


@dataclass
class TrainPair:
    source: np.ndarray
    target: np.ndarray
    kp_src: np.ndarray   # [M, 2] pixels (x, y)
    kp_tgt: np.ndarray   # [M, 2] pixels (x, y)
    mask: np.ndarray     # object support in the target
    transform: Transform


def _texture(rng: np.random.Generator, n: int, sigma: float) -> np.ndarray:
    t = ndimage.gaussian_filter(rng.normal(size=(n, n)), sigma, mode="wrap")
    lo, hi = np.percentile(t, [2, 98])
    return np.clip((t - lo) / max(hi - lo, 1e-12), 0.0, 1.0)


def _blob_radius(theta: np.ndarray, radius: float, harmonics: np.ndarray) -> np.ndarray:
    r = np.ones_like(theta)
    for k, (amp, phase) in enumerate(harmonics, start=2):
        r = r + amp * np.cos(k * theta + phase)
    return radius * r


def _blob_mask(pts_x: np.ndarray, pts_y: np.ndarray, centre, radius, harmonics) -> np.ndarray:
    dx, dy = pts_x - centre[0], pts_y - centre[1]
    return np.hypot(dx, dy) <= _blob_radius(np.arctan2(dy, dx), radius, harmonics)


def _background(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    n = cfg.size
    img = 0.3 + 0.4 * _texture(rng, n, 3 * cfg.texture_sigma)
    yy, xx = np.mgrid[0:n, 0:n]
    for _ in range(cfg.n_clutter):
        cx, cy = rng.uniform(0, n, size=2)
        rx, ry = rng.uniform(0.03, 0.12, size=2) * n
        ang = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang)
        v = -(xx - cx) * np.sin(ang) + (yy - cy) * np.cos(ang)
        m = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        if rng.random() < 0.5:
            img[m] = rng.uniform(0, 1)
        else:
            img[m] = _texture(rng, n, cfg.texture_sigma)[m]
    return img


def _render(rng, cfg, background, texture, centre, radius, harmonics, transform: Transform):
    n = cfg.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    src = transform.inverse(np.stack([xx.ravel(), yy.ravel()], axis=-1))
    sx, sy = src[:, 0].reshape(n, n), src[:, 1].reshape(n, n)
    mask = _blob_mask(sx, sy, centre, radius, harmonics)
    obj = ndimage.map_coordinates(texture, [sy, sx], order=1, mode="reflect")
    img = np.where(mask, obj, background)
    img = img + rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0), mask


def make_synthetic_pair(seed: int, cfg: SynthConfig | None = None) -> TrainPair:
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    n = cfg.size
    centre = (n - 1) / 2.0 + rng.uniform(-0.08, 0.08, size=2) * n
    radius = cfg.object_radius * n * rng.uniform(0.85, 1.15)
    harmonics = np.stack([rng.uniform(0, 0.15, size=3), rng.uniform(0, 2 * np.pi, size=3)], axis=-1)
    texture = _texture(rng, n, cfg.texture_sigma)
    lo, hi = cfg.scale_range
    scale = float(np.exp(rng.uniform(np.log(lo), np.log(hi)))) if hi > lo else float(lo)
    shift = rng.uniform(-cfg.translation, cfg.translation, size=2) * n if cfg.translation > 0 else np.zeros(2)
    transform = Transform(scale, (float(shift[0]), float(shift[1])), (float(centre[0]), float(centre[1])))

    identity = Transform(1.0, (0.0, 0.0), transform.centre)
    source, _ = _render(rng, cfg, _background(rng, cfg), texture, centre, radius, harmonics, identity)
    target, mask = _render(rng, cfg, _background(rng, cfg), texture, centre, radius, harmonics, transform)

    # keypoints well inside the object whose images stay inside the target
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    inner = _blob_mask(xx, yy, centre, radius - 3.0, harmonics)
    cand = np.stack([xx[inner], yy[inner]], axis=-1)
    mapped = transform.apply(cand)
    ok = np.all((mapped >= 0) & (mapped <= n - 1), axis=1)
    if ok.any():
        cand = cand[ok]
    pick = rng.choice(len(cand), size=cfg.n_keypoints, replace=len(cand) < cfg.n_keypoints)
    kp_src = cand[pick]
    kp_tgt = transform.apply(kp_src)
    return TrainPair(source, target, kp_src, kp_tgt, mask, transform)

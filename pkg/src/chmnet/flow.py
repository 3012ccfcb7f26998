"""Flow formation by kernel soft-argmax and keypoint transfer by a soft sampler.

All coordinates are normalized to [-1, 1] (x along columns, y along rows).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SoftArgmaxConfig:
    gaussian_sigma: float | None = None  # grid units; None -> 17 * H / 30
    beta: float = 50.0                   # inverse temperature on the masked scores
    tau: float = 0.1

    def __post_init__(self):
        if self.gaussian_sigma is not None and self.gaussian_sigma <= 0:
            raise ValueError("gaussian_sigma must be positive")
        if not 0 < self.tau <= 2:
            raise ValueError("tau must lie in (0, 2]")
        if self.beta <= 0:
            raise ValueError("beta must be positive")

    def sigma_for(self, height: int) -> float:
        return self.gaussian_sigma if self.gaussian_sigma is not None else 17.0 * height / 30.0


def regular_grid(height: int, width: int) -> np.ndarray:
    """[H, W, 2] grid of (x, y) normalized coordinates, corners at +-1."""
    ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def hard_argmax(c: np.ndarray) -> np.ndarray:
    """Per source cell (i, j): flat target index of the max (first on ties)."""
    h, w = c.shape[:2]
    return np.argmax(c.reshape(h, w, -1), axis=-1)


def gaussian_mask(c: np.ndarray, sigma: float) -> np.ndarray:
    """G^p for every source cell, p the hard argmax; peak value 1."""
    h, w, h2, w2 = c.shape
    py, px = np.unravel_index(hard_argmax(c), (h2, w2))
    k = np.arange(h2)[None, None, :, None]
    l = np.arange(w2)[None, None, None, :]
    d2 = (k - py[..., None, None]) ** 2 + (l - px[..., None, None]) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def masked_softmax(c: np.ndarray, g: np.ndarray, beta: float) -> np.ndarray:
    h, w = c.shape[:2]
    z = (beta * g * c).reshape(h, w, -1)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).reshape(c.shape)


def kernel_softmax(c: np.ndarray, cfg: SoftArgmaxConfig | None = None) -> np.ndarray:
    cfg = cfg or SoftArgmaxConfig()
    return masked_softmax(c, gaussian_mask(c, cfg.sigma_for(c.shape[2])), cfg.beta)


def form_flow(c_hat: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Expected target coordinate per source cell: [H, W, 2]."""
    return np.tensordot(c_hat, grid, axes=([2, 3], [0, 1]))


def soft_sampler(kp, grid: np.ndarray, tau: float) -> np.ndarray:
    """Truncated-linear weights around ``kp`` over the grid, summing to 1.

    When no node lies within ``tau`` the nearest node gets all the weight.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    d = np.linalg.norm(grid - np.asarray(kp, dtype=np.float64), axis=-1)
    w = np.maximum(0.0, tau - d)
    total = w.sum()
    if total <= 0.0:
        w = np.zeros_like(d)
        w[np.unravel_index(np.argmin(d), d.shape)] = 1.0
        return w
    return w / total


def transfer_keypoint(kp, flow: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return np.tensordot(weights, flow, axes=([0, 1], [0, 1]))


def denormalize(coord, width: int, height: int) -> np.ndarray:
    c = np.asarray(coord, dtype=np.float64)
    return np.stack([(c[..., 0] + 1) / 2 * (width - 1), (c[..., 1] + 1) / 2 * (height - 1)], axis=-1)


def normalize(pixel, width: int, height: int) -> np.ndarray:
    p = np.asarray(pixel, dtype=np.float64)
    return np.stack([p[..., 0] / (width - 1) * 2 - 1, p[..., 1] / (height - 1) * 2 - 1], axis=-1)

"""Convolutional Hough matching layers, the matching head, and the global
(RHM) voting baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor
from .convnd import OpCounter, conv_fast
from .kernel import KernelGeometry, SharedKernel, build_sharing, expand_dense, init_kernel


@dataclass
class ChmLayer:
    kernel: SharedKernel

    @property
    def rank(self) -> int:
        return self.kernel.geometry.rank

    @classmethod
    def create(cls, geometry: KernelGeometry, scheme: str = "psi", init: str = "delta",
               sigma: float = 0.01, rng: np.random.Generator | None = None) -> "ChmLayer":
        return cls(init_kernel(build_sharing(geometry, scheme), init, sigma, rng))


def chm_forward(layer: ChmLayer, c: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    if c.ndim != layer.rank:
        raise ValueError(f"input rank {c.ndim} != layer rank {layer.rank}")
    return conv_fast(c, expand_dense(layer.kernel), counter) + layer.kernel.bias


def scale_maxpool(c6: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Max over both scale axes of [H,W,S,H,W,S]; args[..., :] = (m, n)."""
    if c6.ndim != 6:
        raise ValueError("scale_maxpool expects a rank-6 tensor")
    return tensor.max_over_axes(c6, (2, 5))


@dataclass
class MatchHeadConfig:
    kernel_6d: KernelGeometry = KernelGeometry(5, 3, 6)
    scheme_6d: str = "psi"
    kernel_4d: KernelGeometry = KernelGeometry(5, 1, 4)
    scheme_4d: str = "psi"
    upsample: int = 2

    def upsampled(self, h: int, w: int) -> tuple[int, int]:
        return self.upsample * h, self.upsample * w


def upsample_4d(c4: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    return tensor.resize_bilinear_pairs(c4, [(0, 1), (2, 3)], [size, size])


def match_head(c6: np.ndarray, cfg: MatchHeadConfig, layers: tuple[ChmLayer, ChmLayer],
               counter: OpCounter | None = None) -> tuple[np.ndarray, np.ndarray]:
    layer6, layer4 = layers
    c2 = chm_forward(layer6, c6, counter)
    c3, args = scale_maxpool(c2)
    hb, wb = cfg.upsampled(c3.shape[0], c3.shape[1])
    c = chm_forward(layer4, upsample_4d(tensor.sigmoid(c3), (hb, wb)), counter)
    return c, args


@dataclass
class HoughBins:
    """Integer offset bins; axis q covers lo[q] .. lo[q] + n[q] - 1."""
    lo: tuple[int, ...]
    n: tuple[int, ...]

    @classmethod
    def for_grid(cls, height: int, width: int) -> "HoughBins":
        return cls((-(height - 1), -(width - 1)), (2 * height - 1, 2 * width - 1))


@dataclass
class VotingMap:
    bins: HoughBins
    values: np.ndarray
    n_discarded: int = 0

    def at(self, offsets: np.ndarray) -> np.ndarray:
        idx = tuple(np.asarray(offsets)[..., q] - lo for q, lo in enumerate(self.bins.lo))
        return self.values[idx]


def gaussian_window(sigma: float, ndim: int) -> np.ndarray:
    r = int(math.ceil(3 * sigma))
    ax = np.arange(-r, r + 1)
    grids = np.meshgrid(*([ax] * ndim), indexing="ij")
    w = np.exp(-sum(g * g for g in grids) / (2 * sigma * sigma))
    return w / w.sum()


def rhm_vote(candidates, bins: HoughBins, kernel: str = "gaussian", sigma: float = 1.0) -> VotingMap:
    """Global Hough voting: every candidate (offset, score) votes into one shared map."""
    offsets = np.asarray([np.atleast_1d(o) for o, _ in candidates], dtype=np.int64).reshape(len(candidates), len(bins.n))
    scores = np.asarray([s for _, s in candidates], dtype=np.float64)
    return _vote(offsets, scores, bins, kernel, sigma)


def _vote(offsets: np.ndarray, scores: np.ndarray, bins: HoughBins, kernel: str, sigma: float) -> VotingMap:
    idx = offsets - np.asarray(bins.lo)
    inside = np.all((idx >= 0) & (idx < np.asarray(bins.n)), axis=1)
    dirac = np.zeros(bins.n)
    np.add.at(dirac, tuple(idx[inside].T), scores[inside])
    n_bad = int((~inside).sum())
    if kernel == "dirac":
        return VotingMap(bins, dirac, n_bad)
    if kernel != "gaussian":
        raise ValueError(f"unknown voting kernel {kernel!r}")
    win = gaussian_window(sigma, len(bins.n))
    r = win.shape[0] // 2
    padded = np.pad(dirac, r)
    out = np.zeros(bins.n)
    for d in np.ndindex(*win.shape):
        out += win[d] * padded[tuple(slice(q, q + n) for q, n in zip(d, bins.n))]
    return VotingMap(bins, out, n_bad)


def offset_grid(height: int, width: int, height2: int | None = None, width2: int | None = None) -> np.ndarray:
    """Offsets (k - i, l - j) for every 4D index, shape [H,W,H',W',2]."""
    height2 = height if height2 is None else height2
    width2 = width if width2 is None else width2
    i, j, k, l = np.meshgrid(np.arange(height), np.arange(width), np.arange(height2),
                             np.arange(width2), indexing="ij")
    return np.stack([k - i, l - j], axis=-1)


def rhm_vote_tensor(c4: np.ndarray, kernel: str = "gaussian", sigma: float = 1.0) -> VotingMap:
    h, w, h2, w2 = c4.shape
    bins = HoughBins((-(h - 1), -(w - 1)), (h + h2 - 1, w + w2 - 1))
    return _vote(offset_grid(h, w, h2, w2).reshape(-1, 2), c4.ravel(), bins, kernel, sigma)


def rhm_rescore(c4: np.ndarray, v: VotingMap) -> np.ndarray:
    h, w, h2, w2 = c4.shape
    return c4 * v.at(offset_grid(h, w, h2, w2))


def rhm_head(c6: np.ndarray, cfg: MatchHeadConfig, kernel: str = "gaussian",
             sigma: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Baseline head: scale max-pool of the raw volume, global vote rescoring,
    then the same sigmoid + upsampling as :func:`match_head` (no learned layers)."""
    c3, args = scale_maxpool(c6)
    v = rhm_vote_tensor(c3, kernel, sigma)
    rescored = rhm_rescore(c3, v)
    rescored = rescored / max(float(rescored.max()), 1e-12)
    hb, wb = cfg.upsampled(c3.shape[0], c3.shape[1])
    return upsample_4d(tensor.sigmoid(rescored), (hb, wb)), args

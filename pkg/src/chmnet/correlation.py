"""Features, the multi-scale pyramid and the 6D correlation volume."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor


class ImageTooSmallError(ValueError):
    pass


@dataclass
class FeatureMap:
    values: np.ndarray  # [C, H, W]
    scale_id: int = 0

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def _block_means(patch: np.ndarray, p: int) -> np.ndarray:
    rows = np.linspace(0, patch.shape[0], p + 1).astype(int)[:-1]
    cols = np.linspace(0, patch.shape[1], p + 1).astype(int)[:-1]
    sums = np.add.reduceat(np.add.reduceat(patch, rows, axis=0), cols, axis=1)
    counts = np.outer(np.diff(np.append(rows, patch.shape[0])), np.diff(np.append(cols, patch.shape[1])))
    return sums / counts


def _unit(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > eps else np.zeros_like(v)


def cell_centres(n_pixels: int, n_cells: int) -> np.ndarray:
    """Cell centres on the align-corners grid: first/last cell centred on the border pixels."""
    if n_cells == 1:
        return np.array([(n_pixels - 1) / 2.0])
    return np.arange(n_cells) * (n_pixels - 1) / (n_cells - 1)


def patch_features(image: np.ndarray, grid: tuple[int, int], patch_size: int = 4,
                   n_bins: int = 8) -> FeatureMap:
    """Per-cell descriptor: mean-subtracted unit patch (block-averaged to
    ``patch_size``^2) concatenated with a unit gradient-orientation histogram.

    Cells have size ``image // grid`` and are centred on the nodes of the
    normalized [-1, 1] grid, so feature index and normalized coordinate agree;
    border cells read reflected pixels.
    """
    image = np.asarray(image, dtype=np.float64)
    gh, gw = grid
    ch, cw = image.shape[0] // gh, image.shape[1] // gw
    if ch < max(2, patch_size) or cw < max(2, patch_size):
        raise ImageTooSmallError(f"image {image.shape} too small for a {gh}x{gw} grid")
    dy, dx = np.gradient(image)
    mag = np.hypot(dx, dy)
    ang = np.mod(np.arctan2(dy, dx), 2 * np.pi)
    bins = np.minimum((ang / (2 * np.pi) * n_bins).astype(int), n_bins - 1)
    pad = ((ch, ch), (cw, cw))
    img_p = np.pad(image, pad, mode="reflect")
    mag_p = np.pad(mag, pad, mode="reflect")
    bins_p = np.pad(bins, pad, mode="reflect")
    tops = np.rint(cell_centres(image.shape[0], gh) - (ch - 1) / 2.0).astype(int) + ch
    lefts = np.rint(cell_centres(image.shape[1], gw) - (cw - 1) / 2.0).astype(int) + cw
    out = np.zeros((patch_size * patch_size + n_bins, gh, gw))
    for i, top in enumerate(tops):
        for j, left in enumerate(lefts):
            sl = (slice(top, top + ch), slice(left, left + cw))
            patch = _block_means(img_p[sl], patch_size).ravel()
            hist = np.bincount(bins_p[sl].ravel(), weights=mag_p[sl].ravel(), minlength=n_bins)
            out[:, i, j] = np.concatenate([_unit(patch - patch.mean()), _unit(hist)])
    return FeatureMap(out)


def synthetic_features(seed: int, channels: int, grid: tuple[int, int]) -> FeatureMap:
    rng = np.random.default_rng(seed)
    return FeatureMap(rng.normal(size=(channels,) + tuple(grid)))


def extract_features(image: np.ndarray, extractor: str = "patch", grid: tuple[int, int] = (15, 15),
                     seed: int = 0, channels: int = 24, patch_size: int = 4) -> FeatureMap:
    if extractor == "patch":
        return patch_features(image, grid, patch_size=patch_size)
    if extractor == "synthetic":
        return synthetic_features(seed, channels, grid)
    raise ValueError(f"unknown extractor {extractor!r}")


def default_scale_factors(n_scales: int) -> list[float]:
    c = n_scales // 2
    return [math.sqrt(2.0) ** (s - c) for s in range(n_scales)]


@dataclass
class PyramidConfig:
    n_scales: int = 3
    rho: int = 4
    scale_factors: list[float] | None = None
    # per scale: (weights [C/rho, C, 3, 3], bias [C/rho])
    theta: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        if self.n_scales < 1:
            raise ValueError("need at least one scale")
        if self.scale_factors is None:
            self.scale_factors = default_scale_factors(self.n_scales)
        if len(self.scale_factors) != self.n_scales:
            raise ValueError("one scale factor per scale")


def init_projection(channels: int, rho: int, n_scales: int, rng: np.random.Generator,
                    noise: float = 0.01) -> list[tuple[np.ndarray, np.ndarray]]:
    """Centre-tap random orthonormal channel mixing plus small noise on all taps."""
    if channels % rho:
        raise ValueError(f"channels {channels} not divisible by rho {rho}")
    out_ch = channels // rho
    theta = []
    for _ in range(n_scales):
        q, _ = np.linalg.qr(rng.normal(size=(channels, out_ch)))
        w = noise * rng.normal(size=(out_ch, channels, 3, 3))
        w[:, :, 1, 1] += q.T
        theta.append((w, np.zeros(out_ch)))
    return theta


def scaled_extent(n: int, factor: float) -> int:
    return max(2, int(round(n * factor)))


def conv2d_same(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Multi-channel 2D cross-correlation, zero 'same' padding: x [C,H,W], w [O,C,kh,kw]."""
    kh, kw = w.shape[2:]
    xp = np.pad(x, [(0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)])
    h, wd = x.shape[1:]
    out = np.zeros((w.shape[0], h, wd))
    for a in range(kh):
        for c in range(kw):
            out += np.tensordot(w[:, :, a, c], xp[:, a:a + h, c:c + wd], axes=1)
    return out + b[:, None, None]


def conv2d_same_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray):
    """Gradients (dx, dw, db) of sum(g * conv2d_same(x, w, b))."""
    kh, kw = w.shape[2:]
    xp = np.pad(x, [(0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)])
    h, wd = x.shape[1:]
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    for a in range(kh):
        for c in range(kw):
            win = xp[:, a:a + h, c:c + wd]
            dw[:, :, a, c] = np.tensordot(g, win, axes=([1, 2], [1, 2]))
            dxp[:, a:a + h, c:c + wd] += np.tensordot(w[:, :, a, c], g, axes=([0], [0]))
    dx = dxp[:, kh // 2:kh // 2 + h, kw // 2:kw // 2 + wd]
    return dx, dw, g.sum(axis=(1, 2))


def resize_features(values: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    return tensor.resize_bilinear_pairs(values, [(1, 2)], [size])


def build_pyramid(f: FeatureMap, cfg: PyramidConfig) -> list[FeatureMap]:
    out = []
    for s, factor in enumerate(cfg.scale_factors):
        size = (scaled_extent(f.height, factor), scaled_extent(f.width, factor))
        resized = resize_features(f.values, size)
        w, b = cfg.theta[s]
        out.append(FeatureMap(conv2d_same(resized, w, b), scale_id=s))
    return out


def unit_vectors(values: np.ndarray, eps: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Normalize [C, ...] along channels; zero vectors stay zero. Returns (unit, norms)."""
    norms = np.sqrt(np.sum(values * values, axis=0))
    safe = np.where(norms > eps, norms, 1.0)
    unit = np.where(norms > eps, values / safe, 0.0)
    return unit, norms


def cosine_volume(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Raw cosine similarity [Hm, Wm, Hn, Wn] between [C,Hm,Wm] and [C,Hn,Wn]."""
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"channel mismatch: {a.shape[0]} vs {b.shape[0]}")
    ua, _ = unit_vectors(a)
    ub, _ = unit_vectors(b)
    return np.tensordot(ua, ub, axes=([0], [0]))


def correlate_pair(fm: FeatureMap, fn: FeatureMap) -> np.ndarray:
    return tensor.relu(cosine_volume(fm.values, fn.values))


def assemble_6d(pairs, height: int, width: int) -> np.ndarray:
    """Resize each pairs[i][j] to [H,W,H,W] and place it at scale slot (i, j)."""
    s = len(pairs)
    out = np.zeros((height, width, s, height, width, s))
    for i in range(s):
        for j in range(s):
            out[:, :, i, :, :, j] = tensor.resize_bilinear_pairs(
                pairs[i][j], [(0, 1), (2, 3)], [(height, width), (height, width)])
    return out

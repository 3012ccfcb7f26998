"""Keypoint accuracy (PCK), precision-recall under clutter, and scale-vote histograms."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import flow as flow_mod

log = logging.getLogger(__name__)

TAU_MODES = ("img", "bbox")


@dataclass(frozen=True)
class PckConfig:
    alpha: float = 0.1
    mode: str = "img"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.mode not in TAU_MODES:
            raise ValueError(f"tau mode must be one of {TAU_MODES}, got {self.mode!r}")

    def threshold(self, width: float, height: float) -> float:
        if width < 1 or height < 1:
            raise ValueError("reference extent must be at least 1 pixel")
        return self.alpha * max(width, height)


def bbox_extent(points: np.ndarray) -> tuple[float, float]:
    """(w, h) of the keypoints' bounding box, floored at 1 pixel."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    span = pts.max(axis=0) - pts.min(axis=0)
    return max(float(span[0]), 1.0), max(float(span[1]), 1.0)


def pck_hits(pred: np.ndarray, gt: np.ndarray, threshold: float) -> np.ndarray:
    err = np.linalg.norm(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64), axis=-1)
    return err <= threshold


def pck(pairs, cfg: PckConfig) -> float:
    """Fraction of correct keypoints.

    ``pairs`` is a sequence of ``(pred, gt, (w, h))`` with ``pred``/``gt`` of
    shape [M, 2] in pixels; (w, h) is the image or bounding-box extent that
    sets that pair's threshold.
    """
    hits = []
    for pred, gt, (w, h) in pairs:
        hits.append(pck_hits(np.reshape(pred, (-1, 2)), np.reshape(gt, (-1, 2)), cfg.threshold(w, h)))
    if not hits or sum(len(h) for h in hits) == 0:
        raise ValueError("pck of an empty match list is undefined")
    return float(np.mean(np.concatenate(hits)))


# --- precision / recall ------------------------------------------------------

@dataclass(frozen=True)
class ScoredMatch:
    source_index: int
    source: tuple[float, float]      # normalized source coordinate
    target: tuple[float, float]      # predicted target, pixels
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("match score must be finite")


def nearest_index(coord, n_x: int, n_y: int) -> tuple[int, int]:
    """Nearest (row, col) node of an align-corners grid for a normalized (x, y)."""
    x, y = float(coord[0]), float(coord[1])
    col = int(np.clip(np.rint((x + 1) / 2 * (n_x - 1)), 0, n_x - 1))
    row = int(np.clip(np.rint((y + 1) / 2 * (n_y - 1)), 0, n_y - 1))
    return row, col


def match_score(c4: np.ndarray, source, target) -> float:
    """Correlation value at the 4D index nearest to a (source, target) match, both normalized."""
    h, w, h2, w2 = c4.shape
    i, j = nearest_index(source, w, h)
    k, l = nearest_index(target, w2, h2)
    return float(c4[i, j, k, l])


def scored_matches(c4: np.ndarray, flow: np.ndarray, target_size: tuple[int, int],
                   grid: int = 15, tau: float = 0.1) -> list[ScoredMatch]:
    """Transfer a regular ``grid`` x ``grid`` source grid and score each match."""
    nodes = flow_mod.regular_grid(flow.shape[0], flow.shape[1])
    src = flow_mod.regular_grid(grid, grid).reshape(-1, 2)
    w, h = target_size
    out = []
    for q, kp in enumerate(src):
        pred = flow_mod.transfer_keypoint(kp, flow, flow_mod.soft_sampler(kp, nodes, tau))
        px = flow_mod.denormalize(pred, w, h)
        out.append(ScoredMatch(q, (float(kp[0]), float(kp[1])), (float(px[0]), float(px[1])),
                               match_score(c4, kp, pred)))
    return out


def in_mask(mask: np.ndarray, point) -> bool:
    h, w = mask.shape
    col, row = int(np.rint(point[0])), int(np.rint(point[1]))
    return 0 <= row < h and 0 <= col < w and bool(mask[row, col])


def pr_curve(pairs) -> list[tuple[int, float, float]]:
    """Pooled precision-recall sweep over ``(matches, mask)`` pairs.

    Matches are ranked by score (descending, ties by pair then source index).
    A match is a true positive iff its predicted target lies inside the mask.
    """
    ranked = []
    for p, (matches, mask) in enumerate(pairs):
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            log.warning("pair %d has an empty mask; skipped", p)
            continue
        for m in matches:
            ranked.append((-m.score, p, m.source_index, in_mask(mask, m.target)))
    if not ranked:
        raise ValueError("no pairs with a nonempty mask")
    ranked.sort(key=lambda r: r[:3])
    tp = np.cumsum([r[3] for r in ranked])
    n_mask = int(tp[-1])
    curve = []
    for k in range(1, len(ranked) + 1):
        n_tp = int(tp[k - 1])
        recall = n_tp / n_mask if n_mask else 0.0
        curve.append((k, n_tp / k, recall))
    return curve


def precision_at_recall(curve, recall: float) -> float:
    """Precision at the first k whose recall reaches ``recall``."""
    for _, p, r in curve:
        if r >= recall - 1e-12:
            return p
    return 0.0


# --- scale histogram ---------------------------------------------------------

def scale_histogram(args_list, n_scales: int) -> tuple[np.ndarray, np.ndarray]:
    """Counts and frequencies of scale-argmax pairs (m, n) over many positions and pairs."""
    counts = np.zeros((n_scales, n_scales), dtype=np.int64)
    for args in args_list:
        a = np.asarray(args).reshape(-1, 2)
        np.add.at(counts, (a[:, 0], a[:, 1]), 1)
    total = counts.sum()
    freq = counts / total if total else counts.astype(np.float64)
    return counts, freq


def off_centre_mass(freq: np.ndarray) -> float:
    c = freq.shape[0] // 2
    return float(freq.sum() - freq[c, c])

"""Dense row-major float64 tensors and the resampling primitives built on them.

A ``DenseTensor`` is a C-contiguous ``numpy.ndarray`` of dtype float64. The
helpers here validate shapes and provide the few operations the rest of the
package needs: elementwise maps, align-corners bilinear resizing over pairs
of axes, and max-reduction with deterministic argmax.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DenseTensor = np.ndarray


class InvalidShapeError(ValueError):
    pass


class InvalidAxisError(ValueError):
    pass


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) < 1:
        raise InvalidShapeError("rank must be >= 1")
    if any(s < 1 for s in shape):
        raise InvalidShapeError(f"all extents must be >= 1, got {shape}")
    return shape


def new(shape: Sequence[int], fill: float = 0.0) -> DenseTensor:
    return np.full(_check_shape(shape), float(fill), dtype=np.float64)


def as_tensor(values) -> DenseTensor:
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    _check_shape(arr.shape)
    return arr


def strides(shape: Sequence[int]) -> tuple[int, ...]:
    """Row-major element strides (last axis fastest)."""
    out = [1] * len(shape)
    for k in range(len(shape) - 2, -1, -1):
        out[k] = out[k + 1] * shape[k + 1]
    return tuple(out)


def flat_index(index: Sequence[int], shape: Sequence[int]) -> int:
    return int(sum(i * s for i, s in zip(index, strides(shape))))


def multi_index(flat: int, shape: Sequence[int]) -> tuple[int, ...]:
    out = []
    for s in strides(shape):
        q, flat = divmod(flat, s)
        out.append(q)
    return tuple(out)


def relu(x: DenseTensor) -> DenseTensor:
    return np.maximum(x, 0.0)


def sigmoid(x: DenseTensor) -> DenseTensor:
    # split by sign to avoid overflow in exp
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def scale_by(c: float) -> Callable[[DenseTensor], DenseTensor]:
    return lambda x: x * c


def add_const(c: float) -> Callable[[DenseTensor], DenseTensor]:
    return lambda x: x + c


_NAMED_MAPS = {"relu": relu, "sigmoid": sigmoid}


def map_elementwise(t: DenseTensor, f) -> DenseTensor:
    """Apply ``f`` (a callable or one of ``"relu"``, ``"sigmoid"``) elementwise."""
    if isinstance(f, str):
        f = _NAMED_MAPS[f]
    return np.ascontiguousarray(f(np.asarray(t, dtype=np.float64)))


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation matrix of shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def apply_along_axis(t: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    """Contract ``mat`` (n_out, n_in) with axis ``axis`` of ``t``."""
    out = np.tensordot(mat, t, axes=([1], [axis]))
    return np.ascontiguousarray(np.moveaxis(out, 0, axis))


def _resize_plan(shape, pair_axes, new_extents):
    pair_axes = [tuple(p) for p in pair_axes]
    if len(pair_axes) != len(new_extents):
        raise ValueError("one (h, w) extent pair per axis pair is required")
    plan = []
    for (ra, ca), (nh, nw) in zip(pair_axes, new_extents):
        for ax, n in ((ra, nh), (ca, nw)):
            if not -len(shape) <= ax < len(shape):
                raise InvalidAxisError(f"axis {ax} out of range for rank {len(shape)}")
            if n < 1:
                raise InvalidShapeError("new extents must be >= 1")
            ax = ax % len(shape)
            plan.append((ax, interp_matrix(shape[ax], int(n))))
    return plan


def resize_bilinear_pairs(t: DenseTensor, pair_axes, new_extents) -> DenseTensor:
    """Separable align-corners bilinear resize over each (row, col) axis pair.

    ``pair_axes`` is e.g. ``[(0, 1), (2, 3)]`` for a 4D correlation tensor and
    ``new_extents`` the matching ``[(h, w), (h2, w2)]``.
    """
    out = np.asarray(t, dtype=np.float64)
    for ax, mat in _resize_plan(out.shape, pair_axes, new_extents):
        out = apply_along_axis(out, mat, ax)
    return out


def resize_bilinear_pairs_adjoint(g: DenseTensor, in_shape, pair_axes, new_extents) -> DenseTensor:
    """Transpose of :func:`resize_bilinear_pairs` applied to an output-shaped ``g``."""
    out = np.asarray(g, dtype=np.float64)
    for ax, mat in _resize_plan(tuple(in_shape), pair_axes, new_extents):
        out = apply_along_axis(out, mat.T, ax)
    return out


def max_over_axes(t: DenseTensor, axes: Sequence[int]) -> tuple[DenseTensor, np.ndarray]:
    """Max over ``axes``; returns (values, args) with args[..., q] the index along axes[q].

    Ties resolve to the smallest flat index within the reduced block.
    """
    t = np.asarray(t, dtype=np.float64)
    axes = [a % t.ndim for a in axes]
    if len(set(axes)) != len(axes):
        raise InvalidAxisError("axes must be distinct")
    keep = [a for a in range(t.ndim) if a not in axes]
    moved = np.transpose(t, keep + axes)
    red_shape = [t.shape[a] for a in axes]
    flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
    am = np.argmax(flat, axis=-1)
    values = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]
    args = np.stack(np.unravel_index(am, red_shape), axis=-1)
    if not keep:
        values = values.reshape(1)
        args = args.reshape(1, len(axes))
    return np.ascontiguousarray(values), args

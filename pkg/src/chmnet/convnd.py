"""Dense N-dimensional same-size convolution (cross-correlation orientation).

Three routes compute the same thing:

* :func:`conv_naive` loops over every output position and sums the padded
  window times the kernel. It is the oracle.
* :func:`conv_per_slice` is the classic slice-wise 4D construction: for every
  output slice along the leading axis it runs one lower-rank convolution per
  kernel slice, i.e. ``k * H`` 3D convolutions for a 4D input.
* :func:`conv_fast` folds every axis but the last three into the batch and
  runs one batched 3D convolution per leading kernel index: ``k`` calls for
  4D, ``k**3`` for 6D. Each call reads shifted slices of the once-padded
  input and accumulates straight into the output.

Zero padding of ``extent // 2`` per axis keeps the output shape equal to the
input shape. Bias is not applied here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np


class RankMismatchError(ValueError):
    pass


@dataclass
class OpCounter:
    n_3d_conv_calls: int = 0
    n_mul_adds: int = 0

    def merge(self, other: "OpCounter") -> "OpCounter":
        return OpCounter(self.n_3d_conv_calls + other.n_3d_conv_calls,
                         self.n_mul_adds + other.n_mul_adds)


@dataclass(frozen=True)
class ConvSpec:
    input_shape: tuple[int, ...]
    kernel_shape: tuple[int, ...]

    @property
    def output_shape(self) -> tuple[int, ...]:
        return tuple(self.input_shape)

    @property
    def padding(self) -> tuple[int, ...]:
        return tuple(k // 2 for k in self.kernel_shape)


def flops_estimate(spec: ConvSpec) -> int:
    return int(np.prod(spec.input_shape, dtype=object) * np.prod(spec.kernel_shape, dtype=object))


def _check(x: np.ndarray, k: np.ndarray, min_rank: int = 1) -> None:
    if x.ndim != k.ndim:
        raise RankMismatchError(f"input rank {x.ndim} != kernel rank {k.ndim}")
    if x.ndim < min_rank:
        raise RankMismatchError(f"rank {x.ndim} < {min_rank}")
    if any(s % 2 == 0 for s in k.shape):
        raise ValueError(f"kernel extents must be odd, got {k.shape}")


def conv_naive(x: np.ndarray, k: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    _check(x, k)
    pad = [(s // 2, s // 2) for s in k.shape]
    xp = np.pad(x, pad)
    out = np.empty_like(x)
    for idx in np.ndindex(*x.shape):
        window = xp[tuple(slice(i, i + s) for i, s in zip(idx, k.shape))]
        out[idx] = np.sum(window * k)
    if counter is not None:
        counter.n_mul_adds += x.size * k.size
    return out


@numba.njit(cache=True, fastmath=True)
def _core_loop(xp, k, out):
    nb, d0, d1, d2 = out.shape
    k0, k1, k2 = k.shape
    out[:] = 0.0
    for b in range(nb):
        for a in range(k0):
            for c in range(k1):
                for e in range(k2):
                    w = k[a, c, e]
                    for i in range(d0):
                        for j in range(d1):
                            for l in range(d2):
                                out[b, i, j, l] += w * xp[b, i + a, j + c, l + e]


@numba.njit(cache=True, fastmath=True)
def _core_accumulate(xp, src, k, out):
    # out[b] += conv3d(xp[src[b]], k); xp is already padded on the 3D axes
    nb, d0, d1, d2 = out.shape
    k0, k1, k2 = k.shape
    for b in range(nb):
        s = src[b]
        for a in range(k0):
            for c in range(k1):
                for e in range(k2):
                    w = k[a, c, e]
                    for i in range(d0):
                        for j in range(d1):
                            for l in range(d2):
                                out[b, i, j, l] += w * xp[s, i + a, j + c, l + e]


@numba.njit(cache=True, fastmath=True)
def _core_kernel_grad_loop(xp, g, gk):
    nb, d0, d1, d2 = g.shape
    k0, k1, k2 = gk.shape
    for a in range(k0):
        for c in range(k1):
            for e in range(k2):
                acc = 0.0
                for b in range(nb):
                    for i in range(d0):
                        for j in range(d1):
                            for l in range(d2):
                                acc += xp[b, i + a, j + c, l + e] * g[b, i, j, l]
                gk[a, c, e] = acc


def _pad3(x: np.ndarray, kshape) -> np.ndarray:
    return np.pad(x, [(0, 0)] + [(s // 2, s // 2) for s in kshape])


def conv3d_core(x: np.ndarray, k: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    """Batched direct 3D convolution: ``x`` is (B, D0, D1, D2), ``k`` is (k0, k1, k2)."""
    if x.ndim != 4 or k.ndim != 3:
        raise RankMismatchError("conv3d_core expects a (B, D0, D1, D2) input and a 3D kernel")
    out = np.empty(x.shape)
    _core_loop(_pad3(x, k.shape), np.ascontiguousarray(k, dtype=np.float64), out)
    if counter is not None:
        counter.n_3d_conv_calls += 1
        counter.n_mul_adds += x.size * k.size
    return out


def _layout(shape) -> list[int]:
    # conv commutes with a joint axis permutation; long axes innermost suit the 3D core
    return sorted(range(len(shape)), key=lambda a: shape[a])


def _shift_accumulate(out: np.ndarray, part: np.ndarray, shift: int) -> None:
    # out[:, j] += part[:, j + shift] where j + shift is in range
    n = out.shape[1]
    lo, hi = max(0, -shift), min(n, n - shift)
    if lo < hi:
        out[:, lo:hi] += part[:, lo + shift:hi + shift]


def _fast_padded(x: np.ndarray, k: np.ndarray, counter: OpCounter | None) -> np.ndarray:
    lead = x.shape[:-3]
    xp = np.pad(x, [(s // 2, s // 2) for s in k.shape])
    padded_lead = xp.shape[:-3]
    xp = xp.reshape((-1,) + xp.shape[-3:])
    out_idx = np.indices(lead).reshape(len(lead), int(np.prod(lead)))
    out = np.zeros((out_idx.shape[1],) + x.shape[-3:])
    for kidx in np.ndindex(*k.shape[:-3]):
        # flat padded-lead row that output row b reads for this kernel index
        src = np.ravel_multi_index(tuple(out_idx + np.reshape(kidx, (-1, 1))), padded_lead) if lead \
            else np.zeros(1, dtype=np.int64)
        k3 = np.ascontiguousarray(k[kidx])
        _core_accumulate(xp, np.asarray(src, dtype=np.int64), k3, out)
        if counter is not None:
            counter.n_3d_conv_calls += 1
            counter.n_mul_adds += out.size * k3.size
    return out.reshape(x.shape)


def conv_fast(x: np.ndarray, k: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    _check(x, k, min_rank=3)
    perm = _layout(x.shape)
    xt = np.ascontiguousarray(np.transpose(x, perm))
    kt = np.ascontiguousarray(np.transpose(k, perm))
    out = _fast_padded(xt, kt, counter)
    return np.ascontiguousarray(np.transpose(out, np.argsort(perm)))


def _per_slice(x: np.ndarray, k: np.ndarray, counter: OpCounter | None) -> np.ndarray:
    if k.ndim == 3:
        return conv3d_core(x[None], k, counter)[0]
    p = k.shape[0] // 2
    zero = np.zeros(x.shape[1:])
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        for j in range(k.shape[0]):
            src = i + j - p
            piece = x[src] if 0 <= src < x.shape[0] else zero
            out[i] += _per_slice(piece, k[j], counter)
    return out


def conv_per_slice(x: np.ndarray, k: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    """Slice-wise reference: one lower-rank convolution per (output slice, kernel slice)."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    _check(x, k, min_rank=3)
    return _per_slice(x, k, counter)


def _shifted(x: np.ndarray, shift: int) -> np.ndarray:
    # y[:, j] = x[:, j + shift], zero outside
    y = np.zeros_like(x)
    _shift_accumulate(y, x, shift)
    return y


def _kernel_grad_batched(x: np.ndarray, g: np.ndarray, kshape) -> np.ndarray:
    if len(kshape) == 3:
        gk = np.empty(kshape)
        _core_kernel_grad_loop(_pad3(x, kshape), g, gk)
        return gk
    b, d0 = x.shape[:2]
    p = kshape[0] // 2
    gf = g.reshape((b * d0,) + g.shape[2:])
    gk = np.empty(kshape)
    for i in range(kshape[0]):
        xs = _shifted(x, i - p).reshape(gf.shape)
        gk[i] = _kernel_grad_batched(xs, gf, kshape[1:])
    return gk


def kernel_grad(x: np.ndarray, g: np.ndarray, kernel_shape) -> np.ndarray:
    """Gradient of sum(g * conv(x, K)) with respect to the dense kernel K."""
    x = np.asarray(x, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    kernel_shape = tuple(kernel_shape)
    if x.ndim < 3:
        pad = [(s // 2, s // 2) for s in kernel_shape]
        xp = np.pad(x, pad)
        gk = np.empty(kernel_shape)
        for idx in np.ndindex(*kernel_shape):
            window = xp[tuple(slice(i, i + n) for i, n in zip(idx, x.shape))]
            gk[idx] = np.sum(window * g)
        return gk
    perm = _layout(x.shape)
    xt = np.ascontiguousarray(np.transpose(x, perm))
    gt = np.ascontiguousarray(np.transpose(g, perm))
    gk = _kernel_grad_batched(xt[None], gt[None], tuple(kernel_shape[a] for a in perm))
    return np.ascontiguousarray(np.transpose(gk, np.argsort(perm)))


def input_grad(g: np.ndarray, k: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    """Gradient of sum(g * conv(x, k)) with respect to x: convolution with the flipped kernel."""
    flipped = k[tuple(slice(None, None, -1) for _ in range(k.ndim))]
    if g.ndim >= 3:
        return conv_fast(g, flipped, counter)
    return conv_naive(g, flipped, counter)

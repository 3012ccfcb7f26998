"""Parameter-shared high-dimensional kernels.

A kernel over a (source region, target region) pair of offsets ``(z, z')`` is
stored as one parameter per *class* of dense positions. Three schemes:

``full``  every dense position is its own class.
``iso``   positions sharing the group-wise offset distance ``|z' - z|_g``.
``psi``   positions sharing the offset distance plus the unordered pair of
          distances ``{|z|, |z'|}`` from the kernel centre, per group
          (spatial and scale groups handled separately).

Distances are kept as exact integers: squared spatial norm and absolute
scale-index difference.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

SCHEMES = ("full", "iso", "psi")


@dataclass(frozen=True)
class KernelGeometry:
    spatial: int
    scale: int = 1
    rank: int = 4

    def __post_init__(self):
        if self.rank not in (4, 6):
            raise ValueError("kernel rank must be 4 or 6")
        if self.spatial < 1 or self.spatial % 2 == 0:
            raise ValueError("spatial extent must be a positive odd integer")
        if self.scale < 1 or self.scale % 2 == 0:
            raise ValueError("scale extent must be a positive odd integer")
        if self.rank == 4 and self.scale != 1:
            raise ValueError("rank-4 kernels have no scale axis")

    @property
    def half_shape(self) -> tuple[int, ...]:
        if self.rank == 4:
            return (self.spatial, self.spatial)
        return (self.spatial, self.spatial, self.scale)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.half_shape * 2

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def group_distance(offset) -> tuple[int, int]:
    """(dy^2 + dx^2, |ds|) for an integer offset (dy, dx[, ds])."""
    dy, dx = int(offset[0]), int(offset[1])
    ds = int(offset[2]) if len(offset) > 2 else 0
    return dy * dy + dx * dx, abs(ds)


def _class_key(scheme: str, z: tuple[int, ...], zp: tuple[int, ...]) -> tuple[int, ...]:
    if scheme == "full":
        return z + zp
    d_sp, d_s = group_distance(tuple(b - a for a, b in zip(z, zp)))
    if scheme == "iso":
        return (d_sp, d_s) if len(z) == 3 else (d_sp,)
    a_sp, a_s = group_distance(z)
    b_sp, b_s = group_distance(zp)
    key = (d_sp, min(a_sp, b_sp), max(a_sp, b_sp))
    if len(z) == 3:
        key += (d_s, min(a_s, b_s), max(a_s, b_s))
    return key


def scale_block_key(scheme: str, zs: int, zsp: int) -> tuple[int, ...]:
    """Key of the scale-group part of a class; equal keys imply equal 4D slices."""
    if scheme == "full":
        return (zs, zsp)
    if scheme == "iso":
        return (abs(zsp - zs),)
    return (abs(zsp - zs), min(abs(zs), abs(zsp)), max(abs(zs), abs(zsp)))


@dataclass
class SharedKernel:
    geometry: KernelGeometry
    scheme: str
    keys: list[tuple[int, ...]]
    class_of: np.ndarray
    share_count: np.ndarray
    params: np.ndarray
    bias: float = 0.0

    @property
    def n_classes(self) -> int:
        return len(self.keys)

    @property
    def center_class(self) -> int:
        centre = tuple(s // 2 for s in self.geometry.shape)
        return int(self.class_of[centre])

    def with_params(self, params, bias: float | None = None) -> "SharedKernel":
        params = np.asarray(params, dtype=np.float64).reshape(self.n_classes).copy()
        return replace(self, params=params, bias=self.bias if bias is None else float(bias))


def build_sharing(geometry: KernelGeometry, scheme: str) -> SharedKernel:
    if scheme not in SCHEMES:
        raise ValueError(f"unknown sharing scheme {scheme!r}")
    half = geometry.half_shape
    centre = [s // 2 for s in half]
    offsets = [tuple(i - c for i, c in zip(idx, centre)) for idx in itertools.product(*map(range, half))]
    raw = [_class_key(scheme, z, zp) for z in offsets for zp in offsets]
    keys = sorted(set(raw))
    lookup = {k: c for c, k in enumerate(keys)}
    class_of = np.array([lookup[k] for k in raw], dtype=np.int64).reshape(geometry.shape)
    share_count = np.bincount(class_of.ravel(), minlength=len(keys))
    return SharedKernel(geometry, scheme, keys, class_of, share_count, np.zeros(len(keys)))


def expand_dense(k: SharedKernel) -> np.ndarray:
    """Dense kernel with each position holding params[class] / share_count[class]."""
    eff = k.params / k.share_count
    return eff[k.class_of]


def accumulate_param_grad(k: SharedKernel, dense_grad: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`expand_dense`."""
    dense_grad = np.asarray(dense_grad, dtype=np.float64)
    if dense_grad.shape != k.class_of.shape:
        raise ValueError(f"gradient shape {dense_grad.shape} != kernel shape {k.class_of.shape}")
    sums = np.bincount(k.class_of.ravel(), weights=dense_grad.ravel(), minlength=k.n_classes)
    return sums / k.share_count


def init_kernel(k: SharedKernel, mode: str = "near_identity", sigma: float = 0.01,
                rng: np.random.Generator | None = None) -> SharedKernel:
    """``delta`` puts the whole centre class at full weight; ``near_identity`` adds N(0, sigma) noise.

    For psi and full sharing the centre class is the single zero tap, so the
    layer is an identity. The iso centre class holds every tap with z = z',
    so there "delta" is a sum along the zero-offset diagonal instead.
    """
    params = np.zeros(k.n_classes)
    c = k.center_class
    params[c] = k.share_count[c]
    if mode == "near_identity":
        if sigma > 0:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = params + rng.normal(0.0, sigma, size=k.n_classes)
    elif mode != "delta":
        raise ValueError(f"unknown init mode {mode!r}")
    return k.with_params(params, bias=0.0)


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def dump_kernel(k: SharedKernel, fmt: str = "classes") -> str:
    g = k.geometry
    lines = [f"{k.scheme} {g.rank} {g.spatial} {g.spatial} {g.scale} {k.n_classes} {_fmt(k.bias)}"]
    if fmt == "classes":
        eff = k.params / k.share_count
        for key, m, p, e in zip(k.keys, k.share_count, k.params, eff):
            lines.append(" ".join(str(v) for v in key) + f" {int(m)} {_fmt(p)} {_fmt(e)}")
        return "\n".join(lines) + "\n"
    if fmt != "dense_maps":
        raise ValueError(f"unknown dump format {fmt!r}")
    dense = expand_dense(k)
    n = g.spatial
    blocks = []
    if g.rank == 4:
        blocks.append(("block 4d", dense))
    else:
        c = g.scale // 2
        seen = set()
        for i, j in itertools.product(range(g.scale), repeat=2):
            key = scale_block_key(k.scheme, i - c, j - c)
            if key in seen:
                continue
            seen.add(key)
            label = "block scale_key=" + ",".join(map(str, key)) + f" ds={i - c} ds'={j - c}"
            blocks.append((label, dense[:, :, i, :, :, j]))
    for label, block in blocks:
        lines.append(f"# {label}")
        for a, b in itertools.product(range(n), repeat=2):
            lines.append(f"## map z=({a - n // 2},{b - n // 2})")
            for row in block[a, b]:
                lines.append(" ".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def n_dense_blocks(k: SharedKernel) -> int:
    if k.geometry.rank == 4:
        return 1
    c = k.geometry.scale // 2
    r = range(k.geometry.scale)
    return len({scale_block_key(k.scheme, i - c, j - c) for i in r for j in r})

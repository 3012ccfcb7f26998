"""Reverse-mode differentiation for the matching pipeline's op set.

Each op returns a :class:`Var` that remembers its parents and the name of
the op that produced it. :func:`backward` walks the graph in reverse
topological order and calls the registered adjoint for every op. This is
not a general autodiff system: only the ops below exist.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .. import tensor
from ..convnd import conv_fast, input_grad, kernel_grad
from ..correlation import conv2d_same, conv2d_same_backward, unit_vectors
from ..flow import form_flow, gaussian_mask, masked_softmax
from ..kernel import SharedKernel, accumulate_param_grad, expand_dense


class UnrecordedOpError(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "parents", "op", "ctx", "grad", "name")

    def __init__(self, value, parents=(), op="leaf", ctx=None, name=None):
        self.value = value
        self.parents = tuple(parents)
        self.op = op
        self.ctx = ctx
        self.grad = None
        self.name = name

    def __repr__(self):
        shape = getattr(self.value, "shape", ())
        return f"Var(op={self.op!r}, shape={shape})"


def leaf(value, name=None) -> Var:
    return Var(np.asarray(value, dtype=np.float64), name=name)


_ADJOINTS: dict[str, Callable] = {}


def adjoint(name: str):
    def register(fn):
        _ADJOINTS[name] = fn
        return fn
    return register


# --- ops ---------------------------------------------------------------

def conv2d(x: Var, w: Var, b: Var) -> Var:
    return Var(conv2d_same(x.value, w.value, b.value), (x, w, b), "conv2d")


@adjoint("conv2d")
def _conv2d_adj(out: Var, g):
    x, w, _ = out.parents
    return conv2d_same_backward(x.value, w.value, g)


def resize(x: Var, pair_axes, extents) -> Var:
    val = tensor.resize_bilinear_pairs(x.value, pair_axes, extents)
    return Var(val, (x,), "resize", (pair_axes, extents))


@adjoint("resize")
def _resize_adj(out: Var, g):
    (x,) = out.parents
    pair_axes, extents = out.ctx
    return (tensor.resize_bilinear_pairs_adjoint(g, x.value.shape, pair_axes, extents),)


def cosine_relu(a: Var, b: Var) -> Var:
    """relu(cosine similarity) between [C,Hm,Wm] and [C,Hn,Wn] feature maps."""
    ua, na = unit_vectors(a.value)
    ub, nb = unit_vectors(b.value)
    cos = np.tensordot(ua, ub, axes=([0], [0]))
    return Var(np.maximum(cos, 0.0), (a, b), "cosine_relu", (ua, na, ub, nb, cos > 0))


def _unit_adj(u, n, gu):
    # d(x/|x|) applied to upstream gu; zero-norm columns get zero gradient
    proj = np.sum(u * gu, axis=0)
    safe = np.where(n > 1e-12, n, 1.0)
    return np.where(n > 1e-12, (gu - u * proj) / safe, 0.0)


@adjoint("cosine_relu")
def _cosine_adj(out: Var, g):
    ua, na, ub, nb, active = out.ctx
    gc = np.where(active, g, 0.0)
    gua = np.tensordot(ub, gc, axes=([1, 2], [2, 3]))
    gub = np.tensordot(ua, gc, axes=([1, 2], [0, 1]))
    return _unit_adj(ua, na, gua), _unit_adj(ub, nb, gub)


def assemble6d(pairs: list[list[Var]], height: int, width: int) -> Var:
    s = len(pairs)
    out = np.zeros((height, width, s, height, width, s))
    flat = []
    for i in range(s):
        for j in range(s):
            out[:, :, i, :, :, j] = tensor.resize_bilinear_pairs(
                pairs[i][j].value, [(0, 1), (2, 3)], [(height, width)] * 2)
            flat.append(pairs[i][j])
    return Var(out, flat, "assemble6d", (s, height, width))


@adjoint("assemble6d")
def _assemble_adj(out: Var, g):
    s, h, w = out.ctx
    grads = []
    for q, p in enumerate(out.parents):
        i, j = divmod(q, s)
        grads.append(tensor.resize_bilinear_pairs_adjoint(
            g[:, :, i, :, :, j], p.value.shape, [(0, 1), (2, 3)], [(h, w)] * 2))
    return tuple(grads)


def chm(x: Var, params: Var, bias: Var, sharing: SharedKernel) -> Var:
    k = sharing.with_params(params.value, float(bias.value))
    dense = expand_dense(k)
    val = conv_fast(x.value, dense) + k.bias
    return Var(val, (x, params, bias), "chm", (sharing, dense))


@adjoint("chm")
def _chm_adj(out: Var, g):
    x, _, _ = out.parents
    sharing, dense = out.ctx
    gx = input_grad(g, dense)
    gk = accumulate_param_grad(sharing, kernel_grad(x.value, g, dense.shape))
    return gx, gk, np.asarray(g.sum())


def scale_maxpool(x: Var) -> tuple[Var, np.ndarray]:
    vals, args = tensor.max_over_axes(x.value, (2, 5))
    return Var(vals, (x,), "scale_maxpool", args), args


@adjoint("scale_maxpool")
def _maxpool_adj(out: Var, g):
    (x,) = out.parents
    args = out.ctx
    gx = np.zeros_like(x.value)
    h, w, h2, w2 = g.shape
    i, j, k, l = np.meshgrid(np.arange(h), np.arange(w), np.arange(h2), np.arange(w2), indexing="ij")
    gx[i, j, args[..., 0], k, l, args[..., 1]] = g
    return (gx,)


def sigmoid(x: Var) -> Var:
    return Var(tensor.sigmoid(x.value), (x,), "sigmoid")


@adjoint("sigmoid")
def _sigmoid_adj(out: Var, g):
    s = out.value
    return (g * s * (1.0 - s),)


def kernel_softmax(c: Var, sigma: float, beta: float) -> Var:
    mask = gaussian_mask(c.value, sigma)
    return Var(masked_softmax(c.value, mask, beta), (c,), "kernel_softmax", (mask, beta))


@adjoint("kernel_softmax")
def _softmax_adj(out: Var, g):
    mask, beta = out.ctx
    p = out.value
    h, w = p.shape[:2]
    pf, gf = p.reshape(h, w, -1), g.reshape(h, w, -1)
    dz = pf * (gf - np.sum(pf * gf, axis=-1, keepdims=True))
    return (beta * mask * dz.reshape(p.shape),)


def flow(c_hat: Var, grid: np.ndarray) -> Var:
    return Var(form_flow(c_hat.value, grid), (c_hat,), "flow", grid)


@adjoint("flow")
def _flow_adj(out: Var, g):
    grid = out.ctx
    return (np.tensordot(g, grid, axes=([2], [2])),)


def transfer(flow_var: Var, weights: np.ndarray) -> Var:
    """Soft-sampled keypoints: weights [M, H, W] (constant) -> [M, 2]."""
    val = np.tensordot(weights, flow_var.value, axes=([1, 2], [0, 1]))
    return Var(val, (flow_var,), "transfer", weights)


@adjoint("transfer")
def _transfer_adj(out: Var, g):
    weights = out.ctx
    return (np.tensordot(weights, g, axes=([0], [0])),)


def keypoint_loss(pred: Var, target: np.ndarray) -> Var:
    diff = pred.value - target
    dist = np.linalg.norm(diff, axis=-1)
    return Var(np.asarray(dist.mean()), (pred,), "keypoint_loss", (diff, dist))


@adjoint("keypoint_loss")
def _loss_adj(out: Var, g):
    diff, dist = out.ctx
    safe = np.where(dist > 0, dist, 1.0)
    unit = np.where(dist[:, None] > 0, diff / safe[:, None], 0.0)
    return (g * unit / len(dist),)


# --- driver --------------------------------------------------------------

def _topo(root: Var) -> list[Var]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Var, seed=1.0) -> None:
    """Accumulate d(root)/d(node) into ``node.grad`` for every node of the graph."""
    order = _topo(root)
    for node in order:
        if node.op != "leaf" and node.op not in _ADJOINTS:
            raise UnrecordedOpError(f"no adjoint recorded for op {node.op!r}")
        node.grad = None
    root.grad = np.asarray(seed, dtype=np.float64) * np.ones_like(root.value)
    for node in reversed(order):
        if node.op == "leaf" or node.grad is None:
            continue
        for p, gp in zip(node.parents, _ADJOINTS[node.op](node, node.grad)):
            gp = np.asarray(gp, dtype=np.float64).reshape(np.shape(p.value))
            p.grad = gp if p.grad is None else p.grad + gp

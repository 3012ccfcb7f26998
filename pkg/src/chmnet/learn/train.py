"""Minibatch training, checkpoints and gradient checking."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..kernel import SCHEMES, KernelGeometry, build_sharing
from . import model as M
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainResult:
    params: M.ParamSet
    losses: list[float] = field(default_factory=list)


def batch_loss_and_grad(params: M.ParamSet, batch: list[M.PreparedPair], cfg: M.ModelConfig):
    total, acc = 0.0, None
    # fixed summation order (by sample index) keeps results bitwise reproducible
    for prep in batch:
        loss, grads = M.loss_and_grad(params, prep, cfg)
        total += loss
        acc = grads if acc is None else {k: acc[k] + grads[k] for k in acc}
    n = len(batch)
    return total / n, {k: v / n for k, v in acc.items()}


def train(dataset: list[M.PreparedPair], params: M.ParamSet, cfg: M.ModelConfig, iterations: int = 100,
          batch_size: int = 4, lr: float = 1e-3, seed: int = 0, callback=None) -> TrainResult:
    """Minibatch Adam on the mean keypoint loss; one iteration = one batch."""
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    state = AdamState()
    params = params.copy()
    losses = []
    order = rng.permutation(len(dataset))
    cursor = 0
    for it in range(iterations):
        if cursor + batch_size > len(order):
            order, cursor = rng.permutation(len(dataset)), 0
        idx = order[cursor:cursor + batch_size]
        cursor += batch_size
        loss, grads = batch_loss_and_grad(params, [dataset[i] for i in idx], cfg)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise DivergenceError(f"non-finite loss or gradient at iteration {it}")
        losses.append(loss)
        new_values, state = adam_step(params.values, grads, state, lr)
        params = M.ParamSet(new_values, params.sharing_6d, params.sharing_4d)
        if callback is not None:
            callback(it, loss)
        log.debug("iter %d loss %.6f", it, loss)
    return TrainResult(params, losses)


def evaluate_loss(params: M.ParamSet, dataset: list[M.PreparedPair], cfg: M.ModelConfig) -> float:
    return float(np.mean([float(M.forward(params, p, cfg).loss.value) for p in dataset]))


# --- gradient check --------------------------------------------------------

def finite_difference(params: M.ParamSet, prep: M.PreparedPair, cfg: M.ModelConfig, name: str,
                      index: tuple[int, ...], step: float = 1e-5) -> float:
    def at(delta):
        p = params.copy()
        p.values[name][index] += delta
        return float(M.forward(p, prep, cfg).loss.value)
    return (at(step) - at(-step)) / (2 * step)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path, params: M.ParamSet) -> None:
    lines = []
    for which, sharing in (("chm6", params.sharing_6d), ("chm4", params.sharing_4d)):
        g = sharing.geometry
        lines.append(f"kernel {which} {sharing.scheme} {g.rank} {g.spatial} {g.scale}")
    for name in sorted(params.values):
        v = np.asarray(params.values[name])
        shape = "x".join(map(str, v.shape)) if v.shape else "scalar"
        lines.append(f"param {name} {shape} " + " ".join(f"{x:.17g}" for x in v.ravel()))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> M.ParamSet:
    kernels, values = {}, {}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "kernel":
                which, scheme, rank, spatial, scale = parts[1], parts[2], *map(int, parts[3:6])
                if scheme not in SCHEMES:
                    raise ValueError(f"unknown scheme {scheme!r} in checkpoint")
                kernels[which] = build_sharing(KernelGeometry(spatial, scale, rank), scheme)
            elif parts[0] == "param":
                name, shape = parts[1], parts[2]
                data = np.array([float(x) for x in parts[3:]])
                values[name] = data.reshape(()) if shape == "scalar" else data.reshape(tuple(map(int, shape.split("x"))))
            else:
                raise ValueError(f"unrecognised checkpoint line: {line.strip()!r}")
    if set(kernels) != {"chm6", "chm4"}:
        raise ValueError("checkpoint must define both chm6 and chm4 kernels")
    return M.ParamSet(values, kernels["chm6"], kernels["chm4"])

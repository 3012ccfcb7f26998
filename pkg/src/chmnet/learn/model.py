"""The trainable matching network: parameters, differentiable forward pass, loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import chm as chm_mod
from .. import flow as flow_mod
from ..correlation import FeatureMap, default_scale_factors, extract_features, init_projection, scaled_extent
from ..kernel import KernelGeometry, SharedKernel, build_sharing, init_kernel
from . import autodiff as ad
from .synth import TrainPair


@dataclass
class ModelConfig:
    grid: int = 15
    n_scales: int = 3
    rho: int = 4
    patch_size: int = 4
    kernel_6d: KernelGeometry = KernelGeometry(5, 3, 6)
    scheme_6d: str = "psi"
    kernel_4d: KernelGeometry = KernelGeometry(5, 1, 4)
    scheme_4d: str = "psi"
    upsample: int = 2
    softargmax: flow_mod.SoftArgmaxConfig = field(default_factory=flow_mod.SoftArgmaxConfig)
    init: str = "near_identity"
    init_sigma: float = 0.01

    @property
    def channels(self) -> int:
        return self.patch_size * self.patch_size + 8

    @property
    def fine_grid(self) -> int:
        return self.upsample * self.grid

    def head_config(self) -> chm_mod.MatchHeadConfig:
        return chm_mod.MatchHeadConfig(self.kernel_6d, self.scheme_6d, self.kernel_4d,
                                       self.scheme_4d, self.upsample)


@dataclass
class ParamSet:
    values: dict[str, np.ndarray]
    sharing_6d: SharedKernel
    sharing_4d: SharedKernel

    def __post_init__(self):
        self.values = {k: np.array(v, dtype=np.float64) for k, v in self.values.items()}

    def copy(self) -> "ParamSet":
        return ParamSet(self.values, self.sharing_6d, self.sharing_4d)

    def kernel(self, which: str) -> SharedKernel:
        sharing = self.sharing_6d if which == "chm6" else self.sharing_4d
        return sharing.with_params(self.values[f"{which}.k"], float(self.values[f"{which}.b"]))

    def n_scalars(self) -> int:
        return int(sum(v.size for v in self.values.values()))


def init_params(cfg: ModelConfig, seed: int = 0, init: str | None = None) -> ParamSet:
    rng = np.random.default_rng(seed)
    init = init or cfg.init
    s6 = build_sharing(cfg.kernel_6d, cfg.scheme_6d)
    s4 = build_sharing(cfg.kernel_4d, cfg.scheme_4d)
    k6 = init_kernel(s6, init, cfg.init_sigma, rng)
    k4 = init_kernel(s4, init, cfg.init_sigma, rng)
    values = {"chm6.k": k6.params, "chm6.b": np.asarray(0.0),
              "chm4.k": k4.params, "chm4.b": np.asarray(0.0)}
    for s, (w, b) in enumerate(init_projection(cfg.channels, cfg.rho, cfg.n_scales, rng)):
        values[f"theta{s}.w"] = w
        values[f"theta{s}.b"] = b
    return ParamSet(values, s6, s4)


@dataclass
class PreparedPair:
    """Parameter-independent inputs of one pair (features, normalized keypoints, samplers)."""
    feat_src: np.ndarray
    feat_tgt: np.ndarray
    kp_src: np.ndarray
    kp_tgt: np.ndarray
    weights: np.ndarray
    src_size: tuple[int, int]
    tgt_size: tuple[int, int]


def prepare(source: np.ndarray, target: np.ndarray, kp_src_px: np.ndarray, cfg: ModelConfig,
            kp_tgt_px: np.ndarray | None = None) -> PreparedPair:
    g = (cfg.grid, cfg.grid)
    fs = extract_features(source, "patch", g, patch_size=cfg.patch_size).values
    ft = extract_features(target, "patch", g, patch_size=cfg.patch_size).values
    h, w = source.shape
    ht, wt = target.shape
    kp_src = flow_mod.normalize(np.asarray(kp_src_px, dtype=np.float64).reshape(-1, 2), w, h)
    kp_tgt = (flow_mod.normalize(np.asarray(kp_tgt_px, dtype=np.float64).reshape(-1, 2), wt, ht)
              if kp_tgt_px is not None else np.zeros_like(kp_src))
    grid = flow_mod.regular_grid(cfg.fine_grid, cfg.fine_grid)
    weights = np.stack([flow_mod.soft_sampler(k, grid, cfg.softargmax.tau) for k in kp_src])
    return PreparedPair(fs, ft, kp_src, kp_tgt, weights, (w, h), (wt, ht))


def prepare_pair(pair: TrainPair, cfg: ModelConfig) -> PreparedPair:
    return prepare(pair.source, pair.target, pair.kp_src, cfg, pair.kp_tgt)


@dataclass
class Forward:
    loss: ad.Var
    pred: ad.Var
    corr: ad.Var
    c6: ad.Var
    pooled: ad.Var
    flow: ad.Var
    scale_args: np.ndarray
    leaves: dict[str, ad.Var]


def _pyramid(feat: np.ndarray, leaves, cfg: ModelConfig) -> list[ad.Var]:
    x = ad.leaf(feat)
    out = []
    for s, factor in enumerate(default_scale_factors(cfg.n_scales)):
        size = (scaled_extent(feat.shape[1], factor), scaled_extent(feat.shape[2], factor))
        r = ad.resize(x, [(1, 2)], [size])
        out.append(ad.conv2d(r, leaves[f"theta{s}.w"], leaves[f"theta{s}.b"]))
    return out


def correlation_6d(prep: PreparedPair, params: ParamSet, cfg: ModelConfig, leaves=None) -> ad.Var:
    leaves = leaves or {k: ad.leaf(v, k) for k, v in params.values.items()}
    ps = _pyramid(prep.feat_src, leaves, cfg)
    pt = _pyramid(prep.feat_tgt, leaves, cfg)
    pairs = [[ad.cosine_relu(a, b) for b in pt] for a in ps]
    return ad.assemble6d(pairs, cfg.grid, cfg.grid)


def forward(params: ParamSet, prep: PreparedPair, cfg: ModelConfig) -> Forward:
    leaves = {k: ad.leaf(v, k) for k, v in params.values.items()}
    c1 = correlation_6d(prep, params, cfg, leaves)
    c2 = ad.chm(c1, leaves["chm6.k"], leaves["chm6.b"], params.sharing_6d)
    c3, args = ad.scale_maxpool(c2)
    fine = cfg.fine_grid
    up = ad.resize(ad.sigmoid(c3), [(0, 1), (2, 3)], [(fine, fine)] * 2)
    c = ad.chm(up, leaves["chm4.k"], leaves["chm4.b"], params.sharing_4d)
    sm = cfg.softargmax
    c_hat = ad.kernel_softmax(c, sm.sigma_for(fine), sm.beta)
    fl = ad.flow(c_hat, flow_mod.regular_grid(fine, fine))
    pred = ad.transfer(fl, prep.weights)
    loss = ad.keypoint_loss(pred, prep.kp_tgt)
    return Forward(loss, pred, c, c1, c3, fl, args, leaves)


def loss_and_grad(params: ParamSet, prep: PreparedPair, cfg: ModelConfig) -> tuple[float, dict[str, np.ndarray]]:
    fw = forward(params, prep, cfg)
    ad.backward(fw.loss)
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in fw.leaves.items()}
    return float(fw.loss.value), grads


def predict_pixels(fw: Forward, prep: PreparedPair) -> np.ndarray:
    w, h = prep.tgt_size
    return flow_mod.denormalize(fw.pred.value, w, h)


@dataclass
class Inference:
    corr: np.ndarray          # final 4D correlation at the fine grid
    flow: np.ndarray          # [H̄, W̄, 2] normalized target coordinates
    scale_args: np.ndarray


def infer(params: ParamSet, prep: PreparedPair, cfg: ModelConfig, head: str = "chm",
          rhm_sigma: float = 1.0) -> Inference:
    """Run a head without recording gradients. ``head`` is "chm" or the "rhm" baseline."""
    if head == "chm":
        fw = forward(params, prep, cfg)
        return Inference(fw.corr.value, fw.flow.value, fw.scale_args)
    if head != "rhm":
        raise ValueError(f"unknown head {head!r}")
    c6 = correlation_6d(prep, params, cfg).value
    c, args = chm_mod.rhm_head(c6, cfg.head_config(), "gaussian", rhm_sigma)
    fine = c.shape[0]
    c_hat = flow_mod.masked_softmax(c, flow_mod.gaussian_mask(c, cfg.softargmax.sigma_for(fine)),
                                    cfg.softargmax.beta)
    return Inference(c, flow_mod.form_flow(c_hat, flow_mod.regular_grid(fine, fine)), args)

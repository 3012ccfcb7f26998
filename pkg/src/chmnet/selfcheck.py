"""Invariant suite behind ``chmnet selfcheck``: each check returns (name, ok, detail)."""

from __future__ import annotations

import numpy as np

from . import convnd, flow as flow_mod
from .kernel import KernelGeometry, accumulate_param_grad, build_sharing, expand_dense

EXPECTED_CLASSES = {
    ("iso", 4): 15, ("psi", 4): 55, ("full", 4): 625,
    ("iso", 6): 45, ("psi", 6): 220, ("full", 6): 5625,
}


def tiny_gradient_setup(seed: int = 0):
    """A 6x6-grid, two-scale model with perturbed parameters and one synthetic pair."""
    from .learn import model as M
    from .learn.synth import SynthConfig, make_synthetic_pair

    cfg = M.ModelConfig(grid=6, n_scales=2, rho=4, kernel_6d=KernelGeometry(3, 1, 6),
                        kernel_4d=KernelGeometry(3, 1, 4), softargmax=flow_mod.SoftArgmaxConfig(beta=10.0))
    prep = M.prepare_pair(make_synthetic_pair(seed + 2, SynthConfig(size=48, n_keypoints=4)), cfg)
    params = M.init_params(cfg, seed=seed + 3)
    rng = np.random.default_rng(seed)
    for k in params.values:
        params.values[k] = params.values[k] + 0.05 * rng.normal(size=np.shape(params.values[k]))
    return cfg, prep, params


def gradient_samples(cfg, prep, params, n_per_group: int = 2, seed: int = 0):
    """[(name, index, analytic, numeric)] for ``n_per_group`` entries of every parameter group."""
    from .learn import model as M
    from .learn.train import finite_difference

    _, grads = M.loss_and_grad(params, prep, cfg)
    rng = np.random.default_rng(seed)
    out = []
    for name in sorted(params.values):
        v = params.values[name]
        for _ in range(n_per_group if v.ndim else 1):
            idx = tuple(int(rng.integers(0, s)) for s in v.shape)
            out.append((name, idx, float(grads[name][idx]), finite_difference(params, prep, cfg, name, idx)))
    return out


def check_class_counts():
    got = {}
    for (scheme, rank), want in EXPECTED_CLASSES.items():
        geom = KernelGeometry(5, 3 if rank == 6 else 1, rank)
        got[(scheme, rank)] = build_sharing(geom, scheme).n_classes
    ok = got == EXPECTED_CLASSES
    return "class_counts", ok, " ".join(f"{s}{r}D={n}" for (s, r), n in sorted(got.items()))


def check_conv_oracle(seed: int):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for rank in (4, 6):
        for _ in range(3):
            x = rng.normal(size=tuple(rng.integers(3, 6, size=rank)))
            k = rng.normal(size=tuple(rng.choice([1, 3], size=rank)))
            worst = max(worst, float(np.max(np.abs(convnd.conv_fast(x, k) - convnd.conv_naive(x, k)))))
    return "conv_oracle", worst <= 1e-10, f"max abs diff {worst:.3g}"


def check_op_counts():
    rows = []
    for k, h in ((3, 8), (5, 15)):
        x = np.zeros((h,) * 4)
        kern = np.zeros((k,) * 4)
        fast, slow = convnd.OpCounter(), convnd.OpCounter()
        convnd.conv_fast(x, kern, fast)
        convnd.conv_per_slice(x, kern, slow)
        rows.append((k, h, fast.n_3d_conv_calls, slow.n_3d_conv_calls))
    ok = all(f == k and s == k * h for k, h, f, s in rows)
    return "op_counts", ok, " ".join(f"(k={k},H={h}) fast={f} per_slice={s}" for k, h, f, s in rows)


def check_tied_adjoint(seed: int):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for scheme in ("iso", "psi", "full"):
        k = build_sharing(KernelGeometry(3, 3, 6), scheme)
        k = k.with_params(rng.normal(size=k.n_classes), 0.0)
        g = rng.normal(size=k.geometry.shape)
        lhs = float(np.sum(expand_dense(k) * g))
        rhs = float(np.sum(k.params * accumulate_param_grad(k, g)))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1e-12))
    return "tied_adjoint", worst <= 1e-12, f"max rel diff {worst:.3g}"


def check_normalization(seed: int):
    rng = np.random.default_rng(seed)
    c = rng.uniform(0, 1, size=(6, 6, 6, 6))
    cfg = flow_mod.SoftArgmaxConfig()
    p = flow_mod.kernel_softmax(c, cfg)
    row_err = float(np.max(np.abs(p.reshape(36, -1).sum(axis=1) - 1.0)))
    grid = flow_mod.regular_grid(6, 6)
    fl = flow_mod.form_flow(p, grid)
    samp_err = 0.0
    for kp in rng.uniform(-1, 1, size=(20, 2)):
        samp_err = max(samp_err, abs(float(flow_mod.soft_sampler(kp, grid, cfg.tau).sum()) - 1.0))
    in_range = bool(np.all(np.abs(fl) <= 1.0 + 1e-12))
    ok = row_err <= 1e-9 and samp_err <= 1e-12 and in_range
    return "normalization", ok, f"softmax {row_err:.2g} sampler {samp_err:.2g} flow_in_range={in_range}"


def check_gradients(seed: int):
    from .learn.train import relative_error

    samples = gradient_samples(*tiny_gradient_setup(seed), seed=seed)
    worst = max(relative_error(a, n) for _, _, a, n in samples)
    return "gradients", worst <= 1e-4 and len(samples) >= 10, f"{len(samples)} params, max rel err {worst:.3g}"


def run_checks(seed: int = 0) -> list[tuple[str, bool, str]]:
    checks = [check_class_counts, lambda: check_conv_oracle(seed), check_op_counts,
              lambda: check_tied_adjoint(seed), lambda: check_normalization(seed),
              lambda: check_gradients(seed)]
    results = []
    for check in checks:
        try:
            results.append(check())
        except Exception as e:  # a crashing check is a failed check
            results.append((getattr(check, "__name__", "check"), False, f"raised {type(e).__name__}: {e}"))
    return results

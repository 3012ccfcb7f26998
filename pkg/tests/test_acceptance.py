"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line (printed in the terminal summary) before
asserting, so a red criterion still reports its measured value.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

from chmnet import chm as H
from chmnet import convnd, eval as ev, flow as F, selfcheck
from chmnet.cli import RunConfig
from chmnet.kernel import KernelGeometry, build_sharing
from chmnet.learn import model as M, synth, train as T

HELD_OUT_SEED, PR_SEED, SCALE_SEED = 10_000, 20_000, 30_000


def verdict(log, n: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {n:2d}  {title}: {detail}"
    log.append((n, line))
    print(line)
    assert ok, line


# 1 ---------------------------------------------------------------------------

def test_01_parameter_counts(acceptance_log):
    t0 = time.perf_counter()
    geo6, geo4 = KernelGeometry(5, 3, 6), KernelGeometry(5, 1, 4)
    n = {(s, r): build_sharing(geo6 if r == 6 else geo4, s).n_classes
         for s in ("iso", "psi", "full") for r in (4, 6)}
    classes_ok = n == selfcheck.EXPECTED_CLASSES
    totals = {s: (n[(s, 6)] + n[(s, 4)], 2 * n[(s, 4)]) for s in ("iso", "psi", "full")}
    want = {"psi": (275, 110), "iso": (60, 30), "full": (6250, 1250)}
    elapsed = time.perf_counter() - t0
    ok = classes_ok and totals == want and elapsed < 1.0
    detail = (" ".join(f"{s}{r}D={v}" for (s, r), v in sorted(n.items()))
              + " | " + " ".join(f"{s} 6D-4D={a} 4D-4D={b}" for s, (a, b) in sorted(totals.items()))
              + f" | {elapsed:.2f}s")
    verdict(acceptance_log, 1, "sharing-class counts", ok, detail)


# 2 ---------------------------------------------------------------------------

def test_02_fast_conv_matches_oracle(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    cases = []
    for _ in range(12):
        cases.append((tuple(rng.integers(1, 8, size=4)), tuple(rng.choice([1, 3, 5], size=4))))
    for _ in range(10):
        cases.append((tuple(rng.integers(1, 6, size=6)), tuple(rng.choice([1, 3], size=6))))
    # the reference 5x5x3 geometry at reduced extents
    cases += [((5, 5, 3, 5, 5, 3), (5, 5, 3, 5, 5, 3)), ((6, 4, 3, 4, 6, 3), (5, 5, 3, 5, 5, 3))]
    worst = 0.0
    for xs, ks in cases:
        x = rng.normal(size=xs)
        k = rng.normal(size=ks)
        worst = max(worst, float(np.max(np.abs(convnd.conv_fast(x, k) - convnd.conv_naive(x, k)))))
    elapsed = time.perf_counter() - t0
    ok = len(cases) >= 20 and worst <= 1e-10 and elapsed < 30
    verdict(acceptance_log, 2, "fast conv vs naive", ok,
            f"{len(cases)} cases, max abs diff {worst:.2e}, {elapsed:.1f}s")


# 3 ---------------------------------------------------------------------------

def _best_times(fns, x, k, repeats: int) -> list[float]:
    """Best wall time per function, with runs interleaved so drift hits all of them alike."""
    for fn in fns:
        fn(x, k)
    best = [math.inf] * len(fns)
    for _ in range(repeats):
        for i, fn in enumerate(fns):
            t0 = time.perf_counter()
            fn(x, k)
            best[i] = min(best[i], time.perf_counter() - t0)
    return best


def test_03_decomposition_op_counts(acceptance_log):
    counts = []
    for k, h in ((3, 8), (5, 15)):
        fast, slow = convnd.OpCounter(), convnd.OpCounter()
        convnd.conv_fast(np.zeros((h,) * 4), np.zeros((k,) * 4), fast)
        convnd.conv_per_slice(np.zeros((h,) * 4), np.zeros((k,) * 4), slow)
        counts.append((k, h, fast.n_3d_conv_calls, slow.n_3d_conv_calls))
    counts_ok = all(f == k and s == k * h for k, h, f, s in counts)
    rng = np.random.default_rng(3)
    x, kern = rng.normal(size=(15,) * 4), rng.normal(size=(5,) * 4)
    t_fast, t_slice = _best_times([convnd.conv_fast, convnd.conv_per_slice], x, kern, repeats=25)
    (t_naive,) = _best_times([convnd.conv_naive], x, kern, repeats=2)
    ok = counts_ok and t_fast < t_naive and t_fast < t_slice
    detail = (" ".join(f"(k={k},H={h}) fast={f} per_slice={s}" for k, h, f, s in counts)
              + f" | best ms fast={t_fast * 1e3:.1f} per_slice={t_slice * 1e3:.1f} naive={t_naive * 1e3:.1f}")
    verdict(acceptance_log, 3, "3D-call decomposition", ok, detail)


# 4 ---------------------------------------------------------------------------

def test_04_gradients(acceptance_log):
    t0 = time.perf_counter()
    cfg, prep, params = selfcheck.tiny_gradient_setup(seed=4)
    samples = selfcheck.gradient_samples(cfg, prep, params, n_per_group=2, seed=4)
    worst = max(T.relative_error(a, n) for _, _, a, n in samples)
    groups = {name for name, *_ in samples}
    elapsed = time.perf_counter() - t0
    ok = (cfg.grid == 6 and cfg.n_scales == 2 and len(samples) >= 10 and groups == set(params.values)
          and worst <= 1e-4 and elapsed < 120)
    verdict(acceptance_log, 4, "end-to-end gradients", ok,
            f"{len(samples)} params over {len(groups)} groups, max rel err {worst:.2e}, {elapsed:.1f}s")


# 5 ---------------------------------------------------------------------------

def test_05_identity_pair(acceptance_log):
    t0 = time.perf_counter()
    # rho=1 keeps every patch channel, so the delta-init model sees full-rank features
    cfg = M.ModelConfig(grid=15, rho=1)
    image = synth.make_synthetic_pair(5, synth.SynthConfig(size=240)).source
    kp = np.random.default_rng(5).uniform(0, 239, size=(30, 2))
    params = M.init_params(cfg, seed=0, init="delta")
    prep = M.prepare(image, image, kp, cfg, kp)
    fw = M.forward(params, prep, cfg)
    err = np.linalg.norm(M.predict_pixels(fw, prep) - kp, axis=1)
    elapsed = time.perf_counter() - t0
    ok = fw.flow.value.shape[:2] == (30, 30) and err.mean() <= 1.0 and elapsed < 30
    verdict(acceptance_log, 5, "identity pair", ok,
            f"mean err {err.mean():.3f}px (median {np.median(err):.3f}, max {err.max():.3f}) "
            f"at {fw.flow.value.shape[0]}x{fw.flow.value.shape[1]}, {elapsed:.1f}s")


# 6 ---------------------------------------------------------------------------

def test_06_normalization(acceptance_log):
    rng = np.random.default_rng(6)
    soft = F.SoftArgmaxConfig()
    row_err = samp_err = 0.0
    flow_max = 0.0
    for h, w in ((5, 5), (8, 6), (12, 12), (30, 30)):
        c = rng.uniform(-1, 1, size=(h, w, h, w))
        p = F.kernel_softmax(c, soft)
        row_err = max(row_err, float(np.max(np.abs(p.reshape(h * w, -1).sum(axis=1) - 1))))
        grid = F.regular_grid(h, w)
        flow_max = max(flow_max, float(np.max(np.abs(F.form_flow(p, grid)))))
        for kp in rng.uniform(-1, 1, size=(50, 2)):
            samp_err = max(samp_err, abs(float(F.soft_sampler(kp, grid, soft.tau).sum()) - 1))
    # and on a real forward pass
    cfg = M.ModelConfig(grid=6, kernel_6d=KernelGeometry(3, 3, 6), kernel_4d=KernelGeometry(3))
    pair = synth.make_synthetic_pair(6, synth.SynthConfig(size=64))
    prep = M.prepare_pair(pair, cfg)
    fw = M.forward(M.init_params(cfg, seed=6), prep, cfg)
    flow_max = max(flow_max, float(np.max(np.abs(fw.flow.value))))
    samp_err = max(samp_err, float(np.max(np.abs(prep.weights.reshape(len(prep.weights), -1).sum(axis=1) - 1))))
    ok = row_err <= 1e-9 and samp_err <= 1e-12 and flow_max <= 1.0 + 1e-12
    verdict(acceptance_log, 6, "normalization", ok,
            f"softmax rows {row_err:.1e}, sampler {samp_err:.1e}, max |flow| {flow_max:.4f}")


# 7 ---------------------------------------------------------------------------

def _local_hough_sum(c: np.ndarray, weight, radius: int) -> np.ndarray:
    """Double sum over source p and target p' windows, weighted by the offset distance."""
    h, w, h2, w2 = c.shape
    out = np.zeros_like(c)
    for i, j, a, b in np.ndindex(c.shape):
        total = 0.0
        for pi in range(max(0, i - radius), min(h, i + radius + 1)):
            for pj in range(max(0, j - radius), min(w, j + radius + 1)):
                for qa in range(max(0, a - radius), min(h2, a + radius + 1)):
                    for qb in range(max(0, b - radius), min(w2, b + radius + 1)):
                        d2 = ((qa - a) - (pi - i)) ** 2 + ((qb - b) - (pj - j)) ** 2
                        total += c[pi, pj, qa, qb] * weight(d2)
        out[i, j, a, b] = total
    return out


def test_07_iso_chm_equals_hough_double_sum(acceptance_log):
    rng = np.random.default_rng(7)
    worst = 0.0
    n = 0
    for size, shape in ((3, (4, 5, 3, 4)), (3, (6, 6, 6, 6)), (5, (5, 4, 6, 5)), (5, (3, 6, 4, 3))):
        k = build_sharing(KernelGeometry(size), "iso")
        k = k.with_params(rng.normal(size=k.n_classes), bias=0.0)
        table = {key[0]: p / m for key, p, m in zip(k.keys, k.params, k.share_count)}
        c = rng.normal(size=shape)
        got = H.chm_forward(H.ChmLayer(k), c)
        want = _local_hough_sum(c, lambda d2: table.get(d2, 0.0), size // 2)
        worst = max(worst, float(np.max(np.abs(got - want))))
        n += 1
    verdict(acceptance_log, 7, "iso CHM vs Hough double sum", worst <= 1e-10,
            f"{n} inputs, max abs diff {worst:.2e}")


# 8-10: one trained desk model ------------------------------------------------

@pytest.fixture(scope="module")
def desk():
    rc = RunConfig()
    cfg, scfg = rc.model(), rc.synth()
    t0 = time.perf_counter()
    train_set = [M.prepare_pair(synth.make_synthetic_pair(s, scfg), cfg) for s in range(rc.n_pairs)]
    init = M.init_params(cfg, seed=rc.seed)
    loss0 = T.evaluate_loss(init, train_set, cfg)
    result = T.train(train_set, init, cfg, rc.iterations, rc.batch_size, rc.lr, rc.seed)
    loss1 = T.evaluate_loss(result.params, train_set, cfg)
    elapsed = time.perf_counter() - t0
    return {"rc": rc, "cfg": cfg, "scfg": scfg, "params": result.params, "loss0": loss0, "loss1": loss1,
            "delta": M.init_params(cfg, seed=rc.seed, init="delta"), "train_seconds": elapsed}


def _held_out_pck(params, cfg, scfg, n: int = 50) -> float:
    rows = []
    for s in range(HELD_OUT_SEED, HELD_OUT_SEED + n):
        pair = synth.make_synthetic_pair(s, scfg)
        prep = M.prepare_pair(pair, cfg)
        h, w = pair.target.shape
        rows.append((M.predict_pixels(M.forward(params, prep, cfg), prep), pair.kp_tgt, (w, h)))
    return ev.pck(rows, ev.PckConfig(0.1, "img"))


def test_08_training_efficacy(acceptance_log, desk):
    t0 = time.perf_counter()
    pck_trained = _held_out_pck(desk["params"], desk["cfg"], desk["scfg"])
    pck_delta = _held_out_pck(desk["delta"], desk["cfg"], desk["scfg"])
    elapsed = desk["train_seconds"] + time.perf_counter() - t0
    ratio = desk["loss1"] / desk["loss0"]
    gain = 100 * (pck_trained - pck_delta)
    ok = ratio <= 0.5 and gain >= 10 and elapsed < 15 * 60
    verdict(acceptance_log, 8, "training efficacy", ok,
            f"loss {desk['loss0']:.4f} -> {desk['loss1']:.4f} (ratio {ratio:.3f}); "
            f"PCK@0.1 trained {pck_trained:.4f} vs delta {pck_delta:.4f} (+{gain:.2f}pp); {elapsed:.0f}s")


def _precision_at_half(params, cfg, scfg, head: str, grid: int, n: int = 30) -> float:
    scored = []
    for s in range(PR_SEED, PR_SEED + n):
        pair = synth.make_synthetic_pair(s, scfg)
        res = M.infer(params, M.prepare_pair(pair, cfg), cfg, head)
        h, w = pair.target.shape
        scored.append((ev.scored_matches(res.corr, res.flow, (w, h), grid, cfg.softargmax.tau), pair.mask))
    return ev.precision_at_recall(ev.pr_curve(scored), 0.5)


def test_09_chm_beats_rhm_under_clutter(acceptance_log, desk):
    rc = desk["rc"]
    cluttered = synth.SynthConfig(size=rc.image_size, translation=rc.translation,
                                  scale_range=(rc.scale_lo, rc.scale_hi), n_keypoints=rc.n_keypoints,
                                  n_clutter=30)
    p_chm = _precision_at_half(desk["params"], desk["cfg"], cluttered, "chm", rc.pr_grid)
    p_rhm = _precision_at_half(desk["params"], desk["cfg"], cluttered, "rhm", rc.pr_grid)
    verdict(acceptance_log, 9, "CHM vs RHM precision at recall 0.5", p_chm > p_rhm,
            f"CHM {p_chm:.4f} vs RHM {p_rhm:.4f} (30 pairs, 30 clutter objects)")


def _scale_freq(params, cfg, scfg, n: int = 30) -> np.ndarray:
    args = [M.infer(params, M.prepare_pair(synth.make_synthetic_pair(s, scfg), cfg), cfg).scale_args
            for s in range(SCALE_SEED, SCALE_SEED + n)]
    return ev.scale_histogram(args, cfg.n_scales)[1]


def test_10_scale_votes(acceptance_log, desk):
    rc, cfg = desk["rc"], desk["cfg"]
    base = dict(size=rc.image_size, translation=rc.translation, n_keypoints=rc.n_keypoints,
                n_clutter=rc.n_clutter)
    matched = _scale_freq(desk["params"], cfg, synth.SynthConfig(scale_range=(1.0, 1.0), **base))
    varied = _scale_freq(desk["params"], cfg, synth.SynthConfig(scale_range=(rc.scale_lo, rc.scale_hi), **base))
    centre = cfg.n_scales // 2
    mode = np.unravel_index(np.argmax(matched), matched.shape)
    mode_ok = tuple(int(v) for v in mode) == (centre, centre)
    off_m, off_v = ev.off_centre_mass(matched), ev.off_centre_mass(varied)
    ok = mode_ok and off_v > off_m
    verdict(acceptance_log, 10, "scale-vote histogram", ok,
            f"matched mode {tuple(int(v) for v in mode)} (centre freq {matched[centre, centre]:.3f}); "
            f"off-centre mass matched {off_m:.4f} vs varied {off_v:.4f}")

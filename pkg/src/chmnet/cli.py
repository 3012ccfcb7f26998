"""Command-line entry point: ``chmnet <command> [--config FILE] [--seed N] [--out PATH] ...``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import convnd, eval as ev, flow as flow_mod, io
from .kernel import SCHEMES, KernelGeometry, build_sharing, dump_kernel, init_kernel
from .learn import model as M
from .learn import synth, train as T

log = logging.getLogger("chmnet")

THREADS_ENV = "CHMNET_THREADS"

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_SELFCHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # model
    grid: int = 8
    upsample: int = 2
    n_scales: int = 3
    rho: int = 4
    patch_size: int = 8
    kernel_6d: int = 5
    kernel_6d_scale: int = 3
    scheme_6d: str = "psi"
    kernel_4d: int = 5
    scheme_4d: str = "psi"
    sigma_g: float | None = None
    beta: float = 50.0
    tau: float = 0.1
    init: str = "near_identity"
    init_sigma: float = 0.01
    # training
    iterations: int = 100
    batch_size: int = 4
    lr: float = 1e-3
    seed: int = 0
    # synthetic data
    n_pairs: int = 200
    image_size: int = 128
    translation: float = 0.25
    scale_lo: float = 1 / math.sqrt(2)
    scale_hi: float = math.sqrt(2)
    n_keypoints: int = 8
    n_clutter: int = 12
    # evaluation
    alpha: float = 0.1
    pck_mode: str = "img"
    pr_grid: int = 15

    def __post_init__(self):
        for name in ("grid", "upsample", "n_scales", "rho", "patch_size", "iterations", "batch_size",
                     "image_size", "n_keypoints", "pr_grid"):
            if getattr(self, name) < (0 if name == "iterations" else 1):
                raise UsageError(f"{name} must be positive")
        for name in ("scheme_6d", "scheme_4d"):
            if getattr(self, name) not in SCHEMES:
                raise UsageError(f"{name} must be one of {SCHEMES}")
        if self.n_pairs < 0:
            raise UsageError("n_pairs must be >= 0")

    def model(self) -> M.ModelConfig:
        try:
            return M.ModelConfig(
                grid=self.grid, n_scales=self.n_scales, rho=self.rho, patch_size=self.patch_size,
                kernel_6d=KernelGeometry(self.kernel_6d, self.kernel_6d_scale, 6), scheme_6d=self.scheme_6d,
                kernel_4d=KernelGeometry(self.kernel_4d, 1, 4), scheme_4d=self.scheme_4d,
                upsample=self.upsample,
                softargmax=flow_mod.SoftArgmaxConfig(self.sigma_g, self.beta, self.tau),
                init=self.init, init_sigma=self.init_sigma)
        except ValueError as e:
            raise UsageError(str(e)) from e

    def synth(self) -> synth.SynthConfig:
        try:
            return synth.SynthConfig(size=self.image_size, translation=self.translation,
                                     scale_range=(self.scale_lo, self.scale_hi),
                                     n_keypoints=self.n_keypoints, n_clutter=self.n_clutter)
        except ValueError as e:
            raise UsageError(str(e)) from e


def _parse_value(field: dataclasses.Field, text: str):
    default = field.default
    if field.name == "sigma_g":
        return None if text.lower() in ("none", "") else float(text)
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def build_config(path: str | None, overrides: dict[str, str]) -> RunConfig:
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    raw: dict[str, str] = {}
    if path is not None:
        if not Path(path).is_file():
            raise UsageError(f"config file {path} does not exist")
        try:
            raw.update(io.read_config(path))
        except ValueError as e:
            raise UsageError(str(e)) from e
    raw.update(overrides)
    values = {}
    for key, text in raw.items():
        if key not in fields:
            raise UsageError(f"unknown config key {key!r}")
        try:
            values[key] = _parse_value(fields[key], text)
        except ValueError as e:
            raise UsageError(f"bad value for {key}: {text!r}") from e
    return RunConfig(**values)


# --- commands ------------------------------------------------------------------

def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise RuntimeError(f"cannot create output directory {out}: {e}") from e
    return out


def _load_params(path, cfg: M.ModelConfig) -> M.ParamSet:
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    params = T.load_checkpoint(path)
    ref = M.init_params(cfg, 0, "delta")
    for name, v in ref.values.items():
        if name not in params.values or params.values[name].shape != v.shape:
            raise ValueError(f"checkpoint parameter {name} does not fit the configured model")
    if (params.sharing_6d.geometry, params.sharing_6d.scheme) != (ref.sharing_6d.geometry, ref.sharing_6d.scheme) \
            or (params.sharing_4d.geometry, params.sharing_4d.scheme) != (ref.sharing_4d.geometry, ref.sharing_4d.scheme):
        raise ValueError("checkpoint kernels do not match the configured geometry/scheme")
    return params


def cmd_synth(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    if cfg.n_pairs == 0:
        log.warning("n_pairs = 0: writing an empty dataset")
    scfg = cfg.synth()
    for n in range(cfg.n_pairs):
        io.save_pair(out / f"pair_{n:04d}", synth.make_synthetic_pair(cfg.seed * 1_000_003 + n, scfg))
    print(f"wrote {cfg.n_pairs} pairs to {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    pairs = io.load_dataset(args.data)
    if not pairs:
        raise ValueError(f"dataset {args.data} contains no pairs")
    mcfg = cfg.model()
    prepared = [M.prepare_pair(p, mcfg) for p in pairs]
    params = M.init_params(mcfg, cfg.seed)
    out = _out_dir(args)
    res = T.train(prepared, params, mcfg, cfg.iterations, cfg.batch_size, cfg.lr, cfg.seed,
                  callback=lambda it, loss: log.info("iter %d loss %.6f", it, loss))
    T.save_checkpoint(out / "checkpoint.txt", res.params)
    io.write_csv(out / "loss.csv", ["iter", "loss"], enumerate(res.losses))
    print(f"trained {cfg.iterations} iterations; checkpoint in {out / 'checkpoint.txt'}")
    return EXIT_OK


def _read_points(path) -> np.ndarray:
    rows = io.read_csv(path)
    if not rows or not {"x_px", "y_px"} <= set(rows[0]):
        raise ValueError(f"{path}: expected a CSV with columns id, x_px, y_px")
    return np.array([[float(r["x_px"]), float(r["y_px"])] for r in rows])


def cmd_match(args, cfg: RunConfig) -> int:
    mcfg = cfg.model()
    params = _load_params(args.checkpoint, mcfg)
    src, tgt = io.read_pgm(args.source), io.read_pgm(args.target)
    kps = _read_points(args.keypoints)
    prep = M.prepare(src, tgt, kps, mcfg)
    fw = M.forward(params, prep, mcfg)
    pred = M.predict_pixels(fw, prep)
    out = _out_dir(args)
    fl = fw.flow.value
    grid = flow_mod.regular_grid(*fl.shape[:2])
    io.write_csv(out / "flow.csv", ["i", "j", "x_src_norm", "y_src_norm", "x_dst_norm", "y_dst_norm"],
                 ([i, j, *grid[i, j], *fl[i, j]] for i, j in np.ndindex(fl.shape[:2])))
    io.write_csv(out / "keypoints.csv", ["id", "x_px", "y_px"],
                 ([n, x, y] for n, (x, y) in enumerate(pred)))
    counts, freq = ev.scale_histogram([fw.scale_args], mcfg.n_scales)
    io.write_csv(out / "scale_hist.csv", ["m", "n", "count", "freq"],
                 ([m, n, counts[m, n], freq[m, n]] for m, n in np.ndindex(counts.shape)))
    print(f"matched {len(kps)} keypoints; outputs in {out}")
    return EXIT_OK


def _pair_extent(pair: synth.TrainPair, mode: str) -> tuple[float, float]:
    if mode == "img":
        h, w = pair.target.shape
        return float(w), float(h)
    ys, xs = np.nonzero(pair.mask)
    if len(xs) == 0:
        return ev.bbox_extent(pair.kp_tgt)
    return max(float(xs.max() - xs.min() + 1), 1.0), max(float(ys.max() - ys.min() + 1), 1.0)


def cmd_eval_pck(args, cfg: RunConfig) -> int:
    mcfg = cfg.model()
    params = _load_params(args.checkpoint, mcfg)
    pairs = io.load_dataset(args.data)
    if not pairs:
        raise ValueError(f"dataset {args.data} contains no pairs")
    alphas = args.alpha or [cfg.alpha]
    results, scale_args = [], []
    for p in pairs:
        prep = M.prepare_pair(p, mcfg)
        fw = M.forward(params, prep, mcfg)
        results.append((M.predict_pixels(fw, prep), p.kp_tgt, _pair_extent(p, cfg.pck_mode)))
        scale_args.append(fw.scale_args)
    rows = [[a, cfg.pck_mode, ev.pck(results, ev.PckConfig(a, cfg.pck_mode))] for a in alphas]
    out = _out_dir(args)
    io.write_csv(out / "pck.csv", ["alpha", "mode", "pck"], rows)
    counts, freq = ev.scale_histogram(scale_args, mcfg.n_scales)
    io.write_csv(out / "scale_hist.csv", ["m", "n", "count", "freq"],
                 ([m, n, counts[m, n], freq[m, n]] for m, n in np.ndindex(counts.shape)))
    for r in rows:
        print(f"PCK@{r[0]:g} ({r[1]}): {r[2]:.4f}")
    return EXIT_OK


def cmd_eval_pr(args, cfg: RunConfig) -> int:
    mcfg = cfg.model()
    params = _load_params(args.checkpoint, mcfg)
    pairs = io.load_dataset(args.data)
    if not pairs:
        raise ValueError(f"dataset {args.data} contains no pairs")
    scored = []
    for p in pairs:
        prep = M.prepare_pair(p, mcfg)
        res = M.infer(params, prep, mcfg, args.head)
        h, w = p.target.shape
        scored.append((ev.scored_matches(res.corr, res.flow, (w, h), cfg.pr_grid, cfg.tau), p.mask))
    curve = ev.pr_curve(scored)
    out = _out_dir(args)
    io.write_csv(out / "pr.csv", ["k", "precision", "recall"], curve)
    print(f"{args.head}: precision at recall 0.5 = {ev.precision_at_recall(curve, 0.5):.4f}")
    return EXIT_OK


BENCH_METHODS = {"naive": convnd.conv_naive, "per_slice": convnd.conv_per_slice, "fast": convnd.conv_fast}


def bench_rows(rank: int, extent: int, k: int, methods, repeats: int, seed: int):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(extent,) * rank)
    kern = rng.normal(size=(k,) * rank)
    oracle = convnd.conv_naive(x, kern)
    rows = []
    for name in methods:
        fn = BENCH_METHODS[name]
        y = fn(x, kern)  # warm-up (JIT compile)
        best = math.inf
        for _ in range(repeats):
            counter = convnd.OpCounter()
            t0 = time.perf_counter()
            fn(x, kern, counter)
            best = min(best, time.perf_counter() - t0)
        rows.append([name, rank, "x".join([str(extent)] * rank), "x".join([str(k)] * rank),
                     counter.n_3d_conv_calls, counter.n_mul_adds, best * 1e3,
                     float(np.max(np.abs(y - oracle)))])
    return rows


def cmd_bench_conv(args, cfg: RunConfig) -> int:
    methods = args.methods.split(",")
    bad = [m for m in methods if m not in BENCH_METHODS]
    if bad:
        raise UsageError(f"unknown bench method(s) {bad}")
    if args.rank < 3:
        raise UsageError("bench-conv needs rank >= 3")
    if args.repeats < 1 or args.extent < 1 or args.k < 1 or args.k % 2 == 0:
        raise UsageError("bench-conv needs repeats, extent >= 1 and an odd kernel extent")
    rows = bench_rows(args.rank, args.extent, args.k, methods, args.repeats, cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_csv(out, ["method", "rank", "shape", "kernel", "3d_calls", "mul_adds", "wall_ms",
                       "max_abs_diff_vs_oracle"], rows)
    for r in rows:
        print(f"{r[0]:>9}: {r[4]} 3D calls, {r[6]:.3f} ms")
    return EXIT_OK


def cmd_dump_kernel(args, cfg: RunConfig) -> int:
    if args.checkpoint:
        params = _load_params(args.checkpoint, cfg.model())
        k = params.kernel(args.layer)
    else:
        rank = args.rank
        scale = args.scale if args.scale is not None else (3 if rank == 6 else 1)
        try:
            geom = KernelGeometry(args.spatial, scale, rank)
        except ValueError as e:
            raise UsageError(str(e)) from e
        k = init_kernel(build_sharing(geom, args.scheme), "delta")
    text = dump_kernel(k, args.format)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    print(f"{k.scheme} rank-{k.geometry.rank} kernel: {k.n_classes} classes -> {out}")
    return EXIT_OK


def cmd_selfcheck(args, cfg: RunConfig) -> int:
    from .selfcheck import run_checks

    results = run_checks(cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_csv(out, ["check", "status", "detail"],
                 ([name, "pass" if ok else "FAIL", detail] for name, ok, detail in results))
    for name, ok, detail in results:
        print(f"{'pass' if ok else 'FAIL'}  {name}: {detail}")
    failed = [r for r in results if not r[1]]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_SELFCHECK if failed else EXIT_OK


# --- parser ----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chmnet", description="Convolutional Hough matching on synthetic pairs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, out_default, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat 'key = value' file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default=out_default, help="output path")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.set_defaults(fn=fn)
        return p

    p = command("synth", cmd_synth, "data", "write a synthetic dataset")
    p.add_argument("--n", type=int, help="number of pairs (overrides n_pairs)")

    p = command("train", cmd_train, "run", "train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)

    p = command("match", cmd_match, "match", "transfer keypoints between two images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--keypoints", required=True, help="CSV with columns id, x_px, y_px (source pixels)")

    p = command("eval-pck", cmd_eval_pck, "eval", "PCK and scale histogram on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--alpha", type=float, action="append")

    p = command("eval-pr", cmd_eval_pr, "eval", "precision-recall of grid matches against masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--head", choices=("chm", "rhm"), default="chm")

    p = command("bench-conv", cmd_bench_conv, "bench.csv", "time and count 3D-conv calls")
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--extent", type=int, default=8)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--methods", default="naive,per_slice,fast")

    p = command("dump-kernel", cmd_dump_kernel, "kernel.txt", "write kernel classes or dense maps")
    p.add_argument("--scheme", choices=SCHEMES, default="psi")
    p.add_argument("--rank", type=int, choices=(4, 6), default=6)
    p.add_argument("--spatial", type=int, default=5)
    p.add_argument("--scale", type=int)
    p.add_argument("--format", choices=("classes", "dense_maps"), default="classes")
    p.add_argument("--checkpoint")
    p.add_argument("--layer", choices=("chm6", "chm4"), default="chm6")

    command("selfcheck", cmd_selfcheck, "selfcheck.csv", "run the invariant suite")
    return parser


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for flag, key in (("seed", "seed"), ("n", "n_pairs"), ("iterations", "iterations"), ("lr", "lr")):
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = str(v)
    return out


def _set_threads() -> None:
    value = os.environ.get(THREADS_ENV)
    if not value:
        return
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CHMNET_LOG", "WARNING"), format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        _set_threads()
        cfg = build_config(args.config, _overrides(args))
        return args.fn(args, cfg)
    except UsageError as e:
        print(f"chmnet: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except T.DivergenceError as e:
        print(f"chmnet: training diverged: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as e:
        print(f"chmnet: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""``gsa-bench``: latency sweeps and self-checks from the command line."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from threadpoolctl import threadpool_limits

from . import kernels
from .bench import MODES, run_benchmark, write_csv
from .errors import GsaError
from .kernels import KernelTiling
from .layout import TokenLayout
from .params import VARIANTS
from .verify import SUITES, run_verification
from .workload import PRECISIONS, load_config, parse_config


def _grid(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 16x16, got {text!r}") from None


def _frames(text: str):
    try:
        sizes = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"frames must be a comma separated list of integers, got {text!r}") from None
    if not sizes:
        raise argparse.ArgumentTypeError("frames list is empty")
    return sizes


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gsa-bench", description="Time dense vs GSA attention layers and run self-checks.")
    p.add_argument("--config", help="flat key = value workload file; flags override its values")
    p.add_argument("--mode", choices=MODES, default="gsa")
    p.add_argument("--frames", type=_frames, help="comma separated frame counts, e.g. 8,16,32")
    p.add_argument("--grid", type=_grid, help="patch grid per frame, HxW")
    p.add_argument("--window", type=int, help="window side s")
    p.add_argument("--topk", type=int)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--ref-stride", type=int)
    p.add_argument("--special", type=int, help="number of special tokens")
    p.add_argument("--heads", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--precision", choices=sorted(PRECISIONS))
    p.add_argument("--seed", type=int)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--threads", type=int, help="worker threads (default: $GSA_THREADS or 1)")
    p.add_argument("--block-m", type=int)
    p.add_argument("--block-n", type=int)
    p.add_argument("--csv", help="write rows here instead of stdout")
    p.add_argument("--verify", choices=SUITES, help="run a self-check suite instead of timing")
    p.add_argument("--backward", action="store_true", help="time forward + backward (dense and gsa modes)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _resolve(args):
    cfg, params = load_config(args.config) if args.config else parse_config("")
    lay = cfg.layout
    gh, gw = args.grid or (lay.grid_h, lay.grid_w)
    lay = TokenLayout(
        lay.num_special if args.special is None else args.special,
        lay.num_frames,
        gh,
        gw,
        args.window or lay.window_s,
    )
    cfg = replace(
        cfg,
        layout=lay,
        seed=cfg.seed if args.seed is None else args.seed,
        heads=args.heads or cfg.heads,
        dim=args.dim or cfg.dim,
        precision=args.precision or cfg.precision,
    )
    params = replace(
        params,
        window_s=lay.window_s,
        top_k=args.topk or params.top_k,
        variant=args.variant or params.variant,
        ref_stride=params.ref_stride if args.ref_stride is None else args.ref_stride,
        tiling=KernelTiling(args.block_m or params.tiling.block_m, args.block_n or params.tiling.block_n),
    )
    sizes = args.frames or [lay.num_frames]
    return cfg, params, sizes


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("GSA_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise GsaError(f"GSA_THREADS must be an integer, got {env!r}") from None
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        threads = _threads(args)
        if threads < 1:
            raise GsaError(f"thread count must be >= 1, got {threads}")
        kernels.set_num_threads(threads)
        with threadpool_limits(limits=threads):
            if args.verify:
                results = run_verification(args.verify, args.seed or 0)
                return 0 if all(r.passed for r in results) else 1
            cfg, params, sizes = _resolve(args)
            report = run_benchmark(cfg, params, args.mode, sizes, repeats=args.repeats, backward=args.backward)
    except GsaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            write_csv(report.rows, fh)
    else:
        write_csv(report.rows, sys.stdout)
    for mode, slope in report.fitted_exponents.items():
        print(f"# fitted exponent {mode}: {slope:.4f}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Latency sweeps of dense vs GSA layers and power-law fits of the results."""

from __future__ import annotations

import csv
import logging
import math
import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .compression import avg_pool_tokens, fused_compressed_attention_topk, upsample_nearest
from .errors import DegenerateInput, GsaError
from .gradients import dense_backward, gsa_backward
from .layer import dense_forward, gsa_forward, project_qkv
from .params import GsaParams
from .selection import block_sparse_attention, forced_exclusion_mask
from .workload import WorkloadConfig, derive_seed, generate_workload

log = logging.getLogger(__name__)

MODES = ("dense", "gsa", "compress-only", "select-only")
CSV_COLUMNS = (
    "mode", "frames", "image_tokens", "window_s", "top_k", "variant",
    "repeats", "median_s", "mean_s", "stddev_s",
)


@dataclass
class BenchRow:
    mode: str
    frames: int
    image_tokens: int
    window_s: int
    top_k: int
    variant: str
    repeats: int
    median_s: float
    mean_s: float
    stddev_s: float
    failed: bool = False

    def csv_values(self) -> list:
        head = [self.mode, self.frames, self.image_tokens, self.window_s, self.top_k, self.variant, self.repeats]
        if self.failed:
            return head + ["OOM", "OOM", "OOM"]
        return head + [f"{self.median_s:.9g}", f"{self.mean_s:.9g}", f"{self.stddev_s:.9g}"]


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    fitted_exponents: dict[str, float] = field(default_factory=dict)

    def points(self, mode: str) -> list[tuple[int, float]]:
        return [(r.image_tokens, r.median_s) for r in self.rows if r.mode == mode and not r.failed]


def fit_scaling_exponent(points) -> float:
    """Least-squares slope of log(seconds) against log(tokens)."""
    pts = [(float(n), float(t)) for n, t in points]
    if len(pts) < 3:
        raise DegenerateInput(f"need at least 3 points, got {len(pts)}")
    ns = [n for n, _ in pts]
    if any(n <= 0 or t <= 0 for n, t in pts):
        raise DegenerateInput("token counts and times must be positive")
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise DegenerateInput("token counts must be strictly increasing")
    slope, _ = np.polyfit(np.log(ns), np.log([t for _, t in pts]), 1)
    return float(slope)


def _workload_for(config: WorkloadConfig, frames: int) -> WorkloadConfig:
    layout = replace(config.layout, num_frames=frames)
    return replace(config, seed=derive_seed(config.seed, frames), layout=layout)


def _make_step(mode: str, cfg: WorkloadConfig, params: GsaParams, backward: bool):
    """Build the timed closure for one sweep point; setup work happens here, untimed."""
    layout = cfg.layout
    x, w = generate_workload(cfg)
    heads, dim = w.heads, w.dim
    scale = params.resolved_scale(dim)
    tiling = params.tiling
    d_out = np.ones((heads, layout.total_tokens, dim), dtype=x.dtype)

    if backward and mode not in ("dense", "gsa"):
        raise GsaError(f"backward timing is available for dense and gsa modes, not {mode}")
    if mode == "dense":
        if not backward:
            return lambda: dense_forward(x, w, scale, tiling)

        def step():
            out, q, k, v, lse = dense_forward(x, w, scale, tiling)
            dense_backward(x, w, q, k, v, out, lse, d_out, scale)

        return step
    if mode == "gsa":
        if not backward:
            return lambda: gsa_forward(x, layout, params, w)

        def step():
            _, ctx = gsa_forward(x, layout, params, w)
            gsa_backward(ctx, d_out)

        return step

    n_spec = layout.num_special
    q, k, v = (t[:, n_spec:] for t in project_qkv(x, w, heads, dim))
    exclude = forced_exclusion_mask(layout, params.ref_stride) if params.variant == "hybrid" else None
    if mode == "compress-only":

        def step():
            qc, kc, vc = (avg_pool_tokens(t, layout) for t in (q, k, v))
            out, _ = fused_compressed_attention_topk(qc, kc, vc, params.top_k, scale, tiling, exclude=exclude)
            upsample_nearest(out, layout)

        return step
    if mode == "select-only":
        _, ctx = gsa_forward(x, layout, params, w)
        plan = ctx.plan
        return lambda: block_sparse_attention(q, k, v, plan, layout, scale, tiling)
    raise GsaError(f"unknown mode {mode!r}; expected one of {MODES}")


def run_benchmark(
    config: WorkloadConfig,
    params: GsaParams,
    mode: str,
    sizes,
    repeats: int = 5,
    backward: bool = False,
    warmup: int = 1,
) -> BenchReport:
    """Time ``mode`` at every frame count in ``sizes``; fills one row per size."""
    if mode not in MODES:
        raise GsaError(f"unknown mode {mode!r}; expected one of {MODES}")
    if repeats < 3:
        raise GsaError(f"repeats must be >= 3, got {repeats}")
    if warmup < 1:
        raise GsaError("at least one warmup iteration is required")
    report = BenchReport()
    for frames in sizes:
        cfg = _workload_for(config, int(frames))
        lay = cfg.layout
        row = dict(
            mode=mode, frames=lay.num_frames, image_tokens=lay.image_tokens, window_s=lay.window_s,
            top_k=params.top_k, variant=params.variant, repeats=repeats,
        )
        try:
            step = _make_step(mode, cfg, params, backward)
            for _ in range(warmup):
                step()
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                step()
                times.append(time.perf_counter() - t0)
        except MemoryError:
            log.warning("out of memory at %s frames=%d", mode, lay.num_frames)
            report.rows.append(BenchRow(**row, median_s=math.nan, mean_s=math.nan, stddev_s=math.nan, failed=True))
            continue
        report.rows.append(
            BenchRow(
                **row,
                median_s=statistics.median(times),
                mean_s=statistics.fmean(times),
                stddev_s=statistics.stdev(times),
            )
        )
        log.info("%s frames=%d median=%.4fs", mode, lay.num_frames, report.rows[-1].median_s)
    pts = report.points(mode)
    if len(pts) >= 3:
        report.fitted_exponents[mode] = fit_scaling_exponent(pts)
    return report


def write_csv(rows, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow(r.csv_values())

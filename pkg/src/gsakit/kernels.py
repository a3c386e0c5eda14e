"""Tiled attention machinery shared by the dense, compressed and selection paths.

The kernels follow the flash-attention structure: query tiles are independent
and are evaluated together as one batched array (several tiles per group),
while key tiles are visited sequentially in ascending order with an online
softmax (running max ``m``, running denominator ``l``, rescaled accumulator).
"""

from __future__ import annotations

import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidTiling, NonFiniteInput

# Upper bound on score-tile elements materialised per query group.
GROUP_BUDGET = 1 << 21

_threads = max(1, int(os.environ.get("GSA_THREADS", "1") or 1))


def set_num_threads(n: int) -> None:
    """Set how many query groups the kernels may evaluate concurrently."""
    global _threads
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    _threads = int(n)


def get_num_threads() -> int:
    return _threads


def map_groups(fn, groups):
    """Apply ``fn`` to every group, in parallel when more than one thread is configured.

    Results come back in group order, so output is independent of thread count.
    """
    groups = list(groups)
    if _threads == 1 or len(groups) == 1:
        return [fn(g) for g in groups]
    with ThreadPoolExecutor(max_workers=_threads) as pool:
        return list(pool.map(fn, groups))


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class KernelTiling:
    block_m: int = 64
    block_n: int = 64

    def __post_init__(self):
        for name, b in (("block_m", self.block_m), ("block_n", self.block_n)):
            if not (_is_pow2(b) and 8 <= b <= 256):
                raise InvalidTiling(f"{name}={b} must be a power of two in [8, 256]")


@dataclass
class KernelCounters:
    """Debug counters: attended score entries per head, keyed by kernel name."""

    scores: dict = field(default_factory=lambda: defaultdict(lambda: None))

    def add(self, name: str, per_head) -> None:
        per_head = np.asarray(per_head, dtype=np.int64)
        prev = self.scores[name]
        self.scores[name] = per_head.copy() if prev is None else prev + per_head

    def get(self, name: str) -> np.ndarray:
        val = self.scores[name]
        if val is None:
            raise KeyError(name)
        return val


def require_finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteInput("input contains NaN or Inf")


def ranking_scores(q: np.ndarray, k: np.ndarray, scale: float) -> np.ndarray:
    """Scaled ``q @ k.T`` computed so every entry is bitwise independent of tile shape.

    BLAS matmul rounds differently depending on the block it sits in; einsum's
    plain loop does not. Scores that feed a discrete ranking must be reproducible
    across tilings, so they go through here.
    """
    return np.einsum("...qd,...kd->...qk", q, k) * scale


def _matmul_scores(q: np.ndarray, k: np.ndarray, scale: float) -> np.ndarray:
    return (q @ np.swapaxes(k, -1, -2)) * scale


def query_groups(rows: int, heads: int, block_m: int, width: int):
    """Split ``rows`` query rows into groups of whole ``block_m`` tiles under the memory budget."""
    per = max(1, GROUP_BUDGET // max(1, heads * width))
    size = max(block_m, per // block_m * block_m)
    return [slice(i, min(rows, i + size)) for i in range(0, rows, size)]


def keep_topk(scores: np.ndarray, index: np.ndarray, k: int):
    """Exact top-``k`` entries of each row, returned in their original positions' order.

    Rows must list entries in ascending global index. Everything strictly above
    the k-th largest value is kept; entries equal to it fill the remaining
    slots from the left, i.e. toward the lower index.
    """
    n = scores.shape[-1]
    if n <= k:
        return scores, index
    thr = np.partition(scores, n - k, axis=-1)[..., n - k : n - k + 1]
    above = scores > thr
    at = scores == thr
    take = above | (at & (np.cumsum(at, axis=-1) <= k - above.sum(axis=-1, keepdims=True)))
    flat = np.flatnonzero(take)
    shape = scores.shape[:-1] + (k,)
    return scores.reshape(-1)[flat].reshape(shape), index.reshape(-1)[flat].reshape(shape)


def sort_topk(scores: np.ndarray, index: np.ndarray):
    """Order ascending-index rows by score, descending; a stable sort keeps ties by index."""
    order = np.argsort(-scores, axis=-1, kind="stable")
    return np.take_along_axis(scores, order, axis=-1), np.take_along_axis(index, order, axis=-1)


def _attend_group(q, k, v, scale, block_n, top_k, exclude):
    heads, rows, dim = q.shape
    n = k.shape[1]
    dtype = q.dtype
    m = np.full((heads, rows), -np.inf, dtype=dtype)
    l = np.zeros((heads, rows), dtype=dtype)
    acc = np.zeros((heads, rows, v.shape[2]), dtype=dtype)
    run_s = np.empty((heads, rows, 0), dtype=dtype)
    run_i = np.empty((heads, rows, 0), dtype=np.int64)
    score = ranking_scores if top_k else _matmul_scores
    for j0 in range(0, n, block_n):
        kj = k[:, j0 : j0 + block_n]
        vj = v[:, j0 : j0 + block_n]
        s = score(q, kj, scale)
        m_new = np.maximum(m, s.max(axis=-1))
        alpha = np.exp(m - m_new)
        p = np.exp(s - m_new[..., None])
        l = alpha * l + p.sum(axis=-1)
        acc = alpha[..., None] * acc + p @ vj
        m = m_new
        if top_k:
            # running entries all precede this tile, so concatenation stays index-ascending
            if exclude is not None:
                s = np.where(exclude[j0 : j0 + block_n], -np.inf, s)
            tile_i = np.broadcast_to(np.arange(j0, j0 + s.shape[-1]), s.shape)
            run_s, run_i = keep_topk(
                np.concatenate([run_s, s], axis=-1), np.concatenate([run_i, tile_i], axis=-1), top_k
            )
    out = acc / l[..., None]
    lse = m + np.log(l)
    if top_k:
        run_s, run_i = sort_topk(run_s, run_i)
    return out, lse, run_s, run_i


def tiled_attention(q, k, v, scale, tiling: KernelTiling, top_k: int = 0, exclude=None):
    """Online-softmax attention of every query over every key.

    Returns ``(out, lse)``, or ``(out, lse, topk_scores, topk_indices)`` when
    ``top_k > 0``. ``exclude`` is a boolean mask over keys removed from the
    ranking (never from the softmax).
    """
    heads, rows, _ = q.shape
    if rows == 0:
        empty = (np.zeros((heads, 0, v.shape[2]), q.dtype), np.zeros((heads, 0), q.dtype))
        if top_k:
            return empty + (np.zeros((heads, 0, 0), q.dtype), np.zeros((heads, 0, 0), np.int64))
        return empty
    groups = query_groups(rows, heads, tiling.block_m, tiling.block_n)
    parts = map_groups(
        lambda g: _attend_group(q[:, g], k, v, scale, tiling.block_n, top_k, exclude), groups
    )
    out = np.concatenate([p[0] for p in parts], axis=1)
    lse = np.concatenate([p[1] for p in parts], axis=1)
    if not top_k:
        return out, lse
    return out, lse, np.concatenate([p[2] for p in parts], axis=1), np.concatenate([p[3] for p in parts], axis=1)

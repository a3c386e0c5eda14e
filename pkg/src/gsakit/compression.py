"""Compression branch: window pooling, fused compressed attention with streaming top-k, upsampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .kernels import KernelCounters, KernelTiling, require_finite, tiled_attention
from .layout import TokenLayout, check_attn, check_qkv


@dataclass
class TopkResult:
    """Selected key windows per head and query window, ``[heads, num_windows, k]``.

    Rows are ordered by descending guide score, ties by ascending index.
    ``guide_scores`` holds the matching scaled scores (``-inf`` for windows
    that were excluded from ranking).
    """

    indices: np.ndarray
    guide_scores: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.indices.shape[-1]


def avg_pool_tokens(x_img: np.ndarray, layout: TokenLayout) -> np.ndarray:
    """Mean of each s x s window, ``[H, image_tokens, d] -> [H, num_windows, d]``.

    Members are summed in row-major order, one at a time, so the result is
    bitwise reproducible by a scalar loop.
    """
    x_img = check_attn(x_img, "X_img", layout.image_tokens)
    tok = layout.window_token_index
    acc = x_img[:, tok[:, 0]]
    for j in range(1, layout.window_area):
        acc = acc + x_img[:, tok[:, j]]
    return np.ascontiguousarray(acc / x_img.dtype.type(layout.window_area))


def avg_pool_backward(d_pooled: np.ndarray, layout: TokenLayout) -> np.ndarray:
    """Adjoint of :func:`avg_pool_tokens`: every member receives its window's gradient / s^2."""
    return upsample_nearest(d_pooled, layout) / d_pooled.dtype.type(layout.window_area)


def upsample_nearest(coarse: np.ndarray, layout: TokenLayout) -> np.ndarray:
    """Copy each window's row to all of its member tokens."""
    coarse = check_attn(coarse, "O_comp_coarse", layout.num_windows)
    return coarse[:, layout.token_window_index]


def upsample_backward(d_fine: np.ndarray, layout: TokenLayout) -> np.ndarray:
    """Adjoint of :func:`upsample_nearest`: sum member gradients into their window."""
    d_fine = check_attn(d_fine, "dO_comp", layout.image_tokens)
    tok = layout.window_token_index
    acc = d_fine[:, tok[:, 0]]
    for j in range(1, layout.window_area):
        acc = acc + d_fine[:, tok[:, j]]
    return np.ascontiguousarray(acc)


def fused_compressed_attention_topk(
    qc: np.ndarray,
    kc: np.ndarray,
    vc: np.ndarray,
    k: int,
    scale: float,
    tiling: KernelTiling,
    exclude: np.ndarray | None = None,
    counters: KernelCounters | None = None,
    return_lse: bool = False,
):
    """Compressed attention and per-row top-k windows in a single tiled pass.

    ``k`` is clamped to the number of windows. ``exclude`` (boolean, one entry
    per key window) removes windows from the ranking while keeping them in the
    softmax; the hybrid selection uses it to keep forced frames out of the
    dynamic set.
    """
    qc, kc, vc = check_attn(qc, "Qc"), check_attn(kc, "Kc"), check_attn(vc, "Vc")
    check_qkv(qc, kc, vc)
    if qc.shape[1] != kc.shape[1]:
        raise ShapeMismatch(f"{qc.shape[1]} query windows but {kc.shape[1]} key windows")
    if k < 1:
        raise ShapeMismatch(f"top-k count must be >= 1, got {k}")
    if exclude is not None:
        exclude = np.asarray(exclude, dtype=bool)
        if exclude.shape != (kc.shape[1],):
            raise ShapeMismatch(f"exclude mask shape {exclude.shape} != ({kc.shape[1]},)")
    require_finite(qc, kc, vc)
    k = min(k, kc.shape[1])
    out, lse, top_s, top_i = tiled_attention(qc, kc, vc, scale, tiling, top_k=k, exclude=exclude)
    if counters is not None:
        counters.add("compress", np.full(qc.shape[0], qc.shape[1] * kc.shape[1]))
    result = TopkResult(indices=top_i, guide_scores=top_s)
    if return_lse:
        return out, result, lse
    return out, result

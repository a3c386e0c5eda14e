"""Selection branch: per-window selection plans and block-sparse attention over them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compression import TopkResult
from .errors import EmptySelection, GsaError, InvalidStride, ShapeMismatch
from .kernels import GROUP_BUDGET, KernelCounters, KernelTiling, map_groups, require_finite
from .layout import TokenLayout, check_attn, check_qkv


@dataclass
class SelectionPlan:
    """Key windows attended by each query window.

    ``indices`` is ``[heads, num_windows, L]``; rows shorter than ``L`` are
    padded with -1 at the end.
    """

    indices: np.ndarray
    forced_windows: np.ndarray

    def row(self, head: int, window: int) -> list[int]:
        r = self.indices[head, window]
        return [int(x) for x in r[r >= 0]]

    @property
    def row_lengths(self) -> np.ndarray:
        return (self.indices >= 0).sum(axis=-1)


def forced_window_set(layout: TokenLayout, ref_stride: int) -> np.ndarray:
    """All windows of frames 0, ref_stride, 2*ref_stride, ... (ascending)."""
    if ref_stride < 1:
        raise InvalidStride(f"ref_stride must be >= 1, got {ref_stride}")
    frames = range(0, layout.num_frames, ref_stride)
    return np.concatenate([layout.frame_windows(f) for f in frames])


def forced_exclusion_mask(layout: TokenLayout, ref_stride: int) -> np.ndarray:
    mask = np.zeros(layout.num_windows, dtype=bool)
    mask[forced_window_set(layout, ref_stride)] = True
    return mask


def build_selection_plan(topk: TopkResult, layout: TokenLayout, variant: str = "plain", ref_stride: int = 100) -> SelectionPlan:
    """Turn top-k rows into a selection plan.

    ``plain`` keeps the rows as they are. ``hybrid`` prepends every window of
    the forced frames and drops dynamic entries already covered by them.
    """
    idx = np.asarray(topk.indices, dtype=np.int64)
    if idx.ndim != 3 or idx.shape[1] != layout.num_windows:
        raise ShapeMismatch(f"top-k indices shape {idx.shape} does not match {layout.num_windows} windows")
    if variant == "plain":
        return SelectionPlan(indices=idx.copy(), forced_windows=np.empty(0, dtype=np.int64))
    if variant != "hybrid":
        raise GsaError(f"unknown selection variant {variant!r}")
    forced = forced_window_set(layout, ref_stride)
    keep = ~np.isin(idx, forced)
    # stable move of kept entries to the front of each row
    order = np.argsort(~keep, axis=-1, kind="stable")
    dyn = np.take_along_axis(idx, order, axis=-1)
    dyn = np.where(np.take_along_axis(keep, order, axis=-1), dyn, -1)
    width = int(keep.sum(axis=-1).max(initial=0))
    heads, nw = idx.shape[:2]
    head = np.broadcast_to(forced, (heads, nw, forced.size))
    return SelectionPlan(indices=np.concatenate([head, dyn[..., :width]], axis=-1), forced_windows=forced)


def _sparse_group(qw, kw, vw, plan, scale, chunk):
    heads, nwin, area, dim = qw.shape
    dtype = qw.dtype
    m = np.full((heads, nwin, area), -np.inf, dtype=dtype)
    l = np.zeros((heads, nwin, area), dtype=dtype)
    acc = np.zeros((heads, nwin, area, dim), dtype=dtype)
    h_ix = np.arange(heads)[:, None, None]
    for j0 in range(0, plan.shape[-1], chunk):
        sel = plan[:, :, j0 : j0 + chunk]
        valid = sel >= 0
        c = sel.shape[-1]
        kg = kw[h_ix, np.where(valid, sel, 0)].reshape(heads, nwin, c * area, dim)
        vg = vw[h_ix, np.where(valid, sel, 0)].reshape(heads, nwin, c * area, dim)
        s = (qw @ np.swapaxes(kg, -1, -2)) * scale
        if not valid.all():
            key_ok = np.repeat(valid, area, axis=-1)[:, :, None, :]
            s = np.where(key_ok, s, -np.inf)
        m_new = np.maximum(m, s.max(axis=-1))
        m_safe = np.where(np.isneginf(m_new), 0, m_new)
        alpha = np.exp(m - m_safe)
        p = np.exp(s - m_safe[..., None])
        l = alpha * l + p.sum(axis=-1)
        acc = alpha[..., None] * acc + p @ vg
        m = m_new
    return acc / l[..., None], m + np.log(l)


def block_sparse_attention(
    q_img: np.ndarray,
    k_img: np.ndarray,
    v_img: np.ndarray,
    plan: SelectionPlan,
    layout: TokenLayout,
    scale: float,
    tiling: KernelTiling,
    counters: KernelCounters | None = None,
):
    """Each query attends the fine tokens of its window's selected key windows.

    Plan entries are visited in row order, ``max(1, block_n // s^2)`` windows per
    step, with an online softmax. Returns ``(out, lse)`` in image-token order,
    where ``lse[h, i] = m_i + log(l_i)``.
    """
    n_img = layout.image_tokens
    q_img, k_img, v_img = (check_attn(x, name, n_img) for x, name in ((q_img, "Q_img"), (k_img, "K_img"), (v_img, "V_img")))
    check_qkv(q_img, k_img, v_img)
    idx = np.asarray(plan.indices, dtype=np.int64)
    heads = q_img.shape[0]
    if idx.ndim != 3 or idx.shape[:2] != (heads, layout.num_windows):
        raise ShapeMismatch(f"plan shape {idx.shape} does not match ({heads}, {layout.num_windows}, L)")
    if idx.size and idx.max() >= layout.num_windows:
        raise ShapeMismatch("plan references a window outside the layout")
    lengths = (idx >= 0).sum(axis=-1)
    if lengths.size and lengths.min() == 0:
        raise EmptySelection("a plan row selects no key windows")
    require_finite(q_img, k_img, v_img)

    tok = layout.window_token_index
    area = layout.window_area
    qw, kw, vw = (np.ascontiguousarray(t[:, tok]) for t in (q_img, k_img, v_img))
    chunk = max(1, tiling.block_n // area)
    width = chunk * area
    win_per_group = max(1, GROUP_BUDGET // (heads * area * width))
    groups = [slice(i, i + win_per_group) for i in range(0, layout.num_windows, win_per_group)]
    parts = map_groups(lambda g: _sparse_group(qw[:, g], kw, vw, idx[:, g], scale, chunk), groups)
    out_w = np.concatenate([p[0] for p in parts], axis=1)
    lse_w = np.concatenate([p[1] for p in parts], axis=1)

    out = np.empty_like(q_img)
    out[:, tok.reshape(-1)] = out_w.reshape(heads, n_img, -1)
    lse = np.empty((heads, n_img), dtype=q_img.dtype)
    lse[:, tok.reshape(-1)] = lse_w.reshape(heads, n_img)
    if counters is not None:
        counters.add("select", lengths.sum(axis=-1) * area * area)
    return out, lse

"""Brute-force reference implementations.

Nothing here is tiled, streamed or fused. These functions exist to be obviously
correct and are the ground truth for every equivalence test.
"""

from __future__ import annotations

import numpy as np

from .errors import GsaError, ShapeMismatch
from .kernels import ranking_scores, require_finite
from .layout import TokenLayout, check_attn, check_qkv
from .params import GsaParams


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over the last axis. Rows that are entirely -inf are not allowed."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def full_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float) -> np.ndarray:
    q, k, v = check_attn(q, "Q"), check_attn(k, "K"), check_attn(v, "V")
    check_qkv(q, k, v)
    if not scale > 0:
        raise GsaError(f"scale must be > 0, got {scale}")
    require_finite(q, k, v)
    if k.shape[1] == 0:
        raise ShapeMismatch("attention over zero keys")
    p = softmax(ranking_scores(q, k, scale))
    return np.einsum("hqk,hkd->hqd", p, v)


def masked_attention(q, k, v, scale: float, allowed: np.ndarray):
    """Dense attention where disallowed keys get an additive -inf.

    ``allowed`` is a boolean ``[heads, queries, keys]`` mask. Returns
    ``(out, denominators)`` where ``denominators`` is the plain (unshifted)
    softmax normaliser sum_j exp(score_ij) over allowed keys.
    """
    s = ranking_scores(q, k, scale)
    s = np.where(allowed, s, -np.inf)
    p = softmax(s)
    with np.errstate(over="ignore"):
        denom = np.where(allowed, np.exp(s.astype(np.float64)), 0.0).sum(axis=-1)
    return np.einsum("hqk,hkd->hqd", p, v), denom


def naive_topk(scores, k: int) -> list[int]:
    """Indices of the ``k`` largest scores, descending, ties broken toward the lower index."""
    scores = [float(x) for x in scores]
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[: max(0, k)]


def loop_avg_pool(x: np.ndarray, layout: TokenLayout) -> np.ndarray:
    out = np.zeros((x.shape[0], layout.num_windows, x.shape[2]), dtype=x.dtype)
    for w in range(layout.num_windows):
        acc = np.zeros((x.shape[0], x.shape[2]), dtype=x.dtype)
        for t in layout.window_token_index[w]:
            acc = acc + x[:, t]
        out[:, w] = acc / layout.window_area
    return out


def loop_upsample(coarse: np.ndarray, layout: TokenLayout) -> np.ndarray:
    out = np.zeros((coarse.shape[0], layout.image_tokens, coarse.shape[2]), dtype=coarse.dtype)
    for w in range(layout.num_windows):
        for t in layout.window_token_index[w]:
            out[:, t] = coarse[:, w]
    return out


def forced_frames(num_frames: int, ref_stride: int) -> list[int]:
    return [f for f in range(num_frames) if f % ref_stride == 0]


def reference_selected_windows(qc, kc, layout: TokenLayout, params: GsaParams, scale: float):
    """Per head, per query window: the set of selected key windows (forced plus dynamic)."""
    heads, nw = qc.shape[0], layout.num_windows
    guide = ranking_scores(qc, kc, scale)
    forced: list[int] = []
    if params.variant == "hybrid":
        for f in forced_frames(layout.num_frames, params.ref_stride):
            forced.extend(range(f * layout.windows_per_frame, (f + 1) * layout.windows_per_frame))
        guide = guide.copy()
        guide[:, :, forced] = -np.inf
    k = min(params.top_k, nw)
    return [[set(forced) | set(naive_topk(guide[h, w], k)) for w in range(nw)] for h in range(heads)]


def reference_gsa(q, k, v, layout: TokenLayout, params: GsaParams, gate_weights: np.ndarray) -> np.ndarray:
    """Naive composition of the whole GSA layer on already-projected Q/K/V.

    ``gate_weights`` is ``[heads, dim, dim]``; the gate for head h is
    sigmoid(Q_img[h] @ gate_weights[h]).
    """
    for name, x in (("Q", q), ("K", k), ("V", v)):
        check_attn(x, name, layout.total_tokens)
    check_qkv(q, k, v)
    heads, _, dim = q.shape
    scale = params.resolved_scale(dim)
    n_spec = layout.num_special
    q_img, k_img, v_img = q[:, n_spec:], k[:, n_spec:], v[:, n_spec:]

    o_spec = full_attention(q[:, :n_spec], k, v, scale) if n_spec else q[:, :0].copy()

    qc = loop_avg_pool(q_img, layout)
    kc = loop_avg_pool(k_img, layout)
    vc = loop_avg_pool(v_img, layout)
    o_comp = loop_upsample(full_attention(qc, kc, vc, scale), layout)

    selected = reference_selected_windows(qc, kc, layout, params, scale)
    n_img = layout.image_tokens
    allowed = np.zeros((heads, n_img, n_img), dtype=bool)
    for h in range(heads):
        for i in range(n_img):
            w = int(layout.token_window_index[i])
            for sw in selected[h][w]:
                allowed[h, i, layout.window_token_index[sw]] = True
    o_sel, _ = masked_attention(q_img, k_img, v_img, scale, allowed)

    g = 1.0 / (1.0 + np.exp(-np.einsum("hnd,hde->hne", q_img, gate_weights)))
    o_img = g * o_comp + (1 - g) * o_sel
    return np.concatenate([o_spec, o_img.astype(q.dtype)], axis=1)


def write_golden(path, **arrays: np.ndarray) -> None:
    """Store named arrays in a self-describing ``.npz`` file (shape and dtype in each header)."""
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_golden(path) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as data:
        return {name: data[name] for name in data.files}

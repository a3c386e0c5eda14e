"""The GSA layer: projection, dense special-token path, both sparse branches and gated fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .compression import TopkResult, avg_pool_tokens, fused_compressed_attention_topk, upsample_nearest
from .errors import ShapeMismatch
from .kernels import KernelCounters, KernelTiling, require_finite, tiled_attention
from .layout import TokenLayout, check_attn, check_qkv
from .params import GsaParams
from .selection import SelectionPlan, block_sparse_attention, build_selection_plan, forced_exclusion_mask


@dataclass
class LayerWeights:
    """Projection weights.

    ``w_q``, ``w_k``, ``w_v`` are ``[model_dim, heads * dim]`` (head-major
    columns); ``w_g`` is ``[heads, dim, dim]`` and acts on per-head image queries.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_g: np.ndarray

    @property
    def heads(self) -> int:
        return self.w_g.shape[0]

    @property
    def dim(self) -> int:
        return self.w_g.shape[1]

    @property
    def model_dim(self) -> int:
        return self.w_q.shape[0]

    def validate(self) -> None:
        h, d = self.heads, self.dim
        if self.w_g.shape != (h, d, d):
            raise ShapeMismatch(f"w_g must be [heads, dim, dim], got {self.w_g.shape}")
        for name in ("w_q", "w_k", "w_v"):
            w = getattr(self, name)
            if w.ndim != 2 or w.shape != (self.model_dim, h * d):
                raise ShapeMismatch(f"{name} must be [{self.model_dim}, {h * d}], got {w.shape}")
        require_finite(self.w_q, self.w_k, self.w_v, self.w_g)


@dataclass
class ForwardContext:
    """Everything backward needs; probabilities are recomputed from the saved LSE rows."""

    x: np.ndarray
    weights: LayerWeights
    layout: TokenLayout
    params: GsaParams
    scale: float
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    o_spec: np.ndarray
    lse_spec: np.ndarray
    qc: np.ndarray
    kc: np.ndarray
    vc: np.ndarray
    o_comp_coarse: np.ndarray
    lse_comp: np.ndarray
    topk: TopkResult
    plan: SelectionPlan
    o_sel: np.ndarray
    lse_sel: np.ndarray
    gate: np.ndarray
    output: np.ndarray

    @property
    def o_comp(self) -> np.ndarray:
        return upsample_nearest(self.o_comp_coarse, self.layout)


def _split_heads(x: np.ndarray, heads: int, dim: int) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(x.shape[0], heads, dim).transpose(1, 0, 2))


def project_qkv(x: np.ndarray, weights: LayerWeights, heads: int, dim: int):
    """Per-head projections ``Q[h] = X @ W_Q[:, h*dim:(h+1)*dim]`` (likewise K, V)."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != weights.w_q.shape[0]:
        raise ShapeMismatch(f"X must be [tokens, {weights.w_q.shape[0]}], got {x.shape}")
    for w in (weights.w_q, weights.w_k, weights.w_v):
        if w.shape[1] != heads * dim:
            raise ShapeMismatch(f"projection width {w.shape[1]} != heads*dim = {heads * dim}")
    require_finite(x)
    return tuple(_split_heads(x @ w, heads, dim) for w in (weights.w_q, weights.w_k, weights.w_v))


def special_token_attention(q_spec, k, v, scale: float, tiling: KernelTiling | None = None, return_lse: bool = False):
    """Dense attention of the special-token queries over every token."""
    q_spec, k, v = check_attn(q_spec, "Q_spec"), check_attn(k, "K"), check_attn(v, "V")
    check_qkv(q_spec, k, v)
    out, lse = tiled_attention(q_spec, k, v, scale, tiling or KernelTiling())
    return (out, lse) if return_lse else out


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gate(q_img: np.ndarray, w_g: np.ndarray) -> np.ndarray:
    """``sigmoid(Q_img[h] @ w_g[h])`` for every head."""
    q_img = check_attn(q_img, "Q_img")
    if w_g.shape != (q_img.shape[0], q_img.shape[2], q_img.shape[2]):
        raise ShapeMismatch(f"gate weights {w_g.shape} do not fit Q_img {q_img.shape}")
    return sigmoid(q_img @ w_g.astype(q_img.dtype, copy=False))


def gsa_forward(
    x: np.ndarray,
    layout: TokenLayout,
    params: GsaParams,
    weights: LayerWeights,
    plan: SelectionPlan | None = None,
    counters: KernelCounters | None = None,
):
    """Full GSA layer. Returns ``(O_GSA [heads, tokens, dim], ForwardContext)``.

    Passing ``plan`` pins the selection (the top-k is still computed but not
    used), which makes the layer a smooth function of its inputs.
    """
    if params.window_s != layout.window_s:
        raise ShapeMismatch(f"params.window_s={params.window_s} but layout.window_s={layout.window_s}")
    weights.validate()
    x = np.asarray(x)
    if x.shape[0] != layout.total_tokens:
        raise ShapeMismatch(f"X has {x.shape[0]} rows, layout expects {layout.total_tokens}")
    heads, dim = weights.heads, weights.dim
    scale = params.resolved_scale(dim)
    tiling = params.tiling
    q, k, v = project_qkv(x, weights, heads, dim)
    n_spec = layout.num_special

    if n_spec:
        o_spec, lse_spec = special_token_attention(q[:, :n_spec], k, v, scale, tiling, return_lse=True)
    else:
        o_spec, lse_spec = q[:, :0].copy(), np.zeros((heads, 0), dtype=q.dtype)

    q_img, k_img, v_img = q[:, n_spec:], k[:, n_spec:], v[:, n_spec:]
    qc, kc, vc = (avg_pool_tokens(t, layout) for t in (q_img, k_img, v_img))
    exclude = forced_exclusion_mask(layout, params.ref_stride) if params.variant == "hybrid" else None
    oc_coarse, topk, lse_comp = fused_compressed_attention_topk(
        qc, kc, vc, params.top_k, scale, tiling, exclude=exclude, counters=counters, return_lse=True
    )
    o_comp = upsample_nearest(oc_coarse, layout)

    if plan is None:
        plan = build_selection_plan(topk, layout, params.variant, params.ref_stride)
    o_sel, lse_sel = block_sparse_attention(q_img, k_img, v_img, plan, layout, scale, tiling, counters=counters)

    g = gate(q_img, weights.w_g)
    o_img = g * o_comp + (1 - g) * o_sel
    out = np.concatenate([o_spec, o_img], axis=1)
    ctx = ForwardContext(
        x=x, weights=weights, layout=layout, params=params, scale=scale,
        q=q, k=k, v=v, o_spec=o_spec, lse_spec=lse_spec,
        qc=qc, kc=kc, vc=vc, o_comp_coarse=oc_coarse, lse_comp=lse_comp,
        topk=topk, plan=plan, o_sel=o_sel, lse_sel=lse_sel, gate=g, output=out,
    )
    return out, ctx


def dense_forward(x: np.ndarray, weights: LayerWeights, scale: float | None = None, tiling: KernelTiling | None = None):
    """Dense global attention baseline: every token attends every token.

    Returns ``(out, q, k, v, lse)`` so a backward pass can reuse them.
    """
    weights.validate()
    heads, dim = weights.heads, weights.dim
    scale = 1.0 / math.sqrt(dim) if scale is None else float(scale)
    q, k, v = project_qkv(x, weights, heads, dim)
    out, lse = tiled_attention(q, k, v, scale, tiling or KernelTiling())
    return out, q, k, v, lse

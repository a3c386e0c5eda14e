"""Manual backward pass of the GSA layer and a central finite-difference checker.

The discrete selection (top-k indices and the resulting plan) is treated as a
constant: no gradient flows through the ranking.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from .compression import avg_pool_backward, upsample_backward
from .errors import ContextMismatch, NonDeterministicForward
from .kernels import GROUP_BUDGET, map_groups
from .layer import ForwardContext


class Gradients(NamedTuple):
    dx: np.ndarray
    dw_q: np.ndarray
    dw_k: np.ndarray
    dw_v: np.ndarray
    dw_g: np.ndarray


def attention_backward(q, k, v, o, lse, do, scale: float):
    """Backward of dense softmax attention, recomputing probabilities from ``lse``.

    Query rows are processed in groups so the probability block stays bounded.
    """
    heads, rows, _ = q.shape
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    if rows == 0:
        return dq, dk, dv
    delta = (do * o).sum(axis=-1)
    step = max(1, GROUP_BUDGET // max(1, heads * k.shape[1]))
    for i in range(0, rows, step):
        g = slice(i, i + step)
        p = np.exp((q[:, g] @ np.swapaxes(k, -1, -2)) * scale - lse[:, g, None])
        dv += np.swapaxes(p, -1, -2) @ do[:, g]
        ds = p * (do[:, g] @ np.swapaxes(v, -1, -2) - delta[:, g, None])
        dq[:, g] = (ds @ k) * scale
        dk += (np.swapaxes(ds, -1, -2) @ q[:, g]) * scale
    return dq, dk, dv


def _sparse_backward_group(qw, kw, vw, ow, lse_w, dow, plan, scale, chunk, nwin_total):
    heads, nwin, area, dim = qw.shape
    dqw = np.zeros_like(qw)
    dkw = np.zeros((heads, nwin_total, area, dim), dtype=qw.dtype)
    dvw = np.zeros_like(dkw)
    delta = (dow * ow).sum(axis=-1)
    h_ix = np.arange(heads)[:, None, None]
    for j0 in range(0, plan.shape[-1], chunk):
        sel = plan[:, :, j0 : j0 + chunk]
        valid = sel >= 0
        c = sel.shape[-1]
        safe = np.where(valid, sel, 0)
        kg = kw[h_ix, safe].reshape(heads, nwin, c * area, dim)
        vg = vw[h_ix, safe].reshape(heads, nwin, c * area, dim)
        p = np.exp((qw @ np.swapaxes(kg, -1, -2)) * scale - lse_w[..., None])
        if not valid.all():
            p = p * np.repeat(valid, area, axis=-1)[:, :, None, :]
        dvg = np.swapaxes(p, -1, -2) @ dow
        ds = p * (dow @ np.swapaxes(vg, -1, -2) - delta[..., None])
        dqw += (ds @ kg) * scale
        dkg = (np.swapaxes(ds, -1, -2) @ qw) * scale
        np.add.at(dkw, (h_ix, safe), dkg.reshape(heads, nwin, c, area, dim))
        np.add.at(dvw, (h_ix, safe), dvg.reshape(heads, nwin, c, area, dim))
    return dqw, dkw, dvw


def block_sparse_backward(q_img, k_img, v_img, o_sel, lse_sel, do_sel, plan, layout, scale, tiling):
    """Backward of :func:`gsakit.selection.block_sparse_attention` for a fixed plan."""
    tok = layout.window_token_index
    area = layout.window_area
    heads, n_img, dim = q_img.shape
    idx = np.asarray(plan.indices, dtype=np.int64)
    qw, kw, vw, ow, dow = (np.ascontiguousarray(t[:, tok]) for t in (q_img, k_img, v_img, o_sel, do_sel))
    lse_w = lse_sel[:, tok]
    chunk = max(1, tiling.block_n // area)
    per = max(1, GROUP_BUDGET // (heads * area * chunk * area))
    groups = [slice(i, i + per) for i in range(0, layout.num_windows, per)]
    parts = map_groups(
        lambda g: _sparse_backward_group(
            qw[:, g], kw, vw, ow[:, g], lse_w[:, g], dow[:, g], idx[:, g], scale, chunk, layout.num_windows
        ),
        groups,
    )
    dqw = np.concatenate([p[0] for p in parts], axis=1)
    dkw = sum(p[1] for p in parts)
    dvw = sum(p[2] for p in parts)
    flat = tok.reshape(-1)
    out = []
    for w in (dqw, dkw, dvw):
        t = np.empty((heads, n_img, dim), dtype=q_img.dtype)
        t[:, flat] = w.reshape(heads, n_img, dim)
        out.append(t)
    return tuple(out)


def gate_backward(q_img, w_g, g, o_comp, o_sel, do_img):
    """Gradients of ``g*o_comp + (1-g)*o_sel`` with ``g = sigmoid(q_img @ w_g)``.

    Returns ``(d_o_comp, d_o_sel, d_q_img, d_w_g)``.
    """
    dz = (o_comp - o_sel) * do_img * g * (1 - g)
    d_wg = np.swapaxes(q_img, -1, -2) @ dz
    d_q = dz @ np.swapaxes(w_g, -1, -2)
    return g * do_img, (1 - g) * do_img, d_q, d_wg


def _merge_heads(t: np.ndarray) -> np.ndarray:
    return t.transpose(1, 0, 2).reshape(t.shape[1], -1)


def gsa_backward(saved: ForwardContext, d_out: np.ndarray) -> Gradients:
    """Gradients of the GSA layer w.r.t. X and all four weight tensors."""
    d_out = np.asarray(d_out)
    if d_out.shape != saved.output.shape:
        raise ContextMismatch(f"dO shape {d_out.shape} != forward output shape {saved.output.shape}")
    layout, scale, tiling = saved.layout, saved.scale, saved.params.tiling
    w = saved.weights
    n_spec = layout.num_special
    q, k, v = saved.q, saved.k, saved.v
    q_img, k_img, v_img = q[:, n_spec:], k[:, n_spec:], v[:, n_spec:]
    do_img = d_out[:, n_spec:]

    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)

    if n_spec:
        dqs, dks, dvs = attention_backward(q[:, :n_spec], k, v, saved.o_spec, saved.lse_spec, d_out[:, :n_spec], scale)
        dq[:, :n_spec] = dqs
        dk += dks
        dv += dvs

    d_oc, d_os, dq_gate, dw_g = gate_backward(q_img, w.w_g, saved.gate, saved.o_comp, saved.o_sel, do_img)

    dqi, dki, dvi = block_sparse_backward(
        q_img, k_img, v_img, saved.o_sel, saved.lse_sel, d_os, saved.plan, layout, scale, tiling
    )
    d_coarse = upsample_backward(d_oc, layout)
    dqc, dkc, dvc = attention_backward(saved.qc, saved.kc, saved.vc, saved.o_comp_coarse, saved.lse_comp, d_coarse, scale)
    dq[:, n_spec:] += dqi + dq_gate + avg_pool_backward(dqc, layout)
    dk[:, n_spec:] += dki + avg_pool_backward(dkc, layout)
    dv[:, n_spec:] += dvi + avg_pool_backward(dvc, layout)

    x = saved.x
    dq_f, dk_f, dv_f = (_merge_heads(t) for t in (dq, dk, dv))
    dx = dq_f @ w.w_q.T + dk_f @ w.w_k.T + dv_f @ w.w_v.T
    return Gradients(dx=dx, dw_q=x.T @ dq_f, dw_k=x.T @ dk_f, dw_v=x.T @ dv_f, dw_g=dw_g)


def finite_difference_check(
    forward: Callable[[np.ndarray], float],
    point: np.ndarray,
    analytic: np.ndarray,
    epsilon: float = 1e-5,
) -> float:
    """Worst per-entry relative error between ``analytic`` and central differences of ``forward``.

    The denominator is ``max(|analytic|, |numeric|, 1e-12)``.
    """
    point = np.array(point, dtype=np.float64).ravel()
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.shape != point.shape:
        raise ContextMismatch(f"gradient has {analytic.size} entries, point has {point.size}")
    base = forward(point.copy())
    if forward(point.copy()) != base:
        raise NonDeterministicForward("two evaluations at the same point disagree")
    numeric = np.empty_like(point)
    for i in range(point.size):
        xp = point.copy()
        xp[i] += epsilon
        xm = point.copy()
        xm[i] -= epsilon
        numeric[i] = (forward(xp) - forward(xm)) / (2 * epsilon)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom)) if point.size else 0.0


def dense_backward(x, weights, q, k, v, out, lse, d_out, scale: float) -> Gradients:
    """Backward of :func:`gsakit.layer.dense_forward`; ``dw_g`` is returned as zeros."""
    dq, dk, dv = attention_backward(q, k, v, out, lse, d_out, scale)
    dq_f, dk_f, dv_f = (_merge_heads(t) for t in (dq, dk, dv))
    dx = dq_f @ weights.w_q.T + dk_f @ weights.w_k.T + dv_f @ weights.w_v.T
    return Gradients(dx=dx, dw_q=x.T @ dq_f, dw_k=x.T @ dk_f, dw_v=x.T @ dv_f, dw_g=np.zeros_like(weights.w_g))

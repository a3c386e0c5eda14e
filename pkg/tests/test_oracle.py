import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsakit.errors import NonFiniteInput, ShapeMismatch
from gsakit.layer import project_qkv
from gsakit.layout import TokenLayout
from gsakit.oracle import (
    full_attention,
    loop_avg_pool,
    masked_attention,
    naive_topk,
    read_golden,
    reference_gsa,
    softmax,
    write_golden,
)
from gsakit.params import GsaParams

from conftest import make_case


def triple_loop_attention(q, k, v, scale):
    """Scalar Python attention, independent of numpy vector ops."""
    heads, nq, d = q.shape
    out = np.zeros_like(q)
    for h in range(heads):
        for i in range(nq):
            s = [scale * sum(q[h, i, c] * k[h, j, c] for c in range(d)) for j in range(k.shape[1])]
            m = max(s)
            e = [math.exp(x - m) for x in s]
            z = sum(e)
            for c in range(d):
                out[h, i, c] = sum(e[j] * v[h, j, c] for j in range(len(e))) / z
    return out


def test_single_key_returns_value_row(rng):
    q, k, v = (rng.standard_normal((1, 1, 4)) for _ in range(3))
    assert np.array_equal(full_attention(q, k, v, 0.5), v)


def test_two_tied_keys_average(rng):
    q = rng.standard_normal((1, 1, 4))
    k = np.repeat(rng.standard_normal((1, 1, 4)), 2, axis=1)
    v = rng.standard_normal((1, 2, 4))
    np.testing.assert_allclose(full_attention(q, k, v, 0.5), v.mean(axis=1, keepdims=True), atol=1e-15)


def test_full_attention_vs_triple_loop(rng):
    q, k, v = (rng.standard_normal((2, 8, 4)) for _ in range(3))
    got = full_attention(q, k, v, 0.5)
    assert np.abs(got - triple_loop_attention(q, k, v, 0.5)).max() <= 1e-12


def test_full_attention_rejects_bad_input(rng):
    q = rng.standard_normal((2, 3, 4))
    with pytest.raises(ShapeMismatch):
        full_attention(q, q[:, :, :2], q, 1.0)
    bad = q.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteInput):
        full_attention(bad, q, q, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_output_in_convex_hull(seed):
    r = np.random.default_rng(seed)
    q, k, v = (r.standard_normal((2, 5, 3)) for _ in range(3))
    out = full_attention(q, k, v, 1.3)
    lo, hi = v.min(axis=1, keepdims=True), v.max(axis=1, keepdims=True)
    assert (out >= lo - 1e-12).all() and (out <= hi + 1e-12).all()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_softmax_shift_invariance(seed, c):
    logits = np.random.default_rng(seed).standard_normal((3, 7))
    assert np.abs(softmax(logits + c) - softmax(logits)).max() <= 1e-12


def test_naive_topk_examples():
    assert naive_topk([3, 1, 3, 2], 2) == [0, 2]
    assert naive_topk([3, 1, 3, 2], 10) == [0, 2, 3, 1]
    assert naive_topk([], 3) == []


def test_naive_topk_matches_stable_sort(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 65))
        # coarse values so ties are common
        s = rng.integers(0, 6, n).astype(float) if rng.random() < 0.5 else rng.random(n)
        k = int(rng.integers(1, n + 2))
        ref = np.argsort(-s, kind="stable")[:k].tolist()
        assert naive_topk(s, k) == ref


def test_masked_attention_denominator(rng):
    q, k, v = (rng.standard_normal((1, 3, 2)) for _ in range(3))
    allowed = np.array([[[1, 0, 1], [1, 1, 1], [0, 1, 0]]], dtype=bool)
    out, den = masked_attention(q, k, v, 0.7, allowed)
    s = 0.7 * q[0] @ k[0].T
    np.testing.assert_allclose(den[0], (np.exp(s) * allowed[0]).sum(axis=1), rtol=1e-14)
    np.testing.assert_allclose(out[0, 2], v[0, 1], atol=1e-15)


def test_loop_pool_example():
    lay = TokenLayout(0, 1, 2, 2, 2)
    x = np.arange(4.0).reshape(1, 4, 1)
    assert loop_avg_pool(x, lay)[0, 0, 0] == 1.5


@pytest.mark.parametrize("n_spec", [0, 1, 5])
def test_reference_degenerates_to_dense(n_spec):
    lay = TokenLayout(n_spec, 2, 3, 4, 1)
    x, w, p = make_case(3, lay, top_k=lay.num_windows)
    q, k, v = project_qkv(x, w, w.heads, w.dim)
    out = reference_gsa(q, k, v, lay, p, w.w_g)
    scale = p.resolved_scale(w.dim)
    assert out.shape == (2, lay.total_tokens, w.dim)
    spec = full_attention(q[:, :n_spec], k, v, scale) if n_spec else out[:, :0]
    img = full_attention(q[:, n_spec:], k[:, n_spec:], v[:, n_spec:], scale)
    assert np.abs(out - np.concatenate([spec, img], axis=1)).max() <= 1e-12


def test_reference_without_specials_has_only_image_rows():
    lay = TokenLayout(0, 2, 4, 4, 2)
    x, w, p = make_case(5, lay, top_k=2)
    q, k, v = project_qkv(x, w, w.heads, w.dim)
    assert reference_gsa(q, k, v, lay, p, w.w_g).shape[1] == lay.image_tokens


def test_golden_round_trip(tmp_path, rng):
    a = rng.standard_normal((2, 3, 4)).astype(np.float32)
    b = np.arange(6, dtype=np.int64).reshape(2, 3)
    path = tmp_path / "g.npz"
    write_golden(path, out=a, idx=b)
    got = read_golden(path)
    assert got["out"].dtype == np.float32 and np.array_equal(got["out"], a)
    assert np.array_equal(got["idx"], b)

import numpy as np
import pytest

from gsakit.compression import TopkResult
from gsakit.errors import EmptySelection, GsaError, InvalidStride
from gsakit.kernels import KernelCounters, KernelTiling
from gsakit.layout import TokenLayout
from gsakit.oracle import full_attention, masked_attention
from gsakit.selection import (
    SelectionPlan,
    block_sparse_attention,
    build_selection_plan,
    forced_exclusion_mask,
    forced_window_set,
)

from conftest import random_layout


def dense_mask(plan, lay):
    heads = plan.indices.shape[0]
    allowed = np.zeros((heads, lay.image_tokens, lay.image_tokens), dtype=bool)
    for h in range(heads):
        for w in range(lay.num_windows):
            rows = lay.window_token_index[w]
            cols = lay.window_token_index[plan.row(h, w)].ravel()
            allowed[h, rows[:, None], cols[None, :]] = True
    return allowed


def random_plan(rng, lay, heads=2, pad=True):
    nw = lay.num_windows
    length = int(rng.integers(1, nw + 1))
    idx = np.stack([np.stack([rng.permutation(nw)[:length] for _ in range(nw)]) for _ in range(heads)])
    if pad and length > 1:
        # ragged rows: blank out a random tail
        cut = rng.integers(1, length + 1, size=idx.shape[:2])
        idx = np.where(np.arange(length) < cut[..., None], idx, -1)
    return SelectionPlan(idx, np.empty(0, dtype=np.int64))


def test_plain_plan_copies_topk(rng):
    lay = TokenLayout(0, 2, 4, 4, 2)
    idx = rng.integers(0, 8, (2, 8, 3))
    plan = build_selection_plan(TopkResult(idx), lay, "plain")
    assert np.array_equal(plan.indices, idx)
    assert plan.forced_windows.size == 0


def test_forced_frames_at_stride():
    lay = TokenLayout(0, 250, 4, 4, 4)
    assert forced_window_set(lay, 100).tolist() == [0, 100, 200]


def test_hybrid_hand_example():
    lay = TokenLayout(0, 3, 8, 8, 4)
    idx = np.array([5, 2, 9] * lay.num_windows).reshape(1, lay.num_windows, 3)
    plan = build_selection_plan(TopkResult(idx), lay, "hybrid", 100)
    assert plan.forced_windows.tolist() == [0, 1, 2, 3]
    assert all(plan.row(0, w) == [0, 1, 2, 3, 5, 9] for w in range(lay.num_windows))


def test_hybrid_rows_have_no_duplicates(rng):
    lay = TokenLayout(0, 5, 4, 4, 2)
    for _ in range(20):
        idx = np.stack([[rng.permutation(20)[:6] for _ in range(20)] for _ in range(2)])
        plan = build_selection_plan(TopkResult(idx), lay, "hybrid", 2)
        forced = forced_window_set(lay, 2).tolist()
        for h in range(2):
            for w in range(20):
                row = plan.row(h, w)
                assert len(row) == len(set(row))
                assert row[: len(forced)] == forced
                assert set(row) == set(forced) | set(idx[h, w].tolist())


def test_invalid_stride():
    lay = TokenLayout(0, 2, 4, 4, 2)
    with pytest.raises(InvalidStride):
        forced_window_set(lay, 0)
    with pytest.raises(GsaError):
        build_selection_plan(TopkResult(np.zeros((1, 8, 1), dtype=int)), lay, "other")


def test_exclusion_mask():
    lay = TokenLayout(0, 5, 4, 4, 2)
    mask = forced_exclusion_mask(lay, 3)
    assert np.flatnonzero(mask).tolist() == [0, 1, 2, 3, 12, 13, 14, 15]


def test_all_windows_equals_full_attention(rng):
    lay = TokenLayout(0, 3, 4, 4, 2)
    q, k, v = (rng.standard_normal((2, lay.image_tokens, 4)) for _ in range(3))
    idx = np.broadcast_to(np.arange(lay.num_windows), (2, lay.num_windows, lay.num_windows)).copy()
    out, _ = block_sparse_attention(q, k, v, SelectionPlan(idx, np.empty(0, int)), lay, 0.5, KernelTiling(16, 16))
    assert np.abs(out - full_attention(q, k, v, 0.5)).max() <= 1e-12


def test_single_token_windows(rng):
    lay = TokenLayout(0, 2, 3, 3, 1)
    q, k, v = (rng.standard_normal((1, 18, 4)) for _ in range(3))
    target = rng.integers(0, 18, 18)
    out, _ = block_sparse_attention(q, k, v, SelectionPlan(target.reshape(1, 18, 1), np.empty(0, int)), lay, 1.0, KernelTiling())
    assert np.array_equal(out[0], v[0, target])


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
def test_matches_masked_oracle(rng, dtype, tol):
    lay = TokenLayout(0, 3, 8, 8, 4)
    q, k, v = (rng.standard_normal((2, lay.image_tokens, 8)).astype(dtype) for _ in range(3))
    idx = np.stack([[rng.permutation(lay.num_windows)[:2] for _ in range(lay.num_windows)] for _ in range(2)])
    plan = SelectionPlan(idx, np.empty(0, int))
    out, lse = block_sparse_attention(q, k, v, plan, lay, 0.35, KernelTiling(32, 32))
    assert out.dtype == dtype
    ref, den = masked_attention(*(t.astype(np.float64) for t in (q, k, v)), 0.35, dense_mask(plan, lay))
    assert np.abs(out - ref).max() <= tol


def test_random_plans_and_lse(rng):
    worst = worst_lse = 0.0
    for _ in range(100):
        lay = random_layout(rng, int(rng.choice([1, 2, 4])), 256, specials=(0,))
        q, k, v = (rng.standard_normal((2, lay.image_tokens, 4)) for _ in range(3))
        plan = random_plan(rng, lay)
        t = KernelTiling(int(rng.choice([8, 16, 32, 64])), int(rng.choice([8, 16, 32, 64])))
        out, lse = block_sparse_attention(q, k, v, plan, lay, 0.6, t)
        ref, den = masked_attention(q, k, v, 0.6, dense_mask(plan, lay))
        worst = max(worst, np.abs(out - ref).max())
        worst_lse = max(worst_lse, np.abs(np.exp(lse) / den - 1).max())
    assert worst <= 1e-12
    assert worst_lse <= 1e-10


def test_row_permutation_invariance(rng):
    lay = TokenLayout(0, 2, 8, 8, 2)
    q, k, v = (rng.standard_normal((2, lay.image_tokens, 4)) for _ in range(3))
    plan = random_plan(rng, lay, pad=False)
    out, _ = block_sparse_attention(q, k, v, plan, lay, 0.5, KernelTiling())
    shuffled = np.stack([[rng.permutation(r) for r in head] for head in plan.indices])
    out2, _ = block_sparse_attention(q, k, v, SelectionPlan(shuffled, plan.forced_windows), lay, 0.5, KernelTiling())
    assert np.abs(out - out2).max() <= 1e-12


def test_counter_matches_plan_lengths(rng):
    lay = TokenLayout(0, 2, 4, 8, 2)
    q = rng.standard_normal((2, lay.image_tokens, 4))
    plan = random_plan(rng, lay)
    c = KernelCounters()
    block_sparse_attention(q, q, q, plan, lay, 1.0, KernelTiling(), counters=c)
    expected = plan.row_lengths.sum(axis=-1) * lay.window_area * lay.window_area
    assert np.array_equal(c.get("select"), expected)


def test_empty_row_rejected(rng):
    lay = TokenLayout(0, 1, 4, 4, 2)
    q = rng.standard_normal((1, 16, 2))
    idx = np.zeros((1, 4, 2), dtype=int)
    idx[0, 2] = -1
    with pytest.raises(EmptySelection):
        block_sparse_attention(q, q, q, SelectionPlan(idx, np.empty(0, int)), lay, 1.0, KernelTiling())

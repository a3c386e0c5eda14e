import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsakit.errors import DivisibilityError, IndexOutOfRange, ShapeMismatch, ZeroSizeError
from gsakit.layout import TokenLayout, build_token_layout, partition_qkv, tokens_of_window, window_of_token


@st.composite
def layouts(draw):
    s = draw(st.integers(1, 4))
    return TokenLayout(
        draw(st.integers(0, 6)),
        draw(st.integers(1, 4)),
        s * draw(st.integers(1, 4)),
        s * draw(st.integers(1, 4)),
        s,
    )


def test_one_window_per_frame():
    lay = build_token_layout(0, 2, 4, 4, 4)
    assert lay.image_tokens == 32
    assert lay.num_windows == 2
    assert [window_of_token(lay, i) for i in range(32)] == [0] * 16 + [1] * 16


def test_counts_at_production_geometry():
    lay = build_token_layout(5, 10, 36, 36, 4)
    assert lay.image_tokens == 12960
    assert lay.num_windows == 810
    assert lay.total_tokens == 12965


def test_indivisible_grid_rejected():
    with pytest.raises(DivisibilityError):
        build_token_layout(0, 1, 5, 5, 4)


@pytest.mark.parametrize("args", [(0, 0, 4, 4, 4), (0, 1, 0, 4, 4), (0, 1, 4, 4, 0), (-1, 1, 4, 4, 4)])
def test_zero_sizes_rejected(args):
    with pytest.raises(ZeroSizeError):
        build_token_layout(*args)


def test_hand_enumerated_window():
    # 8x8 grid, 4x4 windows: the window grid is 2x2 and (5, 6) sits in its bottom-right cell
    lay = build_token_layout(0, 1, 8, 8, 4)
    assert window_of_token(lay, 5 * 8 + 6) == 3
    # same position one frame later
    lay2 = build_token_layout(0, 2, 8, 8, 4)
    assert window_of_token(lay2, 64 + 5 * 8 + 6) == 7


def test_window_members_row_major():
    lay = build_token_layout(0, 1, 4, 6, 2)
    assert tokens_of_window(lay, 1).tolist() == [2, 3, 8, 9]
    assert tokens_of_window(lay, 3).tolist() == [12, 13, 18, 19]


def test_identity_when_s_is_one():
    lay = build_token_layout(3, 2, 3, 5, 1)
    assert [window_of_token(lay, i) for i in range(lay.image_tokens)] == list(range(lay.image_tokens))


def test_out_of_range():
    lay = build_token_layout(0, 1, 4, 4, 2)
    for bad in (-1, 16):
        with pytest.raises(IndexOutOfRange):
            window_of_token(lay, bad)
    with pytest.raises(IndexOutOfRange):
        tokens_of_window(lay, 4)


@settings(max_examples=60, deadline=None)
@given(layouts())
def test_layout_invariants(lay):
    assert lay.num_windows * lay.window_area == lay.image_tokens
    twi = lay.token_window_index
    # arithmetic and table lookup agree
    assert all(window_of_token(lay, i) == twi[i] for i in range(lay.image_tokens))
    # windows partition the tokens
    flat = np.sort(lay.window_token_index.ravel())
    assert np.array_equal(flat, np.arange(lay.image_tokens))
    # stable sort by (window, token) is a permutation whose inverse gives back i
    perm = np.lexsort((np.arange(lay.image_tokens), twi))
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    assert np.array_equal(perm[inv], np.arange(lay.image_tokens))
    # windows never straddle frames
    frames = lay.window_token_index // lay.tokens_per_frame
    assert (frames == frames[:, :1]).all()
    assert np.array_equal(frames[:, 0], [lay.window_frame(w) for w in range(lay.num_windows)])


def test_partition_no_specials(rng):
    lay = build_token_layout(0, 2, 4, 4, 2)
    q, k, v = (rng.standard_normal((2, 32, 4)) for _ in range(3))
    spec, img = partition_qkv(q, k, v, lay)
    assert all(t.shape == (2, 0, 4) for t in spec)
    assert all(a is b or np.array_equal(a, b) for a, b in zip(img, (q, k, v)))


@settings(max_examples=30, deadline=None)
@given(layouts(), st.integers(0, 2**32 - 1))
def test_partition_round_trip(lay, seed):
    r = np.random.default_rng(seed)
    q, k, v = (r.standard_normal((2, lay.total_tokens, 3)) for _ in range(3))
    spec, img = partition_qkv(q, k, v, lay)
    for orig, a, b in zip((q, k, v), spec, img):
        assert np.array_equal(np.concatenate([a, b], axis=1), orig)


def test_partition_shape_errors(rng):
    lay = build_token_layout(3, 2, 4, 4, 2)
    q = rng.standard_normal((2, 35, 4))
    with pytest.raises(ShapeMismatch):
        partition_qkv(q, q, q[:, :-1], lay)
    with pytest.raises(ShapeMismatch):
        partition_qkv(q[:, :-1], q[:, :-1], q[:, :-1], lay)

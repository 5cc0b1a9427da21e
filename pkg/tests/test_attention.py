import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quietsr import attention as A
from quietsr import params as P
from quietsr.errors import ValidationError

import oracles


def sqwin(dim=4, heads=2, window=2, seed=0, bases=("RY",), mode="cosine"):
    return A.SqwinParams.init(dim, heads, window, np.random.default_rng(seed), bases=bases,
                              mode=mode)


# ---------------------------------------------------------------------------
# Windows and shifts
# ---------------------------------------------------------------------------


def test_partition_order_and_content():
    x = np.arange(4 * 4 * 3, dtype=float).reshape(4, 4, 3)
    win = A.window_partition(x, 2)
    assert win.shape == (4, 4, 3)
    np.testing.assert_array_equal(win[0], x[0:2, 0:2].reshape(4, 3))
    np.testing.assert_array_equal(win[1], x[0:2, 2:4].reshape(4, 3))


def test_single_window_is_flattened_map():
    x = np.random.default_rng(0).normal(size=(3, 3, 2))
    np.testing.assert_array_equal(A.window_partition(x, 3)[0], x.reshape(9, 2))


def test_partition_matches_index_oracle_and_roundtrips():
    x = np.random.default_rng(1).normal(size=(2, 14, 14, 4))
    win = A.window_partition(x, 2)
    assert win.shape == (2 * 49, 4, 4)
    for b in range(2):
        for wi in range(7):
            for wj in range(7):
                for t in range(4):
                    a, c = divmod(t, 2)
                    assert np.array_equal(win[b * 49 + wi * 7 + wj, t], x[b, 2 * wi + a, 2 * wj + c])
    assert A.window_merge(win, 2, 14, 14).tobytes() == x.tobytes()


def test_partition_rejects_indivisible():
    with pytest.raises(ValidationError):
        A.window_partition(np.zeros((5, 4, 1)), 2)


def test_shift_examples():
    x = np.arange(4.0).reshape(2, 2, 1)
    np.testing.assert_array_equal(A.cyclic_shift(x, 0), x)
    shifted = A.cyclic_shift(x, 1)
    assert shifted[1, 1, 0] == x[0, 0, 0] and shifted[0, 0, 0] == x[1, 1, 0]
    with pytest.raises(ValidationError):
        A.cyclic_shift(x, 2)


@settings(max_examples=30, deadline=None)
@given(h=st.integers(2, 9), w=st.integers(2, 9), s=st.integers(0, 8), seed=st.integers(0, 99))
def test_shift_roundtrip(h, w, s, seed):
    s = s % min(h, w)
    x = np.random.default_rng(seed).normal(size=(h, w, 2))
    assert A.inverse_shift(A.cyclic_shift(x, s), s).tobytes() == x.tobytes()


# ---------------------------------------------------------------------------
# Mask
# ---------------------------------------------------------------------------


def test_unshifted_mask_is_empty():
    assert not A.compute_attention_mask(8, 8, 2, 0).mask.any()


@pytest.mark.parametrize("h,w,m,s", [(4, 4, 2, 1), (8, 8, 4, 2), (6, 4, 2, 1), (14, 14, 2, 1)])
def test_mask_matches_wrap_oracle(h, w, m, s):
    masks = A.compute_attention_mask(h, w, m, s)
    assert np.array_equal(masks.mask == A.MASK_VALUE, oracles.wrap_mask(h, w, m, s))
    assert np.array_equal(masks.mask, masks.mask.transpose(0, 2, 1))
    assert set(np.unique(masks.mask)) <= {0.0, A.MASK_VALUE}


def test_small_mask_pattern():
    mask = A.compute_attention_mask(4, 4, 2, 1).mask != 0
    # Only the last window row / column straddle the wrap.
    assert not mask[0].any()
    assert mask[1].sum() == 8 and mask[2].sum() == 8 and mask[3].sum() == 12


# ---------------------------------------------------------------------------
# Relative position bias
# ---------------------------------------------------------------------------


def test_window_two_has_nine_displacements():
    table, index = A.relative_displacements(2)
    assert table.shape == (9, 2)
    assert {tuple(r) for r in table} == {(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)}
    for i in range(4):
        for j in range(4):
            ri, ci = divmod(i, 2)
            rj, cj = divmod(j, 2)
            assert tuple(table[index[i, j]]) == (ci - cj, ri - rj)


def test_bias_diagonal_is_constant_and_zero_post_gives_bias():
    p = sqwin(seed=3)
    bias = A.log_relative_bias(2, 8.0, 8.0, p.bias_mlp)
    for h in range(2):
        assert np.all(np.diag(bias[h]) == bias[h, 0, 0])
    p.bias_mlp.post_w[...] = 0
    p.bias_mlp.post_b[...] = [0.25, -0.5]
    bias = A.log_relative_bias(2, 8.0, 8.0, p.bias_mlp)
    assert np.all(bias[0] == 0.25) and np.all(bias[1] == -0.5)


def test_bias_rejects_nonpositive_scale():
    with pytest.raises(ValidationError):
        A.log_relative_bias(2, 0.0, 1.0, sqwin().bias_mlp)


def test_log_coordinate_values():
    np.testing.assert_allclose(A._log_coord(np.array([-1.0, 0.0, 1.0]), 8.0),
                               [-math.log2(1.125), 0.0, math.log2(1.125)])


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


def test_parameter_defaults():
    p = sqwin()
    np.testing.assert_allclose(p.kappa, [10.0, 10.0])
    np.testing.assert_allclose(p.gamma, [8.0, 8.0])
    p.kappa_raw[...] = 50.0
    assert np.all(p.kappa == pytest.approx(100.0))
    with pytest.raises(ValidationError):
        sqwin(dim=4, heads=3)


@pytest.mark.parametrize("shift", [0, 1])
@pytest.mark.parametrize("mode", ["cosine", "dot"])
def test_forward_matches_straight_line_reference(shift, mode):
    p = sqwin(seed=5, mode=mode)
    x = np.random.default_rng(6).normal(size=(4, 4, 4))
    np.testing.assert_allclose(A.sqwin_forward(x, p, shift), oracles.sqwin_reference(x, p, shift),
                               atol=1e-10)


def test_identical_tokens_attend_uniformly():
    p = sqwin(seed=1)
    p.bias_mlp.post_w[...] = 0
    x = np.tile(np.array([0.3, -0.2, 0.9, 0.1]), (4, 4, 1))
    attn = A.attention_weights(x, p, 0)
    np.testing.assert_allclose(attn, 0.25, atol=1e-15)
    out = A.sqwin_forward(x, p, 0)
    np.testing.assert_allclose(out, np.broadcast_to(out[0, 0], out.shape), atol=1e-15)


def test_cold_temperature_leaves_only_the_mask():
    p = sqwin(seed=2)
    p.bias_mlp.post_w[...] = 0
    p.kappa_raw[...] = -60.0
    x = np.random.default_rng(2).normal(size=(4, 4, 4))
    attn = A.attention_weights(x, p, 1)
    mask = A.compute_attention_mask(4, 4, 2, 1).mask != 0
    for w in range(4):
        for h in range(2):
            for i in range(4):
                allowed = ~mask[w, i]
                np.testing.assert_allclose(attn[w, h, i, allowed], 1.0 / allowed.sum(), atol=1e-12)


def test_rows_normalised_and_masked_pairs_silent():
    p = sqwin(seed=4)
    x = np.random.default_rng(4).normal(size=(2, 6, 6, 4))
    attn = A.attention_weights(x, p, 1)
    np.testing.assert_allclose(attn.sum(-1), 1.0, atol=1e-12)
    mask = np.tile(A.compute_attention_mask(6, 6, 2, 1).mask != 0, (2, 1, 1))
    assert attn.transpose(0, 2, 3, 1)[mask].max() < 1e-8


def test_zero_queries_stay_finite():
    p = sqwin(seed=0, bases=None)  # RZ-only layers: every q and k is (1, 1, 1, 1)
    x = np.random.default_rng(0).normal(size=(4, 4, 4))
    assert np.all(np.isfinite(A.sqwin_forward(x, p, 1)))
    q = A._unit(np.zeros((1, 1, 1, 2)))
    assert not q[0].any()


def test_unshifted_attention_commutes_with_window_roll():
    p = sqwin(seed=7)
    x = np.random.default_rng(7).normal(size=(6, 6, 4))
    rolled = np.roll(x, (2, 2), axis=(0, 1))
    np.testing.assert_allclose(A.sqwin_forward(rolled, p, 0),
                               np.roll(A.sqwin_forward(x, p, 0), (2, 2), axis=(0, 1)), atol=1e-13)


@pytest.mark.parametrize("mode", ["cosine", "dot"])
@pytest.mark.parametrize("shift", [0, 1])
def test_gradients_match_finite_difference(mode, shift):
    p = sqwin(seed=8, mode=mode)
    rng = np.random.default_rng(9)
    x = rng.normal(size=(1, 4, 4, 4))
    g = rng.normal(size=x.shape)
    out, cache = A.sqwin_fwd(x, p, shift)
    dx, grads = A.sqwin_bwd(cache, g, p)

    def f(vec):
        return np.sum(g * A.sqwin_forward(x, P.unflatten(p, vec), shift))

    base = P.flatten(p)
    num = oracles.central_diff(f, base)
    np.testing.assert_allclose(P.flatten(grads), num, rtol=1e-4, atol=1e-8)
    numx = oracles.central_diff(lambda v: np.sum(g * A.sqwin_forward(v, p, shift)), x)
    np.testing.assert_allclose(dx, numx, rtol=1e-4, atol=1e-8)

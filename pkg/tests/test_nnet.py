"""Encoder blocks: gradient checks, receptive-field accounting, and the
streaming locality contract at the single-layer level."""

import numpy as np
import pytest

from legofeat import numcore as nc
from legofeat.nnet import (ConformerLiteBlock, CrossAttention, EncoderStack,
                           RecurrentPredictionCell, context_mask,
                           receptive_field, valid_mask)
from legofeat.numcore import ContractError, ParamStore, Tensor


def _stack(seed, windows, d_in=3, d_model=6, heads=2):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    enc = EncoderStack(store, "enc", d_in, d_model, heads, windows, rng)
    return store, enc


def test_context_mask_band():
    m = context_mask(5, 1, 2)
    assert m[2].tolist() == [False, True, True, True, True]
    full = context_mask(4, None, None)
    assert full.all()
    causal = context_mask(3, None, 0)
    assert np.array_equal(causal, np.tril(np.ones((3, 3), dtype=bool)))


def test_block_gradient_check():
    store, enc = _stack(0, [(2, 1)])
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 5, 3))

    def f():
        y = enc.forward(Tensor(x), [5, 4])
        return nc.mean_all(nc.mul(y, y))

    assert nc.finite_diff_check(f, store, eps=1e-6) <= 1e-6


def test_causal_block_gradient_check():
    store, enc = _stack(2, [(None, 0)])
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 4, 3))

    def f():
        y = enc.forward(Tensor(x), [4])
        return nc.mean_all(nc.mul(y, y))

    assert nc.finite_diff_check(f, store, eps=1e-6) <= 1e-6


def test_prediction_cell_gradient_check():
    store = ParamStore()
    rng = np.random.default_rng(4)
    cell = RecurrentPredictionCell(store, "p", vocab_rows=5, d_emb=3,
                                   d_state=4, rng=rng)
    rows = np.array([[0, 1, 2], [0, 4, 4]], dtype=np.int64)

    def f():
        y = cell.run(rows)
        return nc.mean_all(nc.mul(y, y))

    assert nc.finite_diff_check(f, store, eps=1e-6) <= 1e-6


def test_cross_attention_gradient_check():
    store = ParamStore()
    rng = np.random.default_rng(5)
    att = CrossAttention(store, "a", d_query=4, d_memory=3, d_attn=6, rng=rng)
    mem = Tensor(rng.standard_normal((2, 5, 3)))
    query = rng.standard_normal((2, 4))
    mask = np.array([[True] * 5, [True, True, True, False, False]])

    def f():
        keys, vals = att.project_memory(mem)
        ctx = att.attend(Tensor(query), keys, vals, mask)
        return nc.mean_all(nc.mul(ctx, ctx))

    assert nc.finite_diff_check(f, store, eps=1e-6) <= 1e-6


def test_receptive_field_sums_blocks():
    store, enc = _stack(6, [(None, 0), (2, 2)])
    left, right = receptive_field(enc.blocks)
    assert left == np.inf
    # causal block: conv reaches 2 past; banded block: attn 2 + conv 1
    assert right == enc.blocks[0].right_reach + enc.blocks[1].right_reach
    assert enc.blocks[0].right_reach == 0


def test_streaming_locality_exhaustive_single_block():
    # perturbing any frame outside [t - L_eff, t + R_eff] leaves output
    # frame t bit-identical; inside the window it must be able to change
    store, enc = _stack(7, [(1, 1)])
    rng = np.random.default_rng(8)
    t_len = 12
    x = rng.standard_normal((t_len, 3))
    base = enc.forward_exact(x)
    blk = enc.blocks[0]
    l_eff = int(blk.left_reach)
    r_eff = blk.right_reach
    for s in range(t_len):
        bumped = x.copy()
        bumped[s] += 10.0
        out = enc.forward_exact(bumped)
        for t in range(t_len):
            inside = t - l_eff <= s <= t + r_eff
            if not inside:
                assert np.array_equal(out[t], base[t]), (s, t)


def test_causal_stack_is_prefix_stable():
    store, enc = _stack(9, [(None, 0), (None, 0)])
    rng = np.random.default_rng(10)
    x = rng.standard_normal((10, 3))
    full = enc.forward_exact(x)
    for cut in range(1, 10):
        prefix = enc.forward_exact(x[:cut])
        assert np.array_equal(prefix, full[:cut])


def test_forward_matches_forward_exact_without_padding():
    store, enc = _stack(11, [(2, 1)])
    rng = np.random.default_rng(12)
    x = rng.standard_normal((6, 3))
    batched = enc.forward(Tensor(x[None]), [6]).data[0]
    exact = enc.forward_exact(x)
    assert np.allclose(batched, exact, atol=1e-12)


def test_padding_does_not_leak_into_valid_frames():
    store, enc = _stack(13, [(2, 2)])
    rng = np.random.default_rng(14)
    x = rng.standard_normal((8, 3))
    alone = enc.forward(Tensor(x[None, :5]), [5]).data[0]
    padded_in = np.zeros((1, 8, 3))
    padded_in[0, :5] = x[:5]
    padded = enc.forward(Tensor(padded_in), [5]).data[0]
    assert np.allclose(padded[:5], alone[:5], atol=1e-12)
    assert np.array_equal(padded[5:], np.zeros((3, 6)))


def test_valid_mask():
    m = valid_mask([3, 1], 4)
    assert m.tolist() == [[True, True, True, False],
                          [True, False, False, False]]


def test_stack_rejects_bad_input_shape():
    store, enc = _stack(15, [(1, 1)])
    with pytest.raises(ContractError):
        enc.forward(Tensor(np.zeros((2, 4, 5))), [4, 4])


def test_d_model_heads_divisibility_enforced():
    store = ParamStore()
    rng = np.random.default_rng(16)
    with pytest.raises(ContractError):
        ConformerLiteBlock(store, "b", d_model=5, heads=2, attn_left=1,
                           attn_right=1, rng=rng)

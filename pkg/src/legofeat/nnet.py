"""Streaming encoder blocks, recurrent cells, and attention.

The encoder is a stack of lite conformer blocks: banded self-attention,
a depthwise temporal convolution, and a position-wise feed-forward, each
wrapped in pre-norm residuals. All context is explicit: a block with
attention window (L, R) and a convolution reaching ``conv_left`` /
``conv_right`` frames sees exactly ``L + conv_left`` past and
``R + conv_right`` future frames, and the reach of a stack is the sum
over its blocks. Causal blocks (R = 0) therefore keep the whole stack
streamable: feeding a prefix reproduces, bit for bit, every output frame
whose full right context lies inside the prefix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import numcore as nc
from .numcore import ContractError, ParamStore, Tensor


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape if shape is not None else (fan_in, fan_out))


def _rowdot(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """x[..., D] @ w[D, E] with a strictly sequential sum over D.

    Library matmul may regroup additions depending on the number of rows,
    which would break bit-exact prefix evaluation; this never does.
    """
    z = x[..., :, None] * w
    return np.add.accumulate(z, axis=-2)[..., -1, :]


def _seqsum(z: np.ndarray, axis: int) -> np.ndarray:
    """Sequential sum along ``axis``; appended zero terms cannot perturb it."""
    return np.take(np.add.accumulate(z, axis=axis), -1, axis=axis)


def context_mask(t: int, left: int | None, right: int | None) -> np.ndarray:
    """Boolean [t, t] band: row i may attend to column j iff
    i - left <= j <= i + right (None means unbounded on that side)."""
    if t <= 0:
        raise ContractError("context_mask: t must be positive")
    rows = np.arange(t)[:, None]
    cols = np.arange(t)[None, :]
    mask = np.ones((t, t), dtype=bool)
    if left is not None:
        if left < 0:
            raise ContractError("context_mask: left must be >= 0")
        mask &= cols >= rows - left
    if right is not None:
        if right < 0:
            raise ContractError("context_mask: right must be >= 0")
        mask &= cols <= rows + right
    return mask


def valid_mask(lengths: Sequence[int], t: int) -> np.ndarray:
    """Boolean [B, t]: True at frames before each sequence's length."""
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.size and (lengths.min() < 0 or lengths.max() > t):
        raise ContractError("valid_mask: lengths out of range")
    return np.arange(t)[None, :] < lengths[:, None]


class ConformerLiteBlock:
    """Pre-norm residual block: banded MHSA, depthwise conv, feed-forward.

    The convolution is causal (reads conv_left past frames only) when the
    attention window is causal, and symmetric otherwise, so the block's
    total right reach is attn_right + conv_right.
    """

    def __init__(self, store: ParamStore, prefix: str, d_model: int, heads: int,
                 attn_left: int | None, attn_right: int,
                 rng: np.random.Generator, ff_mult: int = 2, conv_kernel: int = 3):
        if d_model % heads != 0:
            raise ContractError("d_model must be divisible by heads")
        if conv_kernel % 2 != 1 or conv_kernel < 1:
            raise ContractError("conv_kernel must be odd and positive")
        self.prefix = prefix
        self.d_model = d_model
        self.heads = heads
        self.d_head = d_model // heads
        self.attn_left = attn_left
        self.attn_right = attn_right
        reach = conv_kernel - 1
        if attn_right == 0:
            self.conv_left, self.conv_right = reach, 0
        else:
            self.conv_left, self.conv_right = reach // 2, reach - reach // 2
        d, f = d_model, ff_mult * d_model
        p = store.add
        p(f"{prefix}.ln1.g", np.ones(d))
        p(f"{prefix}.ln1.b", np.zeros(d))
        for name in ("wq", "wk", "wv", "wo"):
            p(f"{prefix}.attn.{name}", glorot(rng, d, d))
        for name in ("bq", "bk", "bv", "bo"):
            p(f"{prefix}.attn.{name}", np.zeros(d))
        p(f"{prefix}.ln2.g", np.ones(d))
        p(f"{prefix}.ln2.b", np.zeros(d))
        k = self.conv_left + self.conv_right + 1
        p(f"{prefix}.conv.w", glorot(rng, k, k, (k, d)))
        p(f"{prefix}.conv.b", np.zeros(d))
        p(f"{prefix}.ln3.g", np.ones(d))
        p(f"{prefix}.ln3.b", np.zeros(d))
        p(f"{prefix}.ff.w1", glorot(rng, d, f))
        p(f"{prefix}.ff.b1", np.zeros(f))
        p(f"{prefix}.ff.w2", glorot(rng, f, d))
        p(f"{prefix}.ff.b2", np.zeros(d))
        self.store = store

    @property
    def left_reach(self) -> float:
        if self.attn_left is None:
            return math.inf
        return self.attn_left + self.conv_left

    @property
    def right_reach(self) -> int:
        return self.attn_right + self.conv_right

    def _p(self, name: str) -> Tensor:
        return self.store[f"{self.prefix}.{name}"]

    def forward(self, x: Tensor, band: np.ndarray, valid: np.ndarray) -> Tensor:
        """x: [B, T, D]; band: bool [T, T]; valid: bool [B, T]."""
        b, t, d = x.shape
        h, dh = self.heads, self.d_head
        validf = Tensor(valid.astype(x.data.dtype)[:, :, None])

        a = nc.layer_norm(x, self._p("ln1.g"), self._p("ln1.b"))
        q = nc.add_bias(nc.matmul(a, self._p("attn.wq")), self._p("attn.bq"))
        k = nc.add_bias(nc.matmul(a, self._p("attn.wk")), self._p("attn.bk"))
        v = nc.add_bias(nc.matmul(a, self._p("attn.wv")), self._p("attn.bv"))
        # [B, T, D] -> [B, H, T, Dh]
        q = nc.swapaxes(nc.reshape(q, (b, t, h, dh)), 1, 2)
        k = nc.swapaxes(nc.reshape(k, (b, t, h, dh)), 1, 2)
        v = nc.swapaxes(nc.reshape(v, (b, t, h, dh)), 1, 2)
        scores = nc.scale(nc.matmul(q, nc.swapaxes(k, 2, 3)), 1.0 / math.sqrt(dh))
        attend = band[None, None, :, :] & valid[:, None, None, :]
        w = nc.masked_softmax(scores, attend, axis=-1)
        ctx = nc.reshape(nc.swapaxes(nc.matmul(w, v), 1, 2), (b, t, d))
        ctx = nc.add_bias(nc.matmul(ctx, self._p("attn.wo")), self._p("attn.bo"))
        x1 = nc.add(x, ctx)

        c = nc.layer_norm(x1, self._p("ln2.g"), self._p("ln2.b"))
        # padded rows carry layer-norm bias; zero them so the conv window
        # never mixes padding into valid frames
        c = nc.mul_rows(c, validf)
        conv = nc.depthwise_conv1d(c, self._p("conv.w"), self.conv_left, self.conv_right)
        conv = nc.add_bias(conv, self._p("conv.b"))
        x2 = nc.add(x1, conv)

        f = nc.layer_norm(x2, self._p("ln3.g"), self._p("ln3.b"))
        ff = nc.tanh(nc.add_bias(nc.matmul(f, self._p("ff.w1")), self._p("ff.b1")))
        ff = nc.add_bias(nc.matmul(ff, self._p("ff.w2")), self._p("ff.b2"))
        return nc.add(x2, ff)

    def _ln(self, x: np.ndarray, which: str, eps: float = 1e-6) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        return xc * inv * self._p(f"{which}.g").data + self._p(f"{which}.b").data

    def forward_exact(self, x: np.ndarray, band: np.ndarray) -> np.ndarray:
        """Prefix-stable single-sequence forward: x[T, D] -> [T, D].

        Every reduction that crosses frames (or whose register grouping a
        BLAS kernel could change with T) runs as a sequential accumulate,
        so output frame t is bit-identical whether the input ends just
        past t's right context or much later. Matches ``forward`` to
        rounding error; used for evaluation, export, and the streaming
        contract.
        """
        t, d = x.shape
        h, dh = self.heads, self.d_head
        pd = lambda name: self._p(name).data

        a = self._ln(x, "ln1")
        q = _rowdot(a, pd("attn.wq")) + pd("attn.bq")
        k = _rowdot(a, pd("attn.wk")) + pd("attn.bk")
        v = _rowdot(a, pd("attn.wv")) + pd("attn.bv")
        q = q.reshape(t, h, dh).transpose(1, 0, 2)
        k = k.reshape(t, h, dh).transpose(1, 0, 2)
        v = v.reshape(t, h, dh).transpose(1, 0, 2)
        scores = _seqsum(q[:, :, None, :] * k[:, None, :, :], axis=3)
        scores *= 1.0 / math.sqrt(dh)
        neg = np.where(band, scores, -np.inf)
        m = neg.max(axis=2, keepdims=True)
        e = np.where(band, np.exp(scores - np.where(np.isfinite(m), m, 0.0)), 0.0)
        tot = _seqsum(e, axis=2)[:, :, None]
        w = e / np.where(tot == 0.0, 1.0, tot)
        ctx = _seqsum(w[:, :, :, None] * v[:, None, :, :], axis=2)
        ctx = ctx.transpose(1, 0, 2).reshape(t, d)
        x1 = x + _rowdot(ctx, pd("attn.wo")) + pd("attn.bo")

        c = self._ln(x1, "ln2")
        xp = np.pad(c, ((self.conv_left, self.conv_right), (0, 0)))
        kw = pd("conv.w")
        conv = kw[0] * xp[0:t]
        for j in range(1, kw.shape[0]):
            conv = conv + kw[j] * xp[j : j + t]
        x2 = x1 + conv + pd("conv.b")

        f = self._ln(x2, "ln3")
        ff = np.tanh(_rowdot(f, pd("ff.w1")) + pd("ff.b1"))
        return x2 + _rowdot(ff, pd("ff.w2")) + pd("ff.b2")


class EncoderStack:
    """Input projection followed by a sequence of ConformerLiteBlocks.

    ``windows`` gives each block's (attn_left, attn_right); attn_left may
    be None for unbounded lookback. Output frames at padded positions are
    zeroed.
    """

    def __init__(self, store: ParamStore, prefix: str, d_in: int, d_model: int,
                 heads: int, windows: Sequence[tuple[int | None, int]],
                 rng: np.random.Generator, ff_mult: int = 2):
        if not windows:
            raise ContractError("EncoderStack: needs at least one block")
        self.prefix = prefix
        self.d_in = d_in
        self.d_model = d_model
        self.store = store
        store.add(f"{prefix}.in.w", glorot(rng, d_in, d_model))
        store.add(f"{prefix}.in.b", np.zeros(d_model))
        self.blocks = [
            ConformerLiteBlock(store, f"{prefix}.b{i}", d_model, heads, lt, rt, rng,
                               ff_mult=ff_mult)
            for i, (lt, rt) in enumerate(windows)
        ]

    def param_names(self) -> list[str]:
        return [n for n in self.store.names() if n.startswith(self.prefix + ".")]

    def forward(self, x: Tensor, lengths: Sequence[int]) -> Tensor:
        """x: [B, T, d_in] zero-padded; returns [B, T, d_model]."""
        if x.ndim != 3 or x.shape[2] != self.d_in:
            raise ContractError(f"EncoderStack: expected [B,T,{self.d_in}], got {x.shape}")
        b, t, _ = x.shape
        valid = valid_mask(lengths, t)
        y = nc.add_bias(nc.matmul(x, self.store[f"{self.prefix}.in.w"]),
                        self.store[f"{self.prefix}.in.b"])
        for blk in self.blocks:
            band = context_mask(t, blk.attn_left, blk.attn_right)
            y = blk.forward(y, band, valid)
        return nc.mul_rows(y, Tensor(valid.astype(y.data.dtype)[:, :, None]))

    def forward_exact(self, x: np.ndarray) -> np.ndarray:
        """Prefix-stable forward for one unpadded sequence: [T, d_in] ->
        [T, d_model]. See ConformerLiteBlock.forward_exact."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ContractError(f"EncoderStack: expected [T,{self.d_in}], got {x.shape}")
        t = x.shape[0]
        y = _rowdot(x, self.store[f"{self.prefix}.in.w"].data) \
            + self.store[f"{self.prefix}.in.b"].data
        for blk in self.blocks:
            band = context_mask(t, blk.attn_left, blk.attn_right)
            y = blk.forward_exact(y, band)
        return y

    def freeze(self) -> None:
        self.store.freeze(*self.param_names())


def receptive_field(blocks: Iterable[ConformerLiteBlock]) -> tuple[float, float]:
    """Total (left, right) context of a block sequence, in frames.

    Reach is additive across blocks; an unbounded lookback anywhere makes
    the left reach infinite.
    """
    left = 0.0
    right = 0.0
    for blk in blocks:
        left += blk.left_reach
        right += blk.right_reach
    return left, right


def stack_receptive_field(*stacks: EncoderStack) -> tuple[float, float]:
    blocks: list[ConformerLiteBlock] = []
    for s in stacks:
        blocks.extend(s.blocks)
    return receptive_field(blocks)


class RecurrentPredictionCell:
    """Plain tanh recurrence over label embeddings.

    state' = tanh(emb[label] @ We + state @ Wh + b). Index 0 doubles as
    the start symbol, so a fresh hypothesis begins with step(zeros, 0).
    """

    def __init__(self, store: ParamStore, prefix: str, vocab_rows: int,
                 d_emb: int, d_state: int, rng: np.random.Generator):
        self.prefix = prefix
        self.vocab_rows = vocab_rows
        self.d_emb = d_emb
        self.d_state = d_state
        self.store = store
        store.add(f"{prefix}.emb", glorot(rng, vocab_rows, d_emb))
        store.add(f"{prefix}.we", glorot(rng, d_emb, d_state))
        store.add(f"{prefix}.wh", glorot(rng, d_state, d_state))
        store.add(f"{prefix}.b", np.zeros(d_state))

    def param_names(self) -> list[str]:
        return [f"{self.prefix}.{n}" for n in ("emb", "we", "wh", "b")]

    def initial_state(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.d_state)))

    def step(self, state: Tensor, labels: np.ndarray) -> Tensor:
        """state: [B, d_state]; labels: int [B] -> next state [B, d_state]."""
        e = nc.gather_rows(self.store[f"{self.prefix}.emb"], np.asarray(labels))
        z = nc.add(nc.matmul(e, self.store[f"{self.prefix}.we"]),
                   nc.matmul(state, self.store[f"{self.prefix}.wh"]))
        return nc.tanh(nc.add_bias(z, self.store[f"{self.prefix}.b"]))

    def run(self, label_rows: np.ndarray) -> Tensor:
        """label_rows: int [B, U] (pad with 0). Returns states [B, U+1, d]:
        row u is the state after consuming start + u labels."""
        b, u = label_rows.shape
        state = self.step(self.initial_state(b), np.zeros(b, dtype=np.int64))
        outs = [state]
        for j in range(u):
            state = self.step(state, label_rows[:, j])
            outs.append(state)
        return nc.stack_steps(outs, axis=1)


class CrossAttention:
    """Single-head dot-product attention from a state vector to a memory."""

    def __init__(self, store: ParamStore, prefix: str, d_query: int,
                 d_memory: int, d_attn: int, rng: np.random.Generator):
        self.prefix = prefix
        self.d_attn = d_attn
        self.store = store
        store.add(f"{prefix}.wq", glorot(rng, d_query, d_attn))
        store.add(f"{prefix}.wk", glorot(rng, d_memory, d_attn))
        store.add(f"{prefix}.wv", glorot(rng, d_memory, d_attn))

    def param_names(self) -> list[str]:
        return [f"{self.prefix}.{n}" for n in ("wq", "wk", "wv")]

    def project_memory(self, memory: Tensor) -> tuple[Tensor, Tensor]:
        """memory: [B, T, d_memory] -> (keys, values), each [B, T, d_attn].
        Project once, attend many times."""
        keys = nc.matmul(memory, self.store[f"{self.prefix}.wk"])
        values = nc.matmul(memory, self.store[f"{self.prefix}.wv"])
        return keys, values

    def attend(self, query: Tensor, keys: Tensor, values: Tensor,
               valid: np.ndarray) -> Tensor:
        """query: [B, d_query]; keys/values: [B, T, d_attn]; valid: bool
        [B, T]. Returns the context vector [B, d_attn]."""
        b = query.shape[0]
        q = nc.matmul(query, self.store[f"{self.prefix}.wq"])
        q = nc.reshape(q, (b, 1, self.d_attn))
        scores = nc.scale(nc.matmul(q, nc.swapaxes(keys, 1, 2)),
                          1.0 / math.sqrt(self.d_attn))
        w = nc.masked_softmax(scores, valid[:, None, :], axis=-1)
        return nc.reshape(nc.matmul(w, values), (b, self.d_attn))

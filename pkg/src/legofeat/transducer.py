"""Transducer lattice loss and decoding. Blank is index 0.

The loss marginalizes over all monotone alignments of a label sequence
to T frames on the (frame, labels-emitted) lattice. Forward and backward
variables are computed column by column: within a column, the chain of
blank transitions is a prefix sum, so the whole column reduces to one
``logaddexp.accumulate`` scan instead of a Python loop over frames.
Unequal lengths in a batch are handled by giving padded frames blank
probability one, which leaves each sequence's marginal unchanged; padded
lattice cells get zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .numcore import ContractError, ParamStore, Tensor
from .nnet import RecurrentPredictionCell, glorot

_NEG_INF = -np.inf


@dataclass(frozen=True)
class Hypothesis:
    labels: tuple[int, ...]
    score: float


@dataclass
class NBestList:
    """Hypotheses sorted best-first (score desc, labels asc on ties)."""

    hyps: list[Hypothesis] = field(default_factory=list)

    def best(self) -> Hypothesis:
        if not self.hyps:
            raise ContractError("NBestList: empty")
        return self.hyps[0]

    def __len__(self) -> int:
        return len(self.hyps)

    def __iter__(self):
        return iter(self.hyps)


def _excl_cumsum(a: np.ndarray, axis: int) -> np.ndarray:
    c = np.cumsum(a, axis=axis)
    return np.concatenate(
        [np.zeros_like(np.take(c, [0], axis=axis)),
         np.take(c, range(a.shape[axis] - 1), axis=axis)], axis=axis)


def _transducer_forward_backward(
    bl: np.ndarray, yl: np.ndarray, t_lens: np.ndarray, u_lens: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """bl, yl: [B, T, U+1in log space, already padded (see callers).
    Returns (nll [B], blank occupancy, label occupancy), both [B, T, U+1]."""
    b, t_max, u1 = bl.shape

    alpha = np.empty((b, t_max, u1))
    alpha[:, :, 0] = _excl_cumsum(bl[:, :, 0], axis=1)
    for u in range(1, u1):
        e = alpha[:, :, u - 1] + yl[:, :, u - 1]
        btil = _excl_cumsum(bl[:, :, u], axis=1)
        alpha[:, :, u] = btil + np.logaddexp.accumulate(e - btil, axis=1)

    final_alpha = np.take_along_axis(
        alpha[:, t_max - 1, :], u_lens[:, None], axis=1)[:, 0]
    final_blank = np.take_along_axis(
        bl[:, t_max - 1, :], u_lens[:, None], axis=1)[:, 0]
    logp = final_alpha + final_blank
    if not np.isfinite(logp).all():
        bad = int(np.argmin(np.isfinite(logp)))
        raise ContractError(f"sequence {bad}: alignment sum is not finite")

    # beta over an extended time axis; beta[:, t_max, u] is the landing
    # state after the last frame: 0 where all labels are emitted
    beta = np.full((b, t_max + 1, u1), _NEG_INF)
    np.put_along_axis(beta[:, t_max, :], u_lens[:, None], 0.0, axis=1)
    for u in range(u1 - 1, -1, -1):
        if u + 1 < u1:
            z = yl[:, :, u] + beta[:, :t_max, u + 1]
        else:
            z = np.full((b, t_max), _NEG_INF)
        c = np.concatenate(
            [_excl_cumsum(bl[:, :, u], axis=1), bl[:, :, u].sum(axis=1)[:, None]],
            axis=1)
        w = np.concatenate([z + c[:, :t_max], c[:, t_max:] + beta[:, t_max:, u]],
                           axis=1)
        suffix = np.logaddexp.accumulate(w[:, ::-1], axis=1)[:, ::-1]
        beta[:, :t_max, u] = suffix[:, :t_max] - c[:, :t_max]

    t_valid = np.arange(t_max)[None, :] < t_lens[:, None]
    u_pos = np.arange(u1)[None, :]
    occ_bl = np.exp(alpha + bl + beta[:, 1:, :] - logp[:, None, None])
    occ_bl *= t_valid[:, :, None] & (u_pos <= u_lens[:, None])[:, None, :]
    occ_yl = np.zeros_like(bl)
    occ_yl[:, :, :-1] = np.exp(
        alpha[:, :, :-1] + yl[:, :, :-1] + beta[:, :t_max, 1:]
        - logp[:, None, None])
    occ_yl *= t_valid[:, :, None] & (u_pos < u_lens[:, None])[:, None, :]
    return -logp, occ_bl, occ_yl


def transducer_nll_from_log_probs(log_probs: Tensor, targets,
                                  input_lengths=None) -> Tensor:
    """Per-sequence negative log marginal. log_probs: [B, T, U+1, K] over
    the lattice ([T, U+1, K] for a single sequence), where U is the
    longest target; targets: label lists (labels in 1..K-1). Traced."""
    lp = log_probs
    single = lp.ndim == 3
    if single:
        lp_arr = lp.data[None]
        targets = [[int(x) for x in targets]]
    else:
        lp_arr = lp.data
        targets = [[int(x) for x in t] for t in targets]
    b, t_max, u1, k = lp_arr.shape
    if len(targets) != b:
        raise ContractError(f"transducer: {b} sequences but {len(targets)} targets")
    u_lens = np.array([len(t) for t in targets], dtype=np.int64)
    if u1 != u_lens.max(initial=0) + 1:
        raise ContractError(
            f"transducer: lattice has {u1} label rows, targets need "
            f"{u_lens.max(initial=0) + 1}")
    for i, tgt in enumerate(targets):
        for lab in tgt:
            if not 1 <= lab < k:
                raise ContractError(f"target {i}: label {lab} outside 1..{k - 1}")
    if input_lengths is None:
        t_lens = np.full(b, t_max, dtype=np.int64)
    else:
        t_lens = np.asarray(input_lengths, dtype=np.int64)
        if t_lens.shape != (b,) or t_lens.min() < 1 or t_lens.max() > t_max:
            raise ContractError("transducer: bad input_lengths")

    label_rows = np.zeros((b, max(u1 - 1, 1)), dtype=np.int64)
    for i, tgt in enumerate(targets):
        label_rows[i, : len(tgt)] = tgt

    t_valid = np.arange(t_max)[None, :] < t_lens[:, None]
    bl = np.where(t_valid[:, :, None], lp_arr[:, :, :, 0], 0.0)
    yl = np.full((b, t_max, u1), _NEG_INF)
    if u1 > 1:
        idx = np.broadcast_to(label_rows[:, None, :], (b, t_max, u1 - 1))
        picked = np.take_along_axis(lp_arr[:, :, : u1 - 1, :], idx[..., None],
                                    axis=3)[..., 0]
        u_ok = (np.arange(u1 - 1)[None, :] < u_lens[:, None])[:, None, :]
        yl[:, :, :-1] = np.where(t_valid[:, :, None] & u_ok, picked, _NEG_INF)

    nll, occ_bl, occ_yl = _transducer_forward_backward(bl, yl, t_lens, u_lens)
    out = Tensor(nll[0] if single else nll)

    bidx = np.arange(b)[:, None, None]
    tidx = np.arange(t_max)[None, :, None]
    uidx = np.arange(u1)[None, None, :]
    cls = np.zeros((b, u1), dtype=np.int64)
    if u1 > 1:
        cls[:, :-1] = label_rows[:, : u1 - 1]

    def bwd(g, single=single):
        gv = np.asarray(g).reshape(-1)[:, None, None]
        full = np.zeros_like(lp_arr)
        full[:, :, :, 0] = -occ_bl * gv
        np.add.at(full, (bidx, tidx, uidx, cls[:, None, :]), -occ_yl * gv)
        return (full[0] if single else full,)

    return nc.emit_op(out, (log_probs,), bwd)


def transducer_loss(logits: Tensor, targets, input_lengths=None) -> Tensor:
    """Mean negative log marginal over the batch, from raw lattice logits."""
    lp = nc.log_softmax(logits, axis=-1)
    nll = transducer_nll_from_log_probs(lp, targets, input_lengths)
    if nll.ndim == 0:
        return nll
    return nc.mean_all(nll)


class JointNetwork:
    """Additive joint: tanh(enc proj + pred proj + bias) -> vocab logits."""

    def __init__(self, store: ParamStore, prefix: str, d_enc: int, d_pred: int,
                 d_joint: int, vocab_plus_blank: int,
                 rng: np.random.Generator):
        self.prefix = prefix
        self.store = store
        store.add(f"{prefix}.we", glorot(rng, d_enc, d_joint))
        store.add(f"{prefix}.wp", glorot(rng, d_pred, d_joint))
        store.add(f"{prefix}.b", np.zeros(d_joint))
        store.add(f"{prefix}.wo", glorot(rng, d_joint, vocab_plus_blank))
        store.add(f"{prefix}.bo", np.zeros(vocab_plus_blank))

    def param_names(self) -> list[str]:
        return [f"{self.prefix}.{n}" for n in ("we", "wp", "b", "wo", "bo")]

    def lattice_logits(self, enc: Tensor, pred: Tensor) -> Tensor:
        """enc: [B, T, d_enc], pred: [B, U+1, d_pred] -> [B, T, U+1, K]."""
        pe = nc.matmul(enc, self.store[f"{self.prefix}.we"])
        pp = nc.matmul(pred, self.store[f"{self.prefix}.wp"])
        h = nc.tanh(nc.add_bias(nc.pairwise_sum(pe, pp), self.store[f"{self.prefix}.b"]))
        return nc.add_bias(nc.matmul(h, self.store[f"{self.prefix}.wo"]),
                           self.store[f"{self.prefix}.bo"])

    def step_logits(self, enc_t: Tensor, pred_g: Tensor) -> Tensor:
        """enc_t: [B, d_enc], pred_g: [B, d_pred] -> [B, K]."""
        pe = nc.matmul(enc_t, self.store[f"{self.prefix}.we"])
        pp = nc.matmul(pred_g, self.store[f"{self.prefix}.wp"])
        h = nc.tanh(nc.add_bias(nc.add(pe, pp), self.store[f"{self.prefix}.b"]))
        return nc.add_bias(nc.matmul(h, self.store[f"{self.prefix}.wo"]),
                           self.store[f"{self.prefix}.bo"])


class TransducerDecoder:
    """Prediction network plus joint; owns loss and search over a given
    encoder memory."""

    def __init__(self, store: ParamStore, prefix: str, d_enc: int, vocab: int,
                 d_emb: int, d_state: int, d_joint: int,
                 rng: np.random.Generator):
        self.vocab = vocab
        self.pred = RecurrentPredictionCell(store, f"{prefix}.pred", vocab + 1,
                                            d_emb, d_state, rng)
        self.joint = JointNetwork(store, f"{prefix}.joint", d_enc, d_state,
                                  d_joint, vocab + 1, rng)

    def param_names(self) -> list[str]:
        return self.pred.param_names() + self.joint.param_names()

    def loss(self, enc: Tensor, lengths: Sequence[int], targets) -> Tensor:
        """enc: [B, T, d_enc]; targets: list of label lists."""
        targets = [[int(x) for x in t] for t in targets]
        u_max = max((len(t) for t in targets), default=0)
        rows = np.zeros((enc.shape[0], u_max), dtype=np.int64)
        for i, tgt in enumerate(targets):
            rows[i, : len(tgt)] = tgt
        pred = self.pred.run(rows)
        logits = self.joint.lattice_logits(enc, pred)
        return transducer_loss(logits, targets, np.asarray(lengths))

    def greedy_batch(self, enc: Tensor, lengths: Sequence[int],
                     max_symbols_per_frame: int = 4,
                     max_labels: int | None = None) -> list[list[int]]:
        """Frame-synchronous argmax decoding for a whole batch. On a
        blank/label score tie the blank (lower index) wins."""
        b, t_max, _ = enc.shape
        t_lens = np.asarray(lengths)
        cap = max_labels if max_labels is not None else t_max * max_symbols_per_frame
        state = self.pred.step(self.pred.initial_state(b), np.zeros(b, dtype=np.int64))
        out: list[list[int]] = [[] for _ in range(b)]
        counts = np.zeros(b, dtype=np.int64)
        for t in range(t_max):
            enc_t = Tensor(enc.data[:, t, :])
            active = t < t_lens
            for _ in range(max_symbols_per_frame):
                logits = self.joint.step_logits(enc_t, state).data
                choice = np.argmax(logits, axis=1)
                emit = (choice != 0) & active & (counts < cap)
                if not emit.any():
                    break
                for i in np.nonzero(emit)[0]:
                    out[i].append(int(choice[i]))
                counts += emit
                stepped = self.pred.step(state, np.where(emit, choice, 0))
                state = Tensor(np.where(emit[:, None], stepped.data, state.data))
        return out

    def beam(self, enc: Tensor, beam_size: int,
             max_symbols_per_frame: int = 4,
             max_labels: int | None = None) -> NBestList:
        """Frame-synchronous beam search over a single utterance
        (enc: [T, d_enc]). Hypotheses with identical labels are merged
        keeping the best single-alignment score, so every reported score
        is the log-probability of one alignment."""
        if beam_size < 1:
            raise ContractError("beam: beam_size must be >= 1")
        t_max = enc.shape[0]
        cap = max_labels if max_labels is not None else t_max * max_symbols_per_frame
        s0 = self.pred.step(self.pred.initial_state(1), np.zeros(1, dtype=np.int64))
        cur: list[tuple[tuple[int, ...], float, np.ndarray]] = [
            ((), 0.0, s0.data[0])]
        for t in range(t_max):
            enc_t = enc.data[t]
            landed: dict[tuple[int, ...], tuple[float, np.ndarray]] = {}
            queue = cur
            for depth in range(max_symbols_per_frame + 1):
                states = Tensor(np.stack([h[2] for h in queue]))
                enc_rep = Tensor(np.broadcast_to(enc_t, (len(queue), enc_t.size)))
                lp = nc.log_softmax(self.joint.step_logits(enc_rep, states)).data
                for i, (labels, score, state) in enumerate(queue):
                    cand = score + lp[i, 0]
                    old = landed.get(labels)
                    if old is None or cand > old[0]:
                        landed[labels] = (cand, state)
                if depth == max_symbols_per_frame:
                    break
                expansions: list[tuple[float, tuple[int, ...], int, int]] = []
                for i, (labels, score, state) in enumerate(queue):
                    if len(labels) >= cap:
                        continue
                    for c in range(1, self.vocab + 1):
                        s = score + lp[i, c]
                        if s > _NEG_INF:
                            expansions.append((s, labels + (c,), i, c))
                if not expansions:
                    break
                expansions.sort(key=lambda e: (-e[0], e[1]))
                best_by_labels: dict[tuple[int, ...], tuple[float, int, int]] = {}
                for s, labels, i, c in expansions:
                    if labels not in best_by_labels:
                        best_by_labels[labels] = (s, i, c)
                    if len(best_by_labels) == beam_size:
                        break
                parents = np.array([i for (_, i, _) in best_by_labels.values()])
                chars = np.array([c for (_, _, c) in best_by_labels.values()])
                stepped = self.pred.step(
                    Tensor(np.stack([queue[i][2] for i in parents])), chars)
                queue = [
                    (labels, s, stepped.data[j])
                    for j, (labels, (s, _, _)) in enumerate(best_by_labels.items())
                ]
            ranked = sorted(landed.items(), key=lambda kv: (-kv[1][0], kv[0]))
            cur = [(labels, score, state)
                   for labels, (score, state) in ranked[:beam_size]]
        hyps = [Hypothesis(labels, score) for labels, score, _ in cur]
        return NBestList(hyps)

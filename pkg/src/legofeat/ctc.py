"""CTC loss, alignment oracle, and decoders. Blank is index 0.

The loss is a traced primitive: the forward pass runs the usual
alpha/beta recursions over extended label sequences, vectorized across
the batch and label axis with a plain loop over time, and the backward
pass scatters the closed-form occupancy gradient. Batches of unequal
length are handled by substituting probability-one blank rows at padded
frames, which leaves every sequence's alignment sum unchanged; padded
cells receive zero gradient.
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from . import numcore as nc
from .numcore import ContractError, Tensor

_NEG_INF = -np.inf


class InfeasibleTargetError(ContractError):
    """Target cannot be emitted: too few frames for its labels/repeats."""


def collapse(path: Sequence[int]) -> list[int]:
    """Merge consecutive repeats, then drop blanks."""
    out: list[int] = []
    prev: int | None = None
    for a in path:
        if a != prev and a != 0:
            out.append(int(a))
        prev = a
    return out


def min_frames(target: Sequence[int]) -> int:
    """Fewest frames that can emit ``target``: one per label plus one
    separating blank per adjacent repeat."""
    rep = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + rep


def _validate_targets(targets: list[list[int]], vocab_plus_blank: int) -> None:
    for i, tgt in enumerate(targets):
        for lab in tgt:
            if not 1 <= int(lab) < vocab_plus_blank:
                raise ContractError(
                    f"target {i}: label {lab} outside 1..{vocab_plus_blank - 1}")


def _shift_right(a: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(a, _NEG_INF)
    out[:, k:] = a[:, :-k]
    return out


def _shift_left(a: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(a, _NEG_INF)
    out[:, :-k] = a[:, k:]
    return out


def _ctc_forward_backward(lp: np.ndarray, targets: list[list[int]],
                          t_lens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """lp: [B, T, K] log-probs. Returns (nll [B], occupancy gamma [B, T, K]).

    gamma[b, t] sums to 1 over K at valid frames, 0 at padded ones; the
    loss gradient w.r.t. lp is -gamma.
    """
    b, t_max, k = lp.shape
    u_max = max((len(t) for t in targets), default=0)
    s_max = 2 * u_max + 1

    ext = np.zeros((b, s_max), dtype=np.int64)
    s_lens = np.empty(b, dtype=np.int64)
    for i, tgt in enumerate(targets):
        s_lens[i] = 2 * len(tgt) + 1
        ext[i, 1 : 2 * len(tgt) : 2] = tgt

    # padded frames emit blank with probability one
    lpn = lp.copy()
    frame_valid = np.arange(t_max)[None, :] < t_lens[:, None]
    lpn[~frame_valid] = _NEG_INF
    lpn[~frame_valid, 0] = 0.0

    spos = np.arange(s_max)[None, :]
    in_seq = spos < s_lens[:, None]
    skip = (spos >= 2) & (ext != 0)
    skip[:, 2:] &= ext[:, 2:] != ext[:, :-2]

    idx = np.broadcast_to(ext[:, None, :], (b, t_max, s_max))
    lpe = np.take_along_axis(lpn, idx, axis=2)

    alphas = np.empty((t_max, b, s_max))
    cur = np.full((b, s_max), _NEG_INF)
    cur[:, 0] = lpe[:, 0, 0]
    if s_max > 1:
        cur[:, 1] = np.where(s_lens > 1, lpe[:, 0, 1], _NEG_INF)
    alphas[0] = cur
    for t in range(1, t_max):
        stay = cur
        step = _shift_right(cur, 1)
        jump = np.where(skip, _shift_right(cur, 2), _NEG_INF)
        cur = lpe[:, t] + np.logaddexp(np.logaddexp(stay, step), jump)
        cur = np.where(in_seq, cur, _NEG_INF)
        alphas[t] = cur

    last = np.take_along_axis(cur, (s_lens - 1)[:, None], axis=1)[:, 0]
    prev = np.where(
        s_lens > 1,
        np.take_along_axis(cur, np.maximum(s_lens - 2, 0)[:, None], axis=1)[:, 0],
        _NEG_INF,
    )
    logp = np.logaddexp(last, prev)
    if np.isneginf(logp).any():
        bad = int(np.isneginf(logp).argmax())
        raise InfeasibleTargetError(
            f"sequence {bad}: no alignment has finite probability")

    # backward pass, accumulating occupancy as we go
    gamma = np.zeros_like(lp)
    bidx = np.broadcast_to(np.arange(b)[:, None], (b, s_max))
    skip_from = np.zeros_like(skip)
    skip_from[:, :-2] = skip[:, 2:]
    lpe_safe = np.where(np.isneginf(lpe), 0.0, lpe)

    beta = np.full((b, s_max), _NEG_INF)
    if s_max > 1:
        np.put_along_axis(
            beta, np.maximum(s_lens - 2, 0)[:, None],
            np.where(s_lens > 1, 0.0, _NEG_INF)[:, None], axis=1)
    np.put_along_axis(beta, (s_lens - 1)[:, None], 0.0, axis=1)
    beta = beta + lpe[:, t_max - 1]
    for t in range(t_max - 1, -1, -1):
        if t < t_max - 1:
            stay = beta
            step = _shift_left(beta, 1)
            jump = np.where(skip_from, _shift_left(beta, 2), _NEG_INF)
            beta = lpe[:, t] + np.logaddexp(np.logaddexp(stay, step), jump)
            beta = np.where(in_seq, beta, _NEG_INF)
        ab = alphas[t] + beta
        contrib = np.where(np.isneginf(ab), _NEG_INF,
                           ab - lpe_safe[:, t] - logp[:, None])
        vals = np.exp(contrib)
        np.add.at(gamma, (bidx, t, ext), vals)

    gamma[~frame_valid] = 0.0
    return -logp, gamma


def ctc_nll_from_log_probs(log_probs: Tensor, targets, input_lengths=None) -> Tensor:
    """Per-sequence negative log alignment-sum. log_probs: [B, T, K] (or
    [T, K] for a single sequence); targets: list of label lists (labels in
    1..K-1). Traced: gradients flow to log_probs."""
    lp = log_probs
    single = lp.ndim == 2
    if single:
        lp_arr = lp.data[None]
        targets = [[int(x) for x in targets]]
    else:
        lp_arr = lp.data
        targets = [[int(x) for x in t] for t in targets]
    b, t_max, k = lp_arr.shape
    if len(targets) != b:
        raise ContractError(f"ctc: {b} sequences but {len(targets)} targets")
    _validate_targets(targets, k)
    if input_lengths is None:
        t_lens = np.full(b, t_max, dtype=np.int64)
    else:
        t_lens = np.asarray(input_lengths, dtype=np.int64)
        if t_lens.shape != (b,) or t_lens.min() < 1 or t_lens.max() > t_max:
            raise ContractError("ctc: bad input_lengths")
    for i, tgt in enumerate(targets):
        if t_lens[i] < min_frames(tgt):
            raise InfeasibleTargetError(
                f"sequence {i}: {t_lens[i]} frames cannot emit {len(tgt)} labels "
                f"(needs {min_frames(tgt)})")

    nll, gamma = _ctc_forward_backward(lp_arr, targets, t_lens)
    out = Tensor(nll[0] if single else nll)

    def bwd(g, gamma=gamma, single=single):
        gv = np.asarray(g).reshape(-1)[:, None, None]
        full = -gamma * gv
        return (full[0] if single else full,)

    return nc.emit_op(out, (log_probs,), bwd)


def ctc_loss(logits: Tensor, targets, input_lengths=None) -> Tensor:
    """Mean negative log-probability over the batch, from raw logits."""
    lp = nc.log_softmax(logits, axis=-1)
    nll = ctc_nll_from_log_probs(lp, targets, input_lengths)
    if nll.ndim == 0:
        return nll
    return nc.mean_all(nll)


def ctc_brute_force(log_probs: np.ndarray, target: Sequence[int]) -> float:
    """Exact NLL by enumerating every frame labeling and keeping those
    that collapse to ``target``. Exponential; refuses more than 1e6 paths.
    Returns +inf when no labeling matches."""
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise ContractError("ctc_brute_force: expected [T, K] log-probs")
    t, k = lp.shape
    if k ** t > 1_000_000:
        raise ContractError(f"ctc_brute_force: {k}**{t} paths is too many")
    want = [int(x) for x in target]
    scores = []
    for path in itertools.product(range(k), repeat=t):
        if collapse(path) == want:
            scores.append(sum(lp[i, a] for i, a in enumerate(path)))
    if not scores:
        return np.inf
    return -nc.logsumexp(np.array(scores))


def ctc_greedy(log_probs: np.ndarray) -> list[int]:
    """Best-per-frame labeling, collapsed."""
    lp = np.asarray(log_probs)
    if lp.ndim != 2:
        raise ContractError("ctc_greedy: expected [T, K] log-probs")
    return collapse(np.argmax(lp, axis=1))


def ctc_prefix_beam(log_probs: np.ndarray, beam_size: int) -> list[tuple[tuple[int, ...], float]]:
    """Prefix beam search; scores sum over all alignments kept in the
    beam, so with a wide enough beam they match the brute-force sums.
    Returns (labels, log-prob) pairs, best first; ties break toward the
    lexicographically smaller label sequence."""
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise ContractError("ctc_prefix_beam: expected [T, K] log-probs")
    if beam_size < 1:
        raise ContractError("ctc_prefix_beam: beam_size must be >= 1")
    t_max, k = lp.shape
    # prefix -> (log p ending in blank, log p ending in its last label)
    beam: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, _NEG_INF)}
    for t in range(t_max):
        nxt: dict[tuple[int, ...], list[float, float]] = {}

        def bump(pfx, pb=None, pnb=None):
            cell = nxt.setdefault(pfx, [_NEG_INF, _NEG_INF])
            if pb is not None:
                cell[0] = np.logaddexp(cell[0], pb)
            if pnb is not None:
                cell[1] = np.logaddexp(cell[1], pnb)

        for pfx, (pb, pnb) in beam.items():
            total = np.logaddexp(pb, pnb)
            bump(pfx, pb=total + lp[t, 0])
            if pfx:
                bump(pfx, pnb=pnb + lp[t, pfx[-1]])
            for c in range(1, k):
                src = pb if pfx and pfx[-1] == c else total
                bump(pfx + (c,), pnb=src + lp[t, c])

        ranked = sorted(nxt.items(),
                        key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0]))
        beam = {pfx: (cell[0], cell[1]) for pfx, cell in ranked[:beam_size]}

    out = [(pfx, float(np.logaddexp(pb, pnb))) for pfx, (pb, pnb) in beam.items()]
    out = [(pfx, s) for pfx, s in out if np.isfinite(s)]
    out.sort(key=lambda it: (-it[1], it[0]))
    return out

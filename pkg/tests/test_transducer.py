"""Transducer loss against explicit path enumeration, plus search
properties on a tiny trained decoder."""

import numpy as np
import pytest

from legofeat import numcore as nc
from legofeat.numcore import ParamStore, Tensor
from legofeat.transducer import (NBestList, TransducerDecoder,
                                 transducer_loss,
                                 transducer_nll_from_log_probs)

from oracles import (all_label_sequences, random_log_prob_lattice,
                     transducer_path_sum)


def test_nll_matches_path_enumeration():
    rng = np.random.default_rng(0)
    for trial in range(60):
        t_len = int(rng.integers(1, 5))
        vocab = int(rng.integers(2, 4))
        u_len = int(rng.integers(0, 4))
        target = [int(x) for x in rng.integers(1, vocab, size=u_len)] if vocab > 1 else []
        lp = random_log_prob_lattice(rng, t_len, u_len + 1, vocab)
        fast = float(transducer_nll_from_log_probs(Tensor(lp[None]), [target]).data[0])
        slow = transducer_path_sum(lp, target)
        assert abs(fast - slow) <= 1e-9


def test_partial_normalization_bounded():
    # summing exp(-nll) over every target up to a length cap stays below
    # one: the lattice rows are shared, so the sequence probabilities are
    # a consistent partial distribution
    rng = np.random.default_rng(1)
    t_len, vocab, u_cap = 3, 3, 3
    full = random_log_prob_lattice(rng, t_len, u_cap + 1, vocab)
    total = 0.0
    for target in all_label_sequences(vocab - 1, u_cap):
        lat = full[:, : len(target) + 1, :]
        nll = float(transducer_nll_from_log_probs(Tensor(lat[None]), [list(target)]).data[0])
        total += np.exp(-nll)
    assert total <= 1.0 + 1e-6
    assert total > 0.0


def test_lattice_width_is_validated():
    lp = random_log_prob_lattice(np.random.default_rng(2), 3, 2, 3)
    with pytest.raises(Exception):
        # U+1 axis is 2 but the target needs 3
        transducer_nll_from_log_probs(Tensor(lp[None]), [[1, 2]])


def test_batch_matches_singles():
    rng = np.random.default_rng(3)
    targets = [[1, 2], [2], []]
    lengths = [4, 3, 2]
    u_max = 2
    lattices = [random_log_prob_lattice(rng, 4, u_max + 1, 3) for _ in targets]
    batched = transducer_nll_from_log_probs(
        Tensor(np.stack(lattices)), targets, lengths).data
    for i, tgt in enumerate(targets):
        lat = lattices[i][: lengths[i], : len(tgt) + 1, :]
        single = float(transducer_nll_from_log_probs(Tensor(lat[None]), [tgt]).data[0])
        assert abs(batched[i] - single) <= 1e-12


def test_loss_is_mean_of_softmaxed_nll():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((2, 3, 3, 4))
    targets = [[1, 2], [3]]
    m = logits.max(axis=-1, keepdims=True)
    lp = logits - (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))
    a = float(transducer_loss(Tensor(logits), targets).data)
    b = float(transducer_nll_from_log_probs(Tensor(lp), targets).data.mean())
    assert abs(a - b) <= 1e-12


def _tiny_decoder(seed=0, vocab=3, d_enc=4):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    dec = TransducerDecoder(store, "dec", d_enc=d_enc, vocab=vocab, d_emb=4,
                            d_state=5, d_joint=4, rng=rng)
    return store, dec


def test_greedy_batch_is_padding_invariant():
    store, dec = _tiny_decoder()
    rng = np.random.default_rng(5)
    enc_a = rng.standard_normal((3, 4))
    enc_b = rng.standard_normal((6, 4))
    padded = np.zeros((2, 6, 4))
    padded[0, :3] = enc_a
    padded[1] = enc_b
    both = dec.greedy_batch(Tensor(padded), [3, 6], max_symbols_per_frame=3)
    solo = dec.greedy_batch(Tensor(enc_a[None]), [3], max_symbols_per_frame=3)
    assert both[0] == solo[0]


def _viterbi_alignment_score(dec, enc, labels):
    # best single monotone alignment of ``labels`` over ``enc`` by a plain
    # (t, u) dynamic program over the decoder's own step logits
    t_max = enc.shape[0]
    u_max = len(labels)
    states = [dec.pred.step(dec.pred.initial_state(1),
                            np.zeros(1, dtype=np.int64))]
    for lab in labels:
        states.append(dec.pred.step(states[-1],
                                    np.array([lab], dtype=np.int64)))
    lp = np.zeros((t_max, u_max + 1, dec.vocab + 1))
    for u, state in enumerate(states):
        rep = Tensor(np.broadcast_to(state.data, (t_max, state.shape[1])))
        lp[:, u, :] = nc.log_softmax(dec.joint.step_logits(Tensor(enc), rep)).data
    best = np.full((t_max + 1, u_max + 1), -np.inf)
    best[0, 0] = 0.0
    for t in range(t_max):
        for u in range(u_max + 1):
            if not np.isfinite(best[t, u]):
                continue
            best[t + 1, u] = max(best[t + 1, u], best[t, u] + lp[t, u, 0])
            if u < u_max:
                best[t, u + 1] = max(best[t, u + 1],
                                     best[t, u] + lp[t, u, labels[u]])
    return best[t_max, u_max]


def test_beam_scores_are_alignment_scores():
    store, dec = _tiny_decoder(seed=1)
    rng = np.random.default_rng(6)
    enc = rng.standard_normal((5, 4))
    nbest = dec.beam(Tensor(enc), beam_size=8, max_symbols_per_frame=8)
    assert isinstance(nbest, NBestList)
    scores = [h.score for h in nbest]
    assert scores == sorted(scores, reverse=True)
    seen = set()
    for hyp in nbest:
        labels = tuple(hyp.labels)
        assert labels not in seen
        seen.add(labels)
        assert all(1 <= lab <= dec.vocab for lab in labels)
        assert hyp.score <= 0.0
        # every reported score is one alignment's log-probability, so the
        # best alignment bounds it from above
        assert hyp.score <= _viterbi_alignment_score(dec, enc, labels) + 1e-9


def test_beam_honors_label_cap():
    store, dec = _tiny_decoder(seed=3)
    rng = np.random.default_rng(8)
    enc = rng.standard_normal((6, 4))
    nbest = dec.beam(Tensor(enc), beam_size=6, max_symbols_per_frame=4,
                     max_labels=2)
    assert nbest.hyps
    assert all(len(h.labels) <= 2 for h in nbest)


def test_beam_one_best_never_worse_than_greedy():
    # the beam searches a superset of greedy's path, so its top score must
    # be at least greedy's own path score
    store, dec = _tiny_decoder(seed=2)
    rng = np.random.default_rng(7)
    for _ in range(5):
        enc = rng.standard_normal((4, 4))
        greedy = dec.greedy_batch(Tensor(enc[None]), [4], max_symbols_per_frame=2)[0]
        nbest = dec.beam(Tensor(enc), beam_size=8, max_symbols_per_frame=2)
        labels = [list(h.labels) for h in nbest]
        if list(greedy) in labels:
            g_score = nbest.hyps[labels.index(list(greedy))].score
            assert nbest.best().score >= g_score - 1e-12

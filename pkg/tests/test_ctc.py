"""CTC loss against independent enumeration, plus decoder properties."""

import numpy as np
import pytest

from legofeat.ctc import (InfeasibleTargetError, collapse, ctc_brute_force,
                          ctc_greedy, ctc_loss, ctc_nll_from_log_probs,
                          ctc_prefix_beam, min_frames)
from legofeat.numcore import Tensor

from oracles import (all_label_sequences, collapse_alignment, ctc_path_sum,
                     random_log_prob_lattice)


def test_collapse_examples():
    assert collapse([0, 1, 1, 0, 1, 2, 2, 0]) == [1, 1, 2]
    assert collapse([0, 0, 0]) == []
    assert collapse([3]) == [3]


def test_min_frames_counts_repeat_separators():
    assert min_frames([1, 2, 3]) == 3
    assert min_frames([1, 1]) == 3
    assert min_frames([]) == 0


def test_nll_matches_enumeration_small_grid():
    rng = np.random.default_rng(0)
    for trial in range(50):
        t_len = int(rng.integers(1, 6))
        vocab = int(rng.integers(2, 4))
        u_len = int(rng.integers(0, 4))
        target = [int(x) for x in rng.integers(1, vocab, size=u_len)] if vocab > 1 else []
        lp = random_log_prob_lattice(rng, t_len, vocab)
        slow = ctc_path_sum(lp, target)
        if np.isinf(slow):
            with pytest.raises(InfeasibleTargetError):
                ctc_nll_from_log_probs(Tensor(lp[None]), [target])
        else:
            fast = float(ctc_nll_from_log_probs(Tensor(lp[None]), [target]).data[0])
            assert abs(fast - slow) <= 1e-9


def test_brute_force_matches_enumeration():
    rng = np.random.default_rng(1)
    for trial in range(30):
        t_len = int(rng.integers(1, 5))
        vocab = int(rng.integers(2, 4))
        target = [int(x) for x in rng.integers(1, vocab, size=rng.integers(0, 3))]
        lp = random_log_prob_lattice(rng, t_len, vocab)
        ours = ctc_brute_force(lp, target)
        ref = ctc_path_sum(lp, target)
        if np.isinf(ref):
            assert np.isinf(ours)
        else:
            assert abs(ours - ref) <= 1e-9


def test_infeasible_target_refused():
    lp = random_log_prob_lattice(np.random.default_rng(2), 2, 3)
    # three labels cannot fit in two frames
    with pytest.raises(InfeasibleTargetError):
        ctc_nll_from_log_probs(Tensor(lp[None]), [[1, 2, 1]])
    assert np.isinf(ctc_brute_force(lp, [1, 2, 1]))


def test_normalization_over_all_targets():
    rng = np.random.default_rng(3)
    for t_len in (1, 2, 3, 4):
        vocab = 3
        lp = random_log_prob_lattice(rng, t_len, vocab)
        total = 0.0
        for target in all_label_sequences(vocab - 1, t_len):
            try:
                nll = float(ctc_nll_from_log_probs(Tensor(lp[None]),
                                                   [list(target)]).data[0])
            except InfeasibleTargetError:
                continue
            total += np.exp(-nll)
        assert abs(total - 1.0) <= 1e-6


def test_loss_applies_log_softmax():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((1, 4, 3))
    m = logits.max(axis=-1, keepdims=True)
    lp = logits - (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))
    a = float(ctc_loss(Tensor(logits), [[1, 2]]).data)
    b = float(ctc_nll_from_log_probs(Tensor(lp), [[1, 2]]).data[0])
    assert abs(a - b) <= 1e-12


def test_batch_matches_singles():
    rng = np.random.default_rng(5)
    lps = [random_log_prob_lattice(rng, 5, 4) for _ in range(3)]
    targets = [[1, 2], [3], []]
    lengths = [5, 4, 3]
    padded = np.stack(lps)
    batched = ctc_nll_from_log_probs(Tensor(padded), targets, lengths).data
    for i in range(3):
        single = ctc_nll_from_log_probs(Tensor(lps[i][: lengths[i]][None]),
                                        [targets[i]]).data[0]
        assert abs(batched[i] - single) <= 1e-12


def test_greedy_collapses_argmax():
    lp = np.log(np.array([
        [0.1, 0.8, 0.1],
        [0.1, 0.8, 0.1],
        [0.8, 0.1, 0.1],
        [0.1, 0.1, 0.8],
    ]))
    assert ctc_greedy(lp) == [1, 2]


def test_prefix_beam_recovers_exact_posterior_on_tiny_input():
    # with a beam as large as the full prefix set the scores must match
    # the exact label-sequence posteriors from enumeration
    rng = np.random.default_rng(6)
    lp = random_log_prob_lattice(rng, 3, 3)
    beam = ctc_prefix_beam(lp, beam_size=64)
    scores = dict(beam)
    for target in all_label_sequences(2, 3):
        ref = ctc_path_sum(lp, target)
        if np.isinf(ref):
            assert target not in scores
        else:
            assert abs(scores[tuple(target)] - (-ref)) <= 1e-9


def test_prefix_beam_sorted_and_tie_stable():
    rng = np.random.default_rng(7)
    lp = random_log_prob_lattice(rng, 4, 3)
    beam = ctc_prefix_beam(lp, beam_size=8)
    values = [s for _, s in beam]
    assert values == sorted(values, reverse=True)
    # uniform lattice forces exact ties; order must fall back to the label
    # sequence itself
    flat = np.full((2, 3), np.log(1.0 / 3.0))
    tied = ctc_prefix_beam(flat, beam_size=4)
    tie_groups = {}
    for lab, s in tied:
        tie_groups.setdefault(round(s, 12), []).append(lab)
    for group in tie_groups.values():
        assert group == sorted(group)


def test_target_validation():
    lp = random_log_prob_lattice(np.random.default_rng(8), 3, 3)
    with pytest.raises(Exception):
        ctc_nll_from_log_probs(Tensor(lp[None]), [[0]])
    with pytest.raises(Exception):
        ctc_nll_from_log_probs(Tensor(lp[None]), [[3]])


def test_collapse_alignment_oracle_agrees_with_package():
    rng = np.random.default_rng(9)
    for _ in range(200):
        path = rng.integers(0, 4, size=rng.integers(0, 9))
        assert tuple(collapse(path)) == collapse_alignment(path)

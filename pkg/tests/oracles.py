"""Independent reference implementations used to cross-check the fast
dynamic-programming losses. Everything here enumerates explicitly and
shares no code with the package: its own collapse rule, its own path
walks, numpy's logaddexp for the sums."""

import itertools

import numpy as np


def collapse_alignment(path):
    """CTC collapse: merge repeats, then drop blanks (label 0)."""
    out = []
    prev = None
    for s in path:
        if s != prev and s != 0:
            out.append(int(s))
        prev = s
    return tuple(out)


def ctc_path_sum(log_probs: np.ndarray, target) -> float:
    """Negative log of the summed probability of every length-T alignment
    string that collapses to ``target``. Enumerates all (V)^T strings."""
    t_len, vocab = log_probs.shape
    target = tuple(int(x) for x in target)
    total = -np.inf
    for path in itertools.product(range(vocab), repeat=t_len):
        if collapse_alignment(path) != target:
            continue
        score = sum(log_probs[t, s] for t, s in enumerate(path))
        total = np.logaddexp(total, score)
    return -total


def transducer_path_sum(log_probs: np.ndarray, target) -> float:
    """Negative log marginal over all monotonic emit/advance paths through
    a [T, U+1, V] lattice, by explicit recursive walk. Blank is label 0;
    every path ends with the blank at (T-1, U)."""
    t_len, u1, _ = log_probs.shape
    target = [int(x) for x in target]
    u_len = len(target)
    assert u1 == u_len + 1
    scores = []

    def walk(t, u, acc):
        if t == t_len - 1 and u == u_len:
            scores.append(acc + log_probs[t, u, 0])
            return
        if t < t_len - 1:
            walk(t + 1, u, acc + log_probs[t, u, 0])
        if u < u_len:
            walk(t, u + 1, acc + log_probs[t, u, target[u]])

    walk(0, 0, 0.0)
    if not scores:
        return np.inf
    return -np.logaddexp.reduce(np.array(scores))


def all_label_sequences(vocab: int, max_len: int):
    """Every label sequence over [1, vocab] with length 0..max_len."""
    for length in range(max_len + 1):
        yield from itertools.product(range(1, vocab + 1), repeat=length)


def random_log_prob_lattice(rng, *shape):
    """Normalized log probabilities over the trailing axis."""
    logits = rng.standard_normal(shape)
    m = logits.max(axis=-1, keepdims=True)
    z = m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    return logits - z


def edit_distance_dp(a, b) -> int:
    """Full-matrix Levenshtein, kept deliberately naive."""
    a, b = list(a), list(b)
    d = np.zeros((len(a) + 1, len(b) + 1), dtype=np.int64)
    d[:, 0] = np.arange(len(a) + 1)
    d[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1,
                          d[i - 1, j - 1] + cost)
    return int(d[len(a), len(b)])

"""High-precision reference implementations used as test oracles."""

import mpmath as mp
import numpy as np

mp.mp.dps = 50


def _log_softmax_entry(row, j):
    return row[j] - mp.log(mp.fsum(mp.exp(v) for v in row))


def mp_logprob(vocab, big, start, text):
    ids = [vocab.index(t) for t in text.split()]
    lp = _log_softmax_entry(start, ids[0])
    for a, b in zip(ids, ids[1:]):
        lp += _log_softmax_entry(big[a], b)
    return lp


def mp_dpo_loss(vocab, policy, reference, pairs, beta):
    """Batch-mean DPO loss; ``policy``/``reference`` are (bigram, start) in mpf lists."""
    total = mp.mpf(0)
    for p in pairs:
        margin = (mp_logprob(vocab, *policy, p.chosen) - mp_logprob(vocab, *reference, p.chosen)) - (
            mp_logprob(vocab, *policy, p.rejected) - mp_logprob(vocab, *reference, p.rejected))
        total += mp.log(1 + mp.exp(-mp.mpf(beta) * margin))
    return total / len(pairs)


def _to_mp(model):
    big = [[mp.mpf(float(v)) for v in row] for row in model.bigram_logits]
    start = [mp.mpf(float(v)) for v in model.start_logits]
    return big, start


def mp_dpo_grad(policy, reference, pairs, beta, h=mp.mpf("1e-20")):
    """Central differences of :func:`mp_dpo_loss` at 50 digits; returns float64 arrays."""
    vocab = list(policy.vocabulary)
    big, start = _to_mp(policy)
    ref = _to_mp(reference)
    g_big = np.zeros(policy.bigram_logits.shape)
    g_start = np.zeros(policy.start_logits.shape)
    for i in range(len(big)):
        for j in range(len(big[i])):
            old = big[i][j]
            big[i][j] = old + h
            lp = mp_dpo_loss(vocab, (big, start), ref, pairs, beta)
            big[i][j] = old - h
            lm = mp_dpo_loss(vocab, (big, start), ref, pairs, beta)
            big[i][j] = old
            g_big[i, j] = float((lp - lm) / (2 * h))
    for j in range(len(start)):
        old = start[j]
        start[j] = old + h
        lp = mp_dpo_loss(vocab, (big, start), ref, pairs, beta)
        start[j] = old - h
        lm = mp_dpo_loss(vocab, (big, start), ref, pairs, beta)
        start[j] = old
        g_start[j] = float((lp - lm) / (2 * h))
    return g_big, g_start


def max_rel_err(a, b, floor=1e-8):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))

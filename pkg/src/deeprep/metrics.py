"""Corpus BLEU-4 and token / sequence accuracy."""

from __future__ import annotations

import math
import warnings
from collections import Counter
from typing import Sequence

Seq = Sequence[int]


def ngrams(seq: Seq, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(hyps: Sequence[Seq], refs: Sequence[Seq], max_n: int = 4) -> float:
    """Corpus-level BLEU with clipped n-gram precisions and a brevity penalty, on a 0-100 scale."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not refs:
        raise ValueError("empty corpus")
    hyp_len = sum(len(h) for h in hyps)
    ref_len = sum(len(r) for r in refs)
    if hyp_len == 0:
        warnings.warn("all hypotheses are empty; BLEU is 0", RuntimeWarning, stacklevel=2)
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        matched = total = 0
        for h, r in zip(hyps, refs):
            hc = ngrams(h, n)
            rc = ngrams(r, n)
            matched += sum(min(c, rc[g]) for g, c in hc.items())
            total += sum(hc.values())
        if matched == 0:
            return 0.0
        log_p += math.log(matched / total) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def token_accuracy(hyps: Sequence[Seq], refs: Sequence[Seq]) -> float:
    """Position-wise matches over the common prefix length, divided by the longer length of each pair."""
    correct = total = 0
    for h, r in zip(hyps, refs):
        correct += sum(a == b for a, b in zip(h, r))
        total += max(len(h), len(r))
    return correct / total if total else 1.0


def sequence_accuracy(hyps: Sequence[Seq], refs: Sequence[Seq]) -> float:
    if not refs:
        raise ValueError("empty corpus")
    return sum(tuple(h) == tuple(r) for h, r in zip(hyps, refs)) / len(refs)


def metrics(hyps: Sequence[Seq], refs: Sequence[Seq]) -> dict[str, float]:
    if not refs:
        raise ValueError("empty corpus")
    return {
        "token_accuracy": token_accuracy(hyps, refs),
        "sequence_accuracy": sequence_accuracy(hyps, refs),
        "bleu4": corpus_bleu(hyps, refs),
    }

"""Evaluation metrics: rank AUC, BLEU-n, Distinct-n, perplexity, HitRate@K."""
from __future__ import annotations

import math
from collections import Counter
from collections.abc import Sequence

import numpy as np
from scipy.stats import rankdata

from .retrieval import hitrate_from_ranks


class MetricError(ValueError):
    pass


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.size == 0 or s.shape != y.shape:
        raise MetricError("scores and labels must be non-empty and aligned")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def pairwise_auc(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> float:
    """AUC of paired comparisons: P(pos > neg) + 0.5 P(pos == neg)."""
    a = np.asarray(pos_scores, dtype=np.float64)
    b = np.asarray(neg_scores, dtype=np.float64)
    if a.size == 0 or a.shape != b.shape:
        raise MetricError("paired scores must be non-empty and aligned")
    return float(np.mean((a > b) + 0.5 * (a == b)))


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]], n: int = 4) -> float:
    """Corpus BLEU-n: geometric mean of clipped 1..n-gram precisions times brevity penalty."""
    if not candidates or len(candidates) != len(references):
        raise MetricError("candidates and references must be non-empty and aligned")
    if not 1 <= n <= 4:
        raise MetricError("BLEU order must be in 1..4")
    match = [0] * n
    total = [0] * n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for k in range(1, n + 1):
            cn, rn = _ngrams(cand, k), _ngrams(ref, k)
            match[k - 1] += sum(min(c, rn[g]) for g, c in cn.items())
            total[k - 1] += max(len(cand) - k + 1, 0)
    if min(match) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(match, total)) / n
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(log_p)


def distinct(texts: Sequence[Sequence[str]], n: int = 2) -> float:
    """Unique n-grams over total n-grams across all texts."""
    grams: list[tuple] = []
    for t in texts:
        grams.extend(tuple(t[i:i + n]) for i in range(len(t) - n + 1))
    if not grams:
        raise MetricError(f"no {n}-grams")
    return len(set(grams)) / len(grams)


def perplexity(nll_per_token: float) -> float:
    return math.exp(nll_per_token)


def hitrate(ranks: Sequence[int], k: int = 100) -> float:
    return hitrate_from_ranks(ranks, k)

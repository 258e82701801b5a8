"""Zero-shot plausibility ranking with a pretrained language model and no task head.

A candidate outcome is scored by the mean log-probability (natural log) of its own
tokens given the context, so candidates of different lengths compare fairly.
"""
from __future__ import annotations

import csv
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import torch

from .model import ContractError, Transformer, make_batch
from .text import Vocabulary, encode_ids


def _pair_sequence(model: Transformer, vocab: Vocabulary, bidir: str, candidate: str, ar_prefix: str):
    prefix = vocab.encode_text(ar_prefix)
    cand = vocab.encode_text(candidate)
    # delimiters never count toward the normalizer; unknown words do
    specials = set(vocab.special_ids) - {vocab.unk}
    cand_slots = [j for j, t in enumerate(cand) if t not in specials]
    if not cand_slots:
        raise ContractError("candidate has no content tokens")
    seq = encode_ids([vocab.encode_text(bidir)], prefix + cand, vocab, model.cfg.max_len)
    start = seq.eos_index - len(cand)  # first candidate token
    return seq, [start + j for j in cand_slots]


@torch.no_grad()
def normalized_logliks(model: Transformer, vocab: Vocabulary, contexts: Sequence[str],
                       candidates: Sequence[str], ar_prefix: str = "", batch_size: int = 64) -> np.ndarray:
    """Vectorized :func:`normalized_loglik` over aligned (context, candidate) lists."""
    if len(contexts) != len(candidates):
        raise ValueError("contexts and candidates differ in length")
    built = [_pair_sequence(model, vocab, b, c, ar_prefix) for b, c in zip(contexts, candidates)]
    out = np.zeros(len(built))
    for lo in range(0, len(built), batch_size):
        chunk = built[lo:lo + batch_size]
        batch = make_batch([s for s, _ in chunk], vocab.pad)
        logp = model.run(batch, want_logits=True).logits.double().log_softmax(-1)
        for b, (_, slots) in enumerate(chunk):
            idx = torch.tensor(slots)
            tok = batch.ids[b, idx]
            out[lo + b] = float(logp[b, idx - 1, tok].mean())
    return out


def normalized_loglik(model: Transformer, vocab: Vocabulary, bidir_text: str, candidate: str,
                      ar_prefix: str = "") -> float:
    """Mean natural-log probability of the candidate's content tokens.

    ``ar_prefix`` is conditioning text placed before the candidate on the generated
    side; its tokens are context, not scored.
    """
    return float(normalized_logliks(model, vocab, [bidir_text], [candidate], ar_prefix)[0])


def rank_events(model: Transformer, vocab: Vocabulary, bidir_text: str, candidates: Sequence[str],
                ar_prefix: str = "") -> list[tuple[str, float]]:
    """Candidates with scores, best first; equal scores keep input order."""
    if len(candidates) < 2:
        raise ContractError("ranking needs at least two candidates")
    scores = normalized_logliks(model, vocab, [bidir_text] * len(candidates), candidates, ar_prefix)
    order = sorted(range(len(candidates)), key=lambda i: -scores[i])
    return [(candidates[i], float(scores[i])) for i in order]


def write_ranking(path: str | Path, ranking: Sequence[tuple[str, float]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["candidate", "score", "rank"])
        for r, (c, s) in enumerate(ranking, start=1):
            w.writerow([c, repr(s), r])

"""Pretraining examples (span infilling and whole-sentence generation) and the scoring head."""
from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import torch

from .model import ContractError, ModelConfig, Transformer, build_model, lm_loss, make_batch
from .text import MASK, EncodedSequence, Vocabulary, encode_ids
from .training import fit

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    mask_ratio: float = 0.15
    mean_span: float = 3.0
    infill_weight: float = 0.5
    batch_size: int = 32
    steps: int = 2000
    lr: float = 1e-3
    seed: int = 0
    max_len: int = 256

    def __post_init__(self) -> None:
        if not (0 <= self.mask_ratio < 1 and 0 <= self.infill_weight <= 1):
            raise ValueError("ratios must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def make_infilling_example(
    tokens: Sequence,
    rng: np.random.Generator,
    mask_token=MASK,
    ratio: float = 0.15,
    mean_span: float = 3.0,
    whole: bool = False,
    spans: Sequence[tuple[int, int]] | None = None,
) -> tuple[list, list]:
    """Return ``(source, target)``: source has each masked span collapsed to one mask token,
    target is always the full sentence.

    ``whole=True`` masks the entire sentence (plain generation).  ``spans`` overrides
    sampling with explicit half-open ``(start, end)`` ranges.
    """
    tokens = list(tokens)
    n = len(tokens)
    if whole:
        return [mask_token], tokens
    masked = np.zeros(n, dtype=bool)
    if spans is not None:
        for a, b in spans:
            masked[a:b] = True
    elif ratio > 0:
        goal = max(1, int(round(ratio * n)))
        attempts = 0
        while masked.sum() < goal and attempts < 10 * n:
            attempts += 1
            length = min(int(rng.geometric(1.0 / mean_span)), goal - int(masked.sum()))
            start = int(rng.integers(0, n - length + 1))
            masked[start:start + length] = True
    source = []
    for i, tok in enumerate(tokens):
        if not masked[i]:
            source.append(tok)
        elif i == 0 or not masked[i - 1]:
            source.append(mask_token)
    return source, tokens


def pretrain_example(ids: Sequence[int], vocab: Vocabulary, rng: np.random.Generator,
                     cfg: PretrainConfig) -> EncodedSequence:
    whole = rng.random() >= cfg.infill_weight
    src, tgt = make_infilling_example(ids, rng, vocab.mask, cfg.mask_ratio, cfg.mean_span, whole)
    limit = (cfg.max_len - 4) // 2
    return encode_ids([src[:limit]], tgt[:limit], vocab, cfg.max_len)


def lm_batch_loss(model: Transformer, seqs: Sequence[EncodedSequence], vocab: Vocabulary,
                  inj=None, n_prompts: int | Sequence[int] = 0) -> torch.Tensor:
    batch = make_batch(seqs, vocab.pad, n_prompts)
    tr = model.run(batch, inj, want_logits=True)
    return lm_loss(tr.logits, batch.ids, batch.loss_mask)


def pretrain(
    corpus: Sequence[Sequence[int]],
    vocab: Vocabulary,
    model_cfg: ModelConfig,
    cfg: PretrainConfig = PretrainConfig(),
    model: Transformer | None = None,
) -> tuple[Transformer, list[float]]:
    """Train on a mix of span infilling and whole-sentence generation.

    ``corpus`` holds tokenized sentences (length >= 4 for infilling).
    """
    if model is None:
        model = build_model(model_cfg, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    corpus = [list(s) for s in corpus if len(s) >= 4]
    if not corpus:
        raise ValueError("corpus has no sentence of length >= 4")

    def step_loss(_t: int) -> torch.Tensor:
        pick = rng.integers(0, len(corpus), cfg.batch_size)
        seqs = [pretrain_example(corpus[i], vocab, rng, cfg) for i in pick]
        return lm_batch_loss(model, seqs, vocab)

    model.train()
    curve = fit(model.parameters(), step_loss, cfg.steps, cfg.lr)
    model.eval()
    return model, curve


def heldout_nll(model: Transformer, corpus: Sequence[Sequence[int]], vocab: Vocabulary,
                batch_size: int = 64) -> float:
    """Mean per-token NLL of whole-sentence generation on held-out sentences."""
    total, count = 0.0, 0
    seqs = [encode_ids([[vocab.mask]], s, vocab, model.cfg.max_len) for s in corpus]
    with torch.no_grad():
        for i in range(0, len(seqs), batch_size):
            chunk = seqs[i:i + batch_size]
            batch = make_batch(chunk, vocab.pad)
            tr = model.run(batch, want_logits=True)
            total += float(lm_loss(tr.logits, batch.ids, batch.loss_mask, reduction="sum"))
            count += int(batch.loss_mask[:, 1:].sum())
    return total / count


def head_probs(model: Transformer, seqs: Sequence[EncodedSequence], vocab: Vocabulary,
               exit_layer: int | None = None) -> torch.Tensor:
    """Positive-class probability from the 2-class head on the [EOS] output."""
    batch = make_batch(seqs, vocab.pad)
    if (batch.eos < 0).any():
        raise ContractError("scoring sequence has no [EOS]")
    tr = model.run(batch, exit_layer=exit_layer)
    return model.class_logits(tr.out, batch.eos).softmax(-1)[:, 1]


def score(model: Transformer, seqs: Sequence[EncodedSequence], vocab: Vocabulary,
          state=None, batch_size: int = 128) -> np.ndarray:
    """P(positive) per sequence, via the model's own head or a tuning state."""
    out = []
    with torch.no_grad():
        for i in range(0, len(seqs), batch_size):
            chunk = seqs[i:i + batch_size]
            if state is None:
                out.append(head_probs(model, chunk, vocab))
            else:
                from .adaptation import state_probs

                out.append(state_probs(model, state, chunk, vocab))
    return torch.cat(out).double().numpy() if out else np.zeros(0)

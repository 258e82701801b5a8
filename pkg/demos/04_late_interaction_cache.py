"""
Serving with cached segments
============================

The lower layers see one segment at a time, so a user's profile and past events
can be computed once and reused across requests. Only the top few layers look
at everything together.
"""

import time

import torch

from textrec.dataset import build_task_vocab
from textrec.late import LateInteractionConfig, LateInteractionScorer, segmented_sequences, single_pass_logits
from textrec.model import ModelConfig, build_model
from textrec.objectives import score
from textrec.synthetic import WorldSpec, generate_logs
from textrec.text import encode_record

torch.set_num_threads(1)
data = generate_logs(WorldSpec(seed=2), n_users=100, n_events=400, n_corpus=100)
vocab = build_task_vocab(data)
model = build_model(ModelConfig(n_layers=12, n_heads=4, d_model=64, vocab_size=len(vocab)))
records = data.ctr_test[:50]

cfg = LateInteractionConfig(n_layers=12, interaction_layers=3)
scorer = LateInteractionScorer(model, vocab, cfg)

# the cached path and the single-pass training path compute the same logits
want = single_pass_logits(model, segmented_sequences(records, vocab), vocab, cfg.prefix_layers)
worst = max((scorer.logits(r)[0] - w).abs().max().item() for r, w in zip(records, want))
print(f"largest logit difference: {worst:.2e}")


def timed(fn):
    t0 = time.perf_counter()
    for r in records:
        fn(r)
    return (time.perf_counter() - t0) / len(records) * 1e3


# item text is shared across users, so candidate segments are cached too
served = LateInteractionScorer(model, vocab, LateInteractionConfig(n_layers=12, cache_candidate=True))
print(f"cold cache  {timed(served.predict):6.2f} ms/request")
print(f"warm cache  {timed(served.predict):6.2f} ms/request, {served.cache.hits} hits so far")

mono = timed(lambda r: score(model, [encode_record(r, "score", vocab)], vocab))
print(f"monolithic  {mono:6.2f} ms/request")

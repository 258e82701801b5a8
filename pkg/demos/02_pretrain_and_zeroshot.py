"""
Pretraining on click sessions, then ranking without any labels
==============================================================

We sample a small synthetic world, pretrain the language model on its session
text, and ask which of two items a user is more likely to click next. No click
labels are used: a candidate's score is the mean log-probability of its words.
"""

import time

import numpy as np
import torch

from textrec.dataset import build_task_vocab
from textrec.metrics import pairwise_auc
from textrec.model import ModelConfig
from textrec.objectives import PretrainConfig, heldout_nll, pretrain
from textrec.synthetic import WorldSpec, generate_logs
from textrec.zeroshot import normalized_logliks, rank_events

torch.set_num_threads(1)

data = generate_logs(WorldSpec(seed=0), n_users=300, n_corpus=3000, n_pairs=200)
vocab = build_task_vocab(data)
print(len(data.corpus), "corpus lines, vocabulary of", len(vocab))
print("example line:", data.corpus[0])

corpus = [vocab.encode_text(s) for s in data.corpus]
train, held = corpus[:-200], corpus[-200:]
cfg = ModelConfig(n_layers=4, n_heads=4, d_model=64, vocab_size=len(vocab))

t0 = time.time()
model, curve = pretrain(train, vocab, cfg, PretrainConfig(steps=600, lr=1e-3))
print(f"pretrained in {time.time() - t0:.0f}s, last loss {np.mean(curve[-50:]):.3f}")
print(f"held-out perplexity {np.exp(heldout_nll(model, held, vocab)):.1f} (uniform would be {len(vocab)})")

# one hand-made question
ctx, liked, other = data.preference_pairs[0]
print(ctx)
for cand, s in rank_events(model, vocab, ctx, [liked, other], ar_prefix="also clicks"):
    print(f"  {s:8.3f}  {cand}")

# and the whole preference set: liked-category item against an unliked one
ctxs = [c for c, _, _ in data.preference_pairs]
a = normalized_logliks(model, vocab, ctxs, [p for _, p, _ in data.preference_pairs], "also clicks")
b = normalized_logliks(model, vocab, ctxs, [o for _, _, o in data.preference_pairs], "also clicks")
print(f"preference AUC {pairwise_auc(a, b):.3f} (0.5 is chance)")

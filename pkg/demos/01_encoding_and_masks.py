"""
Turning behavior into text, and text into a masked sequence
===========================================================

A click log becomes plain sentences. The sentences are split into a
bidirectional block (what we know) and an autoregressive block (what we score or
generate), and one attention mask serves both.
"""

import numpy as np

from textrec.model import build_seq2seq_mask
from textrec.text import (AR, BIDIR, BehaviorRecord, Event, Item, build_vocab, encode_record,
                          load_templates, render_task_text, segment_split)

record = BehaviorRecord(
    user={"age": "age group 2", "city": "city tier 1"},
    events=[Event("clicks", "shoes", "rugged boots", "yesterday", 1.0),
            Event("purchases", "tents", "compact tarp", "today", 2.0)],
    candidate=Item("i7", "yoga", "silky mat"),
)

# every task is a template; scoring puts the candidate on the generated side
bidir, ar = render_task_text(record, "score")
print("bidirectional:", bidir)
print("generated    :", ar)

# a vocabulary built from the rendered text plus the template wording
templates = [v for k, v in sorted(load_templates().items()) if k != "version"]
vocab = build_vocab([bidir, ar] + templates, max_size=500)
seq = encode_record(record, "score", vocab, max_len=128)
print(len(seq), "tokens,", int((seq.region == BIDIR).sum()), "bidirectional,", int((seq.region == AR).sum()), "generated")
print(vocab.decode(seq.ids))

# row i says which tokens position i may look at
mask = build_seq2seq_mask(seq)
n_b = int((seq.region == BIDIR).sum())
print("bidirectional rows see the generated side:", bool(mask[:n_b, n_b:].any()))
print("generated rows see the future:", bool(np.triu(mask[n_b:, n_b:], 1).any()))

# split-stage serving cuts the same text into reusable pieces
for k, piece in enumerate(segment_split(record), start=1):
    print(f"segment {k}: {piece}")

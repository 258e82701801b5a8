"""
Four ways to adapt one frozen model
===================================

Fine-tuning copies every weight. Prompt tuning learns a few input vectors and a
head. Option tuning reuses the last prompts as the class weights, and the
option-adapter variant adds a small residual FFN per layer. The base checkpoint
never changes for the last three, and one batch can mix all of them.
"""

import hashlib
import tempfile
from pathlib import Path

import numpy as np
import torch

from textrec.adaptation import TuneConfig, mixed_task_inference, state_probs, trainable_fraction, tune
from textrec.checkpoint import save_checkpoint
from textrec.dataset import build_task_vocab
from textrec.metrics import auc
from textrec.model import ModelConfig
from textrec.objectives import PretrainConfig, pretrain
from textrec.synthetic import WorldSpec, generate_logs
from textrec.text import encode_record

torch.set_num_threads(1)
data = generate_logs(WorldSpec(seed=1), n_users=300, n_events=1500, n_corpus=2000)
vocab = build_task_vocab(data)
base, _ = pretrain([vocab.encode_text(s) for s in data.corpus], vocab,
                   ModelConfig(n_layers=4, n_heads=16, d_model=64, vocab_size=len(vocab)),
                   PretrainConfig(steps=400))

tr = [encode_record(r, "score", vocab) for r in data.ctr_train]
te = [encode_record(r, "score", vocab) for r in data.ctr_test]
y, y_test = [r.label for r in data.ctr_train], [r.label for r in data.ctr_test]

tmp = Path(tempfile.mkdtemp())
save_checkpoint(base, tmp / "base.ckpt")
before = hashlib.sha256((tmp / "base.ckpt").read_bytes()).hexdigest()

states = {}
for method in ("fine", "prompt", "option", "option_adapter"):
    state, curve = tune(base, tr, y, method, vocab, TuneConfig(steps=200, seed=0))
    states[method] = state
    a = auc(state_probs(base, state, te, vocab).numpy(), y_test)
    print(f"{method:15s} AUC {a:.3f}  trainable {100 * trainable_fraction(state, base):6.2f}%  "
          f"loss {np.mean(curve[:20]):.3f} -> {np.mean(curve[-20:]):.3f}")

save_checkpoint(base, tmp / "base.ckpt")
print("base unchanged:", hashlib.sha256((tmp / "base.ckpt").read_bytes()).hexdigest() == before)

# one forward pass, three tasks, one copy of the base weights
items = [("prompt", te[0]), ("option", te[1]), ("option_adapter", te[2]), ("unknown", te[3])]
for (task, _), out in zip(items, mixed_task_inference(base, states, items, vocab)):
    print(task, out)

"""
Making a small model smaller
============================

A pretrained teacher is distilled into a student with shared layers and a
narrow embedding table, then we prune, quantize and try exiting early.
"""

import numpy as np
import torch
import torch.nn.functional as F

from textrec.compression import (PruneSchedule, dequantized_copy, distill, early_exit_infer, exit_weights,
                                 prune, quantize_model, sparsity_report)
from textrec.dataset import build_task_vocab
from textrec.metrics import auc
from textrec.model import ModelConfig, make_batch, param_count
from textrec.objectives import PretrainConfig, heldout_nll, pretrain, score
from textrec.synthetic import WorldSpec, generate_logs
from textrec.text import encode_record

torch.set_num_threads(1)
data = generate_logs(WorldSpec(seed=0), n_users=300, n_events=1500, n_corpus=2000)
vocab = build_task_vocab(data)
corpus = [vocab.encode_text(s) for s in data.corpus]
train, held = corpus[:-100], corpus[-100:]

teacher_cfg = ModelConfig(n_layers=4, n_heads=4, d_model=64, vocab_size=len(vocab))
teacher, _ = pretrain(train, vocab, teacher_cfg, PretrainConfig(steps=400))
student_cfg = ModelConfig(n_layers=4, n_heads=4, d_model=64, d_emb=32, share_layers=True, vocab_size=len(vocab))
student, _ = distill(teacher, student_cfg, train, vocab, PretrainConfig(steps=300))
print(f"teacher {param_count(teacher_cfg)} params, ppl {np.exp(heldout_nll(teacher, held, vocab)):.1f}")
print(f"student {param_count(student_cfg)} params, ppl {np.exp(heldout_nll(student, held, vocab)):.1f}")

# prune the teacher to 80% while training it on clicks
seqs = [encode_record(r, "score", vocab) for r in data.ctr_train]
y = torch.tensor([r.label for r in data.ctr_train])
rng = np.random.default_rng(0)


def step_loss(t):
    idx = rng.integers(0, len(seqs), 32)
    b = make_batch([seqs[i] for i in idx], vocab.pad)
    return F.cross_entropy(teacher.class_logits(teacher.run(b).out, b.eos), y[idx])


prune(teacher, PruneSchedule(0.8, 0, 200, 10), step_loss)
for name, nnz, total, s in sparsity_report(teacher)[:4]:
    print(f"{name:28s} {nnz:6d}/{total:6d} zero fraction {s:.3f}")

test = [encode_record(r, "score", vocab) for r in data.ctr_test]
y_test = [r.label for r in data.ctr_test]
print(f"pruned AUC {auc(score(teacher, test, vocab), y_test):.3f}")

q = quantize_model(teacher)
small = dequantized_copy(teacher, q)
print(f"int8 AUC   {auc(score(small, test, vocab), y_test):.3f}")

print("exit weights for 4 layers:", [round(w, 3) for w in exit_weights(4)])
for k in range(1, 5):
    print(f"exit after layer {k}: AUC {auc(early_exit_infer(teacher, test, vocab, k), y_test):.3f}")

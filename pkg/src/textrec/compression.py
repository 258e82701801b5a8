"""Edge-model toolchain: attention-relation distillation, gradual magnitude pruning,
depth-weighted early-exit training, early-exit inference, and int8 weights."""
from __future__ import annotations

import csv
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .model import (ContractError, ModelConfig, Transformer, attention_mask, build_model,
                    gather_rows, lm_loss, make_batch)
from .objectives import PretrainConfig, pretrain_example
from .quant import QuantizedTensor, dequantize, quantize_int8
from .text import EncodedSequence, Vocabulary
from .training import fit

logger = logging.getLogger(__name__)

__all__ = [
    "QuantizedTensor", "quantize_int8", "dequantize", "relation_kl", "distill", "PruneSchedule",
    "prunable_names", "magnitude_mask", "apply_masks", "prune", "sparsity_report",
    "exit_weights", "accumulated_exit_loss", "early_exit_infer", "quantize_model",
]


# ---------------------------------------------------------------- distillation


def _relations(a: torch.Tensor, b: torch.Tensor, allow: torch.Tensor) -> torch.Tensor:
    scores = (a @ b.transpose(-1, -2)) / math.sqrt(a.shape[-1])
    return scores.masked_fill(~allow[:, None], float("-inf")).softmax(-1)


def _kl(p: torch.Tensor, q: torch.Tensor, rows: torch.Tensor) -> torch.Tensor:
    # 0 * log 0 terms (masked keys) contribute nothing
    terms = torch.where(p > 0, p * (torch.log(p) - torch.log(q.clamp_min(1e-30))), torch.zeros_like(p))
    per_row = terms.sum(-1)                       # (B, H, T)
    per_row = per_row.mean(1)                     # heads
    return per_row[rows].mean()


def relation_kl(teacher_qkv, student_qkv, region: torch.Tensor, seg: torch.Tensor | None = None
                ) -> torch.Tensor:
    """KL(teacher || student) of last-layer query-key and value-value relation distributions."""
    tq, tk, tv = teacher_qkv
    sq, sk, sv = student_qkv
    if tq.shape[1] != sq.shape[1]:
        raise ContractError("teacher and student need the same number of attention heads")
    allow = attention_mask(region, seg)
    rows = region != 2
    qk = _kl(_relations(tq, tk, allow), _relations(sq, sk, allow), rows)
    vv = _kl(_relations(tv, tv, allow), _relations(sv, sv, allow), rows)
    return qk + vv


def distill(
    teacher: Transformer,
    student_cfg: ModelConfig,
    corpus: Sequence[Sequence[int]],
    vocab: Vocabulary,
    cfg: PretrainConfig = PretrainConfig(),
    relation_weight: float = 1.0,
) -> tuple[Transformer, list[float]]:
    """Pretrain a student on the pretraining objective plus the teacher's last-layer relations."""
    student = build_model(student_cfg, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    corpus = [list(s) for s in corpus if len(s) >= 4]
    teacher.eval()

    def step_loss(_t: int) -> torch.Tensor:
        pick = rng.integers(0, len(corpus), cfg.batch_size)
        seqs = [pretrain_example(corpus[i], vocab, rng, cfg) for i in pick]
        batch = make_batch(seqs, vocab.pad)
        with torch.no_grad():
            t_tr = teacher.run(batch, keep_qkv=True)
        s_tr = student.run(batch, keep_qkv=True, want_logits=True)
        loss = lm_loss(s_tr.logits, batch.ids, batch.loss_mask)
        if relation_weight:
            loss = loss + relation_weight * relation_kl(t_tr.qkv[-1], s_tr.qkv[-1], batch.region)
        return loss

    student.train()
    curve = fit(student.parameters(), step_loss, cfg.steps, cfg.lr)
    student.eval()
    return student, curve


# ---------------------------------------------------------------- pruning


@dataclass(frozen=True)
class PruneSchedule:
    target: float = 0.80
    start: int = 0
    end: int = 1000
    every: int = 10

    def __post_init__(self) -> None:
        if not 0 <= self.target < 1:
            raise ValueError("target sparsity must be in [0, 1)")
        if self.end <= self.start:
            raise ValueError("pruning must end after it starts")

    def sparsity(self, t: int) -> float:
        """Cubic ramp from 0 at ``start`` to ``target`` at ``end``."""
        if t <= self.start:
            return 0.0
        if t >= self.end:
            return self.target
        frac = (t - self.start) / (self.end - self.start)
        return self.target * (1.0 - (1.0 - frac) ** 3)


def prunable_names(model: Transformer) -> list[str]:
    """Every embedding table and linear-layer weight matrix except the segment-index table,
    which only split-stage scoring uses and which starts at zero."""
    return [n for n, p in model.named_parameters()
            if n.endswith("weight") and p.dim() == 2 and not n.startswith("seg_emb")]


def magnitude_mask(w: torch.Tensor, sparsity: float, keep: torch.Tensor | None = None) -> torch.Tensor:
    """Keep-mask zeroing the ``round(sparsity * n)`` smallest-|w| entries.

    Entries already pruned (``keep`` False) are ranked first, so masks only grow.
    """
    n = w.numel()
    k = int(round(sparsity * n))
    mag = w.detach().abs().flatten().double()
    if keep is not None:
        mag = torch.where(keep.flatten(), mag, torch.full_like(mag, -1.0))
    order = torch.argsort(mag, stable=True)
    out = torch.ones(n, dtype=torch.bool)
    out[order[:k]] = False
    return out.view_as(w)


@torch.no_grad()
def apply_masks(model: Transformer, masks: dict[str, torch.Tensor]) -> None:
    params = dict(model.named_parameters())
    for name, m in masks.items():
        params[name].mul_(m.to(params[name].dtype))


def prune(
    model: Transformer,
    schedule: PruneSchedule,
    step_loss: Callable[[int], torch.Tensor],
    lr: float = 5e-4,
    steps: int | None = None,
) -> tuple[dict[str, torch.Tensor], list[float]]:
    """Gradual magnitude pruning while ``step_loss`` keeps training the model in place.

    Masks are recomputed every ``schedule.every`` steps until ``schedule.end`` and
    re-applied after every optimizer step.  Returns the final keep-masks and the loss curve.
    """
    names = prunable_names(model)
    params = dict(model.named_parameters())
    masks = {n: torch.ones_like(params[n], dtype=torch.bool) for n in names}
    if schedule.target == 0:
        return masks, []
    steps = schedule.end + 1 if steps is None else max(steps, schedule.end + 1)

    def update(t: int) -> None:
        if t % schedule.every == 0 or t >= schedule.end:
            s = schedule.sparsity(t)
            for n in names:
                masks[n] = magnitude_mask(params[n], s, masks[n])
        apply_masks(model, masks)

    update(0)
    model.train()
    curve = fit(model.parameters(), step_loss, steps, lr, after_step=lambda t: update(t + 1))
    model.eval()
    # the last step must land exactly on the target
    for n in names:
        masks[n] = magnitude_mask(params[n], schedule.target, masks[n])
    apply_masks(model, masks)
    return masks, curve


def sparsity_report(model: Transformer, names: Sequence[str] | None = None) -> list[tuple[str, int, int, float]]:
    params = dict(model.named_parameters())
    rows = []
    for n in names or prunable_names(model):
        p = params[n]
        nnz = int((p != 0).sum())
        rows.append((n, nnz, p.numel(), 1.0 - nnz / p.numel()))
    return rows


def write_sparsity_report(path: str | Path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["tensor", "nnz", "total", "sparsity"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], f"{r[3]:.6f}"])


# ---------------------------------------------------------------- early exit


def exit_weights(n_layers: int) -> list[float]:
    """Per-exit weights 2k / (k (k + 1)) for k = 1..L, as printed (they reduce to 2 / (k + 1))."""
    return [2 * k / (k * (k + 1)) for k in range(1, n_layers + 1)]


def accumulated_exit_loss(model: Transformer, trace, layer_loss: Callable[[torch.Tensor], torch.Tensor]
                          ) -> torch.Tensor:
    """Sum over exits k = 1..L of w_k * layer_loss(final_norm(h^(k)))."""
    L = model.cfg.n_layers
    if any(trace.hidden[k] is None for k in range(1, L + 1)):
        raise ContractError("accumulated exit loss needs every layer's hidden state")
    total = 0.0
    for k, w in zip(range(1, L + 1), exit_weights(L)):
        total = total + w * layer_loss(model.ln_f(trace.hidden[k]))
    return total


def exit_classification_loss(model: Transformer, batch, labels: torch.Tensor,
                             accumulated: bool = True) -> torch.Tensor:
    tr = model.run(batch)
    if not accumulated:
        return F.cross_entropy(model.class_logits(tr.out, batch.eos), labels)
    return accumulated_exit_loss(
        model, tr, lambda out: F.cross_entropy(model.class_logits(out, batch.eos), labels)
    )


@torch.no_grad()
def early_exit_infer(model: Transformer, seqs: Sequence[EncodedSequence], vocab: Vocabulary, k: int,
                     batch_size: int = 128) -> np.ndarray:
    """Positive-class probability computed from layer k; layers above k never run."""
    if not 1 <= k <= model.cfg.n_layers:
        raise ContractError(f"exit layer {k} outside [1, {model.cfg.n_layers}]")
    out = []
    for i in range(0, len(seqs), batch_size):
        batch = make_batch(seqs[i:i + batch_size], vocab.pad)
        tr = model.run(batch, stop=k)
        out.append(model.class_logits(tr.out, batch.eos).softmax(-1)[:, 1])
    return torch.cat(out).double().numpy()


# ---------------------------------------------------------------- quantization


def quantize_model(model: Transformer) -> dict[str, QuantizedTensor]:
    """int8 copies of every embedding table and linear weight; biases and norms stay float."""
    params = dict(model.named_parameters())
    return {n: quantize_int8(params[n]) for n in prunable_names(model)}


@torch.no_grad()
def dequantized_copy(model: Transformer, q: dict[str, QuantizedTensor]) -> Transformer:
    import copy

    out = copy.deepcopy(model)
    params = dict(out.named_parameters())
    for n, qt in q.items():
        params[n].copy_(dequantize(qt, params[n].dtype))
    return out

"""Fine-tuning, prompt tuning, option tuning and option-adapter tuning.

Every non-fine method keeps its trainable tensors in a :class:`TuningState`
separate from the frozen base model, so one base can serve many tasks at once.
"""
from __future__ import annotations

import copy
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import model_fingerprint, read_container, write_container
from .model import ContractError, Injection, Transformer, gather_rows, lm_loss, make_batch
from .text import ConfigError, EncodedSequence, Vocabulary
from .training import fit

logger = logging.getLogger(__name__)

METHODS = ("fine", "prompt", "option", "option_adapter")
# learning rates used when the caller does not pick one (desk scale; prompt-like > fine)
DEFAULT_LR = {"fine": 5e-4, "prompt": 3e-3, "option": 3e-3, "option_adapter": 3e-3}


@dataclass
class SoftPromptSet:
    vectors: torch.Tensor       # (P, d); the last n_options rows are the soft options
    n_options: int
    special_rows: torch.Tensor  # (4, d_emb) trainable copies of BOS', EOS', BOS, EOS

    def __post_init__(self) -> None:
        if self.n_options > self.vectors.shape[0]:
            raise ConfigError("more soft options than soft prompts")

    @property
    def n_prompts(self) -> int:
        return self.vectors.shape[0]

    @property
    def options(self) -> torch.Tensor:
        return self.vectors[self.vectors.shape[0] - self.n_options:]


@dataclass
class AdapterParams:
    lam: list[torch.Tensor]  # per layer, scalar
    W1: list[torch.Tensor]   # d x r
    b1: list[torch.Tensor]   # 1 x r
    W2: list[torch.Tensor]   # r x d
    b2: list[torch.Tensor]   # 1 x d

    @property
    def rank(self) -> int:
        return self.W1[0].shape[1]

    def layer(self, l: int):
        return self.lam[l], self.W1[l], self.b1[l], self.W2[l], self.b2[l]

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for l in range(len(self.lam)):
            for name in ("lam", "W1", "b1", "W2", "b2"):
                out[f"adapter.{l}.{name}"] = getattr(self, name)[l]
        return out


def init_adapters(d: int, n_layers: int, rank: int, gen: torch.Generator,
                  dtype: torch.dtype = torch.float32) -> AdapterParams:
    """W2 = 0, b2 = 0, lam = 1: each adapter starts as the identity on its FFN."""
    return AdapterParams(
        lam=[torch.ones((), dtype=dtype) for _ in range(n_layers)],
        W1=[torch.randn(d, rank, generator=gen, dtype=dtype) * 0.02 for _ in range(n_layers)],
        b1=[torch.zeros(1, rank, dtype=dtype) for _ in range(n_layers)],
        W2=[torch.zeros(rank, d, dtype=dtype) for _ in range(n_layers)],
        b2=[torch.zeros(1, d, dtype=dtype) for _ in range(n_layers)],
    )


@dataclass
class TuningState:
    method: str
    task: str = "default"
    prompts: SoftPromptSet | None = None
    adapters: AdapterParams | None = None
    head_W: torch.Tensor | None = None  # (C, d), prompt tuning only
    head_b: torch.Tensor | None = None
    full: Transformer | None = None     # fine-tuning only
    segment_rows: torch.Tensor | None = None  # split-stage tuning of frozen bases
    base_fingerprint: str = ""

    def tensors(self) -> dict[str, torch.Tensor]:
        out: dict[str, torch.Tensor] = {}
        if self.full is not None:
            out.update({f"full.{n}": p for n, p in self.full.named_parameters()})
        if self.prompts is not None:
            out["prompts.vectors"] = self.prompts.vectors
            out["prompts.special_rows"] = self.prompts.special_rows
        if self.adapters is not None:
            out.update(self.adapters.tensors())
        if self.head_W is not None:
            out["head.W"] = self.head_W
            out["head.b"] = self.head_b
        if self.segment_rows is not None:
            out["segment_rows"] = self.segment_rows
        return out

    def n_trainable(self) -> int:
        return sum(t.numel() for t in self.tensors().values())

    @property
    def n_prompts(self) -> int:
        return self.prompts.n_prompts if self.prompts is not None else 0

    def model(self, base: Transformer) -> Transformer:
        return self.full if self.full is not None else base

    def injection(self, vocab: Vocabulary) -> Injection | None:
        if self.prompts is None and self.adapters is None and self.segment_rows is None:
            return None
        inj = Injection(segment_rows=self.segment_rows)
        if self.prompts is not None:
            inj.prompts = self.prompts.vectors[None]
            inj.special_rows = self.prompts.special_rows[None]
            inj.special_ids = vocab.delimiter_ids
        if self.adapters is not None:
            inj.adapters = [
                (lam.reshape(1, 1, 1), W1[None], b1[None], W2[None], b2[None])
                for lam, W1, b1, W2, b2 in zip(*(getattr(self.adapters, n)
                                                  for n in ("lam", "W1", "b1", "W2", "b2")))
            ]
        return inj

    def prefix_tensors(self, n_prefix_layers: int) -> dict[str, torch.Tensor]:
        """Tensors that influence the first ``n_prefix_layers`` layers of a segment."""
        out = {}
        if self.prompts is not None:
            out["prompts.special_rows"] = self.prompts.special_rows
        if self.adapters is not None:
            out.update({k: v for k, v in self.adapters.tensors().items()
                        if int(k.split(".")[1]) < n_prefix_layers})
        return out

    # -- persistence

    def save(self, path) -> str:
        header = {"kind": "tuning", "method": self.method, "task": self.task,
                  "base_fingerprint": self.base_fingerprint,
                  "n_options": self.prompts.n_options if self.prompts is not None else 0,
                  "n_layers": len(self.adapters.lam) if self.adapters is not None else 0,
                  "config": self.full.cfg.to_dict() if self.full is not None else {}}
        return write_container(path, header, self.tensors())

    @classmethod
    def load(cls, path, base: Transformer) -> "TuningState":
        header, tensors = read_container(path)
        if header.get("kind") != "tuning":
            raise ConfigError(f"{path} is not a tuning state")
        fp = model_fingerprint(base)
        if header["base_fingerprint"] != fp:
            raise ConfigError(f"{path} was tuned on base {header['base_fingerprint'][:12]}, "
                              f"not {fp[:12]}")
        t = {k: torch.from_numpy(v) for k, v in tensors.items()}
        state = cls(method=header["method"], task=header["task"], base_fingerprint=fp)
        if "prompts.vectors" in t:
            state.prompts = SoftPromptSet(t["prompts.vectors"], header["n_options"],
                                          t["prompts.special_rows"])
        if header["n_layers"]:
            n = header["n_layers"]
            state.adapters = AdapterParams(
                *([t[f"adapter.{l}.{name}"] for l in range(n)] for name in ("lam", "W1", "b1", "W2", "b2"))
            )
        if "head.W" in t:
            state.head_W, state.head_b = t["head.W"], t["head.b"]
        state.segment_rows = t.get("segment_rows")
        if header["method"] == "fine":
            full = copy.deepcopy(base)
            with torch.no_grad():
                for n, p in full.named_parameters():
                    p.copy_(t[f"full.{n}"])
            state.full = full
        return state


# ---------------------------------------------------------------- readouts


def attach_prompts(seq: EncodedSequence, prompts: SoftPromptSet | None, vocab: Vocabulary,
                   model: Transformer):
    """Batch of one with ``P`` prompt slots ahead of the tokens, plus the matching injection.

    Returns ``(batch, injection)``; the input width is ``P + len(seq)``.
    """
    P = prompts.n_prompts if prompts is not None else 0
    if P + len(seq) > model.cfg.max_len:
        raise ContractError("prompts plus sequence exceed max_len; truncate the record first")
    batch = make_batch([seq], vocab.pad, P)
    if prompts is None:
        return batch, None
    inj = Injection(prompts.vectors[None], prompts.special_rows[None], vocab.delimiter_ids)
    return batch, inj


def option_logits(h_eos: torch.Tensor, options: torch.Tensor) -> torch.Tensor:
    """``logit_c = <h_eos, option_c>``; ``h_eos`` (B, d), options (C, d) or per-item (B, C, d)."""
    if options.dim() == 2:
        return h_eos @ options.T
    return torch.einsum("bd,bcd->bc", h_eos, options)


def state_logits(base: Transformer, state: TuningState | None, seqs: Sequence[EncodedSequence],
                 vocab: Vocabulary, exit_layer: int | None = None) -> torch.Tensor:
    model = state.model(base) if state is not None else base
    P = state.n_prompts if state is not None else 0
    batch = make_batch(seqs, vocab.pad, P)
    if (batch.eos < 0).any():
        raise ContractError("scoring sequence has no [EOS]")
    inj = state.injection(vocab) if state is not None else None
    tr = model.run(batch, inj, exit_layer=exit_layer)
    return readout(model, state, tr.out, batch.eos)


def readout(model: Transformer, state: TuningState | None, out: torch.Tensor,
            eos: torch.Tensor) -> torch.Tensor:
    h = gather_rows(out, eos)
    if state is None or state.method == "fine":
        return model.score_head(h)
    if state.method == "prompt":
        return h @ state.head_W.T + state.head_b
    return option_logits(h, state.prompts.options)


@torch.no_grad()
def state_class_probs(base, state, seqs, vocab, exit_layer=None) -> torch.Tensor:
    return state_logits(base, state, seqs, vocab, exit_layer).softmax(-1)


@torch.no_grad()
def state_probs(base, state, seqs, vocab, exit_layer=None) -> torch.Tensor:
    return state_class_probs(base, state, seqs, vocab, exit_layer)[:, 1]


# ---------------------------------------------------------------- tuning


@dataclass
class TuneConfig:
    lr: float | None = None
    steps: int = 300
    batch: int = 32
    n_prompts: int = 16
    n_options: int = 2
    rank: int | None = None   # default d / H
    seed: int = 0
    objective: str = "classify"  # or "lm"
    monitor_every: int = 0
    segment_rows: bool = False  # tune private segment-index embeddings (split-stage training)


def new_state(base: Transformer, method: str, vocab: Vocabulary, cfg: TuneConfig,
              task: str = "default") -> TuningState:
    if method not in METHODS:
        raise ConfigError(f"unknown tuning method {method!r}; choose from {METHODS}")
    C = base.cfg.n_classes
    if method in ("option", "option_adapter") and cfg.objective == "classify" and cfg.n_options != C:
        raise ConfigError(f"{method} needs one soft option per class: {cfg.n_options} != {C}")
    gen = torch.Generator().manual_seed(cfg.seed)
    dtype = base.tok_emb.weight.dtype
    state = TuningState(method=method, task=task, base_fingerprint=model_fingerprint(base))
    if method == "fine":
        state.full = copy.deepcopy(base)
        return state
    with torch.no_grad():
        corpus_ids = [i for i in range(len(vocab)) if i not in set(vocab.special_ids)]
        pick = torch.tensor(corpus_ids)[torch.randint(len(corpus_ids), (cfg.n_prompts,), generator=gen)]
        vectors = base.token_vectors(pick[None])[0].clone()
        special = base.tok_emb.weight[list(vocab.delimiter_ids)].clone()
        n_opt = cfg.n_options if method in ("option", "option_adapter") else 0
        if n_opt:
            # options start from one shared vector (the mean word embedding): the first
            # softmax is uniform instead of carrying a random, embedding-scale class bias
            vectors[-n_opt:] = base.token_vectors(torch.tensor(corpus_ids)[None])[0].mean(0)
    state.prompts = SoftPromptSet(vectors, n_opt, special)
    if method == "prompt":
        state.head_W = torch.randn(C, base.cfg.d_model, generator=gen, dtype=dtype) * 0.02
        state.head_b = torch.zeros(C, dtype=dtype)
    if cfg.segment_rows:
        state.segment_rows = base.seg_emb.weight.detach().clone()
    if method == "option_adapter":
        rank = cfg.rank or base.cfg.d_model // base.cfg.n_heads
        state.adapters = init_adapters(base.cfg.d_model, base.cfg.n_layers, rank, gen, dtype)
    return state


def trainable_tensors(state: TuningState) -> list[torch.Tensor]:
    ts = list(state.tensors().values())
    for t in ts:
        t.requires_grad_(True)
    return ts


def tune(
    base: Transformer,
    seqs: Sequence[EncodedSequence],
    labels: Sequence[int] | None,
    method: str,
    vocab: Vocabulary,
    cfg: TuneConfig = TuneConfig(),
    task: str = "default",
    monitor: Callable[[int, TuningState], None] | None = None,
    loss_fn: Callable[[TuningState, list[int]], torch.Tensor] | None = None,
) -> tuple[TuningState, list[float]]:
    """Train only ``method``'s parameters; the base model's tensors are never written.

    ``labels=None`` with ``objective="lm"`` tunes on the generation loss instead.
    ``loss_fn(state, idx)`` replaces the built-in batch loss (used by the
    split-stage trainer).
    """
    state = new_state(base, method, vocab, cfg, task)
    lr = cfg.lr if cfg.lr is not None else DEFAULT_LR[method]
    rng = np.random.default_rng(cfg.seed)
    if method != "fine":
        for p in base.parameters():
            p.requires_grad_(False)
    params = trainable_tensors(state)
    y_all = torch.tensor(list(labels)) if labels is not None else None

    def default_loss(idx: list[int]) -> torch.Tensor:
        chunk = [seqs[i] for i in idx]
        model = state.model(base)
        batch = make_batch(chunk, vocab.pad, state.n_prompts)
        want_lm = cfg.objective == "lm"
        tr = model.run(batch, state.injection(vocab), want_logits=want_lm)
        if want_lm:
            return lm_loss(tr.logits, batch.ids, batch.loss_mask)
        return F.cross_entropy(readout(model, state, tr.out, batch.eos), y_all[idx])

    def step_loss(t: int) -> torch.Tensor:
        idx = rng.integers(0, len(seqs), cfg.batch).tolist()
        return loss_fn(state, idx) if loss_fn is not None else default_loss(idx)

    def after(t: int) -> None:
        if monitor is not None and cfg.monitor_every and (t + 1) % cfg.monitor_every == 0:
            with torch.no_grad():
                monitor(t + 1, state)

    if state.full is not None:
        state.full.train()
    try:
        curve = fit(params, step_loss, cfg.steps, lr, after_step=after)
    finally:
        for t in params:
            t.requires_grad_(False)
        for p in base.parameters():
            p.requires_grad_(True)
        if state.full is not None:
            state.full.eval()
    return state, curve


def trainable_fraction(state: TuningState, base: Transformer) -> float:
    return state.n_trainable() / sum(p.numel() for p in base.parameters())


# ---------------------------------------------------------------- mixed-task inference


@dataclass
class ItemError:
    message: str


def _stack_injection(base: Transformer, states: list[TuningState], vocab: Vocabulary) -> Injection:
    """Left-aligned per-item prompts and rank-padded per-item adapters (zeros contribute exactly 0)."""
    B = len(states)
    d, n_layers = base.cfg.d_model, base.cfg.n_layers
    dtype = base.tok_emb.weight.dtype
    Pmax = max(s.n_prompts for s in states)
    prompts = torch.zeros(B, Pmax, d, dtype=dtype)
    base_rows = base.tok_emb.weight[list(vocab.delimiter_ids)]
    rows = []
    for b, s in enumerate(states):
        if s.prompts is not None:
            prompts[b, :s.n_prompts] = s.prompts.vectors
            rows.append(s.prompts.special_rows)
        else:
            rows.append(base_rows)
    inj = Injection(prompts=prompts, special_rows=torch.stack(rows), special_ids=vocab.delimiter_ids)
    if any(s.adapters is not None for s in states):
        rmax = max(s.adapters.rank for s in states if s.adapters is not None)
        layers = []
        for l in range(n_layers):
            lam = torch.zeros(B, 1, 1, dtype=dtype)
            W1 = torch.zeros(B, d, rmax, dtype=dtype)
            b1 = torch.zeros(B, 1, rmax, dtype=dtype)
            W2 = torch.zeros(B, rmax, d, dtype=dtype)
            b2 = torch.zeros(B, 1, d, dtype=dtype)
            for b, s in enumerate(states):
                if s.adapters is None:
                    continue
                a_lam, a_W1, a_b1, a_W2, a_b2 = s.adapters.layer(l)
                r = a_W1.shape[1]
                lam[b] = a_lam
                W1[b, :, :r] = a_W1
                b1[b, :, :r] = a_b1
                W2[b, :r] = a_W2
                b2[b] = a_b2
            layers.append((lam, W1, b1, W2, b2))
        inj.adapters = layers
    return inj


@torch.no_grad()
def mixed_task_inference(base: Transformer, states: dict[str, TuningState],
                         items: Sequence[tuple[str, EncodedSequence]], vocab: Vocabulary
                         ) -> list[np.ndarray | ItemError]:
    """Class probabilities per item, all parameter-efficient tasks in one shared-base batch.

    Unknown task ids yield an :class:`ItemError` in that slot; the rest proceed.
    Fine-tuned states carry their own weights and run as separate groups.
    """
    results: list = [None] * len(items)
    shared: list[int] = []
    for i, (task, _seq) in enumerate(items):
        st = states.get(task)
        if st is None:
            results[i] = ItemError(f"unknown task {task!r}")
        elif st.method == "fine":
            results[i] = state_class_probs(base, st, [items[i][1]], vocab)[0].numpy()
        else:
            shared.append(i)
    if shared:
        sts = [states[items[i][0]] for i in shared]
        batch = make_batch([items[i][1] for i in shared], vocab.pad, [s.n_prompts for s in sts])
        if (batch.eos < 0).any():
            raise ContractError("scoring sequence has no [EOS]")
        inj = _stack_injection(base, sts, vocab)
        tr = base.run(batch, inj)
        h = gather_rows(tr.out, batch.eos)
        for row, (i, s) in enumerate(zip(shared, sts)):
            results[i] = _readout_vec(s, h[row]).softmax(-1).numpy()
    return results


def _readout_vec(state: TuningState, h: torch.Tensor) -> torch.Tensor:
    if state.method == "prompt":
        return state.head_W @ h + state.head_b
    return state.prompts.options @ h

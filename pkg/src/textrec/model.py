"""Single-stack transformer with a source/target (bidirectional/causal) attention mask.

Every layer's hidden state is exposed so the same module serves plain scoring,
split-stage (cached prefix) inference, early exit, and attention-relation distillation.
"""
from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .text import AR, BIDIR, PADDING, EncodedSequence, Vocabulary

logger = logging.getLogger(__name__)


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 16
    d_model: int = 64
    d_emb: int = 0  # 0 means "same as d_model"
    vocab_size: int = 519
    max_len: int = 256
    share_layers: bool = False
    max_segments: int = 32
    retrieval_dim: int = 128
    n_classes: int = 2
    activation: str = "gelu"

    def __post_init__(self) -> None:
        if self.d_emb == 0:
            object.__setattr__(self, "d_emb", self.d_model)
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_emb > self.d_model:
            raise ContractError("d_emb must not exceed d_model")
        if self.max_len < 16:
            raise ContractError("max_len must be at least 16")
        if self.activation != "gelu":
            raise ContractError("only gelu is supported")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count; must agree with what :class:`Transformer` allocates."""
    d, de = cfg.d_model, cfg.d_emb
    block = 12 * d * d + 13 * d
    n = cfg.vocab_size * de
    n += d * de if de < d else 0
    n += (cfg.max_len + 1) * d + (cfg.max_segments + 1) * d
    n += block * (1 if cfg.share_layers else cfg.n_layers)
    n += 2 * d  # final layer norm
    n += cfg.n_classes * d + cfg.n_classes
    n += 2 * d * cfg.retrieval_dim
    return n


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    ids: torch.Tensor        # (B, T)
    pos: torch.Tensor        # (B, T), 0 for prompt and pad slots
    seg: torch.Tensor        # (B, T), 0 for prompt slots
    region: torch.Tensor     # (B, T)
    is_prompt: torch.Tensor  # (B, T) bool
    loss_mask: torch.Tensor  # (B, T)
    eos: torch.Tensor        # (B,) index of [EOS], -1 if absent
    eos_p: torch.Tensor      # (B,)
    n_prompts: torch.Tensor  # (B,)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.ids.shape)  # type: ignore[return-value]


def make_batch(seqs: Sequence[EncodedSequence], pad_id: int,
               n_prompts: int | Sequence[int] = 0) -> Batch:
    """Right-pad sequences into one batch, reserving leading slots for soft prompts."""
    if isinstance(n_prompts, int):
        n_prompts = [n_prompts] * len(seqs)
    lens = [len(s) + p for s, p in zip(seqs, n_prompts)]
    B, T = len(seqs), max(lens)
    ids = np.full((B, T), pad_id, dtype=np.int64)
    pos = np.zeros((B, T), dtype=np.int64)
    seg = np.zeros((B, T), dtype=np.int64)
    region = np.full((B, T), PADDING, dtype=np.int64)
    is_prompt = np.zeros((B, T), dtype=bool)
    loss = np.zeros((B, T), dtype=np.int64)
    eos = np.full(B, -1, dtype=np.int64)
    eos_p = np.full(B, -1, dtype=np.int64)
    for b, (s, p) in enumerate(zip(seqs, n_prompts)):
        n = len(s)
        region[b, :p] = BIDIR
        is_prompt[b, :p] = True
        ids[b, p:p + n] = s.ids
        pos[b, p:p + n] = s.pos
        seg[b, p:p + n] = s.seg
        region[b, p:p + n] = s.region
        loss[b, p:p + n] = s.loss_mask
        eos[b] = s.eos_index + p if s.eos_index >= 0 else -1
        eos_p[b] = s.eos_p_index + p if s.eos_p_index >= 0 else -1
    t = torch.from_numpy
    return Batch(t(ids), t(pos), t(seg), t(region), t(is_prompt), t(loss), t(eos), t(eos_p),
                 torch.tensor(list(n_prompts), dtype=torch.long))


def attention_mask(region: torch.Tensor, seg: torch.Tensor | None = None,
                   block: bool = False) -> torch.Tensor:
    """Boolean (B, T, T) allow-matrix; ``[b, i, j]`` is True when token i may attend to j."""
    T = region.shape[-1]
    ri, rj = region[:, :, None], region[:, None, :]
    allow = (rj == BIDIR) & (ri != PADDING)
    causal = torch.ones(T, T, dtype=torch.bool).tril()
    allow = allow | ((ri == AR) & (rj == AR) & causal)
    if block:
        if seg is None:
            raise ContractError("block-diagonal mask needs segment ids")
        allow = allow & (seg[:, :, None] == seg[:, None, :])
    # padding rows look only at themselves so softmax stays finite
    eye = torch.eye(T, dtype=torch.bool)
    allow = allow | ((ri == PADDING) & eye)
    return allow


def build_seq2seq_mask(seq: EncodedSequence, block: bool = False) -> np.ndarray:
    region = torch.from_numpy(seq.region)[None]
    seg = torch.from_numpy(seq.seg)[None]
    return attention_mask(region, seg, block)[0].numpy()


# ---------------------------------------------------------------- modules


@dataclass
class Injection:
    """Per-item task parameters threaded through a forward pass.

    Shapes are batched (leading dim B or 1).  ``adapters[l]`` is
    ``(lam, W1, b1, W2, b2)`` with shapes (B,1,1), (B,d,r), (B,1,r), (B,r,d), (B,1,d).
    """
    prompts: torch.Tensor | None = None        # (B, P, d)
    special_rows: torch.Tensor | None = None   # (B, 4, d_emb) replacing the rows of special_ids
    special_ids: tuple[int, ...] = ()
    adapters: list | None = None
    segment_rows: torch.Tensor | None = None   # (max_segments + 1, d) replacing seg_emb


def adapter_ffn(Z: torch.Tensor, ffn: Callable[[torch.Tensor], torch.Tensor], lam, W1, b1, W2, b2
                ) -> torch.Tensor:
    """``ffn(Z) + lam * (gelu(Z W1 + b1) W2 + b2)``, for 2-D or batched 3-D ``Z``."""
    if Z.shape[-1] != W1.shape[-2] or W1.shape[-1] != W2.shape[-2] or W2.shape[-1] != Z.shape[-1]:
        raise ContractError(
            f"adapter shapes Z{tuple(Z.shape)} W1{tuple(W1.shape)} W2{tuple(W2.shape)} do not chain"
        )
    return ffn(Z) + lam * (F.gelu(Z @ W1 + b1) @ W2 + b2)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, 4 * d)
        self.fc2 = nn.Linear(4 * d, d)

    def ffn(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(z)))

    def qkv_heads(self, x: torch.Tensor):
        B, T, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        shape = (B, T, self.n_heads, d // self.n_heads)
        return (t.view(shape).transpose(1, 2) for t in (q, k, v))

    def forward(self, x: torch.Tensor, allow: torch.Tensor, adapter=None, keep: bool = False):
        q, k, v = self.qkv_heads(x)
        B, H, T, hd = q.shape
        ctx = F.scaled_dot_product_attention(q, k, v, attn_mask=allow[:, None])
        x = x + self.out(ctx.transpose(1, 2).reshape(B, T, H * hd))
        z = self.ln2(x)
        if adapter is None:
            x = x + self.ffn(z)
        else:
            x = x + adapter_ffn(z, self.ffn, *adapter)
        return x, ((q, k, v) if keep else None)


@dataclass
class ForwardTrace:
    hidden: list                       # hidden[k] is h^(k) (B,T,d) or None if not executed
    exit_layer: int
    out: torch.Tensor                  # final-norm of h^(exit_layer)
    qkv: list = field(default_factory=list)  # per executed layer when requested
    logits: torch.Tensor | None = None

    def executed(self) -> list[int]:
        return [k for k, h in enumerate(self.hidden) if h is not None]


class Transformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, de = cfg.d_model, cfg.d_emb
        self.tok_emb = nn.Embedding(cfg.vocab_size, de)
        self.emb_proj = nn.Linear(de, d, bias=False) if de < d else None
        self.pos_emb = nn.Embedding(cfg.max_len + 1, d)
        self.seg_emb = nn.Embedding(cfg.max_segments + 1, d)
        if cfg.share_layers:
            shared = Block(cfg)
            self.blocks = nn.ModuleList([shared] * cfg.n_layers)
        else:
            self.blocks = nn.ModuleList([Block(cfg) for _ in range(cfg.n_layers)])
        self.ln_f = nn.LayerNorm(d)
        self.score_head = nn.Linear(d, cfg.n_classes)
        self.user_proj = nn.Linear(d, cfg.retrieval_dim, bias=False)
        self.item_proj = nn.Linear(d, cfg.retrieval_dim, bias=False)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                nn.init.zeros_(p)
            elif ".ln" in name or name.startswith("ln_f"):
                nn.init.ones_(p)
            elif name.startswith("seg_emb"):
                # neutral until trained: an untrained split-stage model equals the monolithic one
                nn.init.zeros_(p)
            else:
                nn.init.normal_(p, 0.0, 0.02)

    @property
    def n_layers(self) -> int:
        return self.cfg.n_layers

    # -- embeddings

    def token_vectors(self, ids: torch.Tensor, special_rows: torch.Tensor | None = None,
                      special_ids: Sequence[int] = ()) -> torch.Tensor:
        e = self.tok_emb(ids)
        if special_rows is not None:
            for j, sid in enumerate(special_ids):
                e = torch.where((ids == sid)[..., None], special_rows[:, j][:, None, :], e)
        return self.emb_proj(e) if self.emb_proj is not None else e

    def embed(self, batch: Batch, inj: Injection | None = None) -> torch.Tensor:
        if inj is not None:
            h = self.token_vectors(batch.ids, inj.special_rows, inj.special_ids)
        else:
            h = self.token_vectors(batch.ids)
        h = h + self.pos_emb(batch.pos) * (~batch.is_prompt)[..., None]
        if inj is not None and inj.prompts is not None and inj.prompts.shape[1] > 0:
            B, T, d = h.shape
            P = inj.prompts.shape[1]
            if P > T:
                raise ContractError(f"{P} prompt rows for a batch of width {T}")
            full = torch.cat([inj.prompts.expand(B, P, d), h.new_zeros(B, T - P, d)], dim=1)
            h = torch.where(batch.is_prompt[..., None], full, h)
        return h

    # -- layers

    def run(
        self,
        batch: Batch,
        inj: Injection | None = None,
        start: int = 0,
        stop: int | None = None,
        h_start: torch.Tensor | None = None,
        exit_layer: int | None = None,
        block_layers: int = 0,
        add_segments_at: int | None = None,
        keep_qkv: bool = False,
        want_logits: bool = False,
    ) -> ForwardTrace:
        """Run layers ``start..stop`` and read out at ``exit_layer`` (default ``stop``).

        Layers with index < ``block_layers`` use a block-diagonal-by-segment mask.
        ``add_segments_at=k`` superimposes segment-index embeddings on h^(k) before
        layer k runs (k == stop adds them to the output).
        """
        L = self.cfg.n_layers
        stop = L if stop is None else stop
        if not (0 <= start <= stop <= L):
            raise ContractError(f"layer range [{start}, {stop}] outside [0, {L}]")
        exit_layer = stop if exit_layer is None else exit_layer
        if not (start <= exit_layer <= stop):
            raise ContractError(f"exit layer {exit_layer} outside executed range [{start}, {stop}]")
        if start > 0 and h_start is None:
            raise ContractError("starting past layer 0 needs precomputed hidden states")
        h = self.embed(batch, inj) if h_start is None else h_start
        hidden: list = [None] * (L + 1)
        full = attention_mask(batch.region, batch.seg, block=False)
        blocked = attention_mask(batch.region, batch.seg, block=True) if block_layers > 0 else None
        qkv = []
        for k in range(start, exit_layer + 1):
            if add_segments_at == k:
                rows = inj.segment_rows if inj is not None and inj.segment_rows is not None \
                    else self.seg_emb.weight
                h = h + F.embedding(batch.seg, rows)
            hidden[k] = h
            if k == exit_layer:
                break
            allow = blocked if k < block_layers else full
            adapter = inj.adapters[k] if inj is not None and inj.adapters is not None else None
            h, kept = self.blocks[k](h, allow, adapter, keep_qkv)
            qkv.append(kept)
        out = self.ln_f(hidden[exit_layer])
        trace = ForwardTrace(hidden, exit_layer, out, qkv)
        if want_logits:
            trace.logits = self.lm_logits(out)
        return trace

    # -- heads

    def lm_logits(self, out: torch.Tensor) -> torch.Tensor:
        if self.emb_proj is not None:
            out = out @ self.emb_proj.weight
        return out @ self.tok_emb.weight.T

    def class_logits(self, out: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
        return self.score_head(gather_rows(out, index))


def gather_rows(out: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """``out[b, index[b]]`` for each batch row."""
    if (index < 0).any():
        raise ContractError("sequence lacks the readout token")
    return out[torch.arange(out.shape[0]), index]


# ---------------------------------------------------------------- functional API


def forward(model: Transformer, seq: EncodedSequence, vocab: Vocabulary | None = None,
            layer_range: tuple[int, int | None] = (0, None), exit_layer: int | None = None,
            h_start: torch.Tensor | None = None, block: bool = False) -> ForwardTrace:
    """Single-sequence convenience wrapper around :meth:`Transformer.run`, always with logits."""
    pad = vocab.pad if vocab is not None else 0
    batch = make_batch([seq], pad)
    start, stop = layer_range
    stop = model.n_layers if stop is None else stop
    return model.run(batch, start=start, stop=stop, h_start=h_start, exit_layer=exit_layer,
                     block_layers=model.n_layers if block else 0, want_logits=True)


def lm_loss(logits: torch.Tensor, ids: torch.Tensor, loss_mask: torch.Tensor,
            reduction: str = "mean") -> torch.Tensor:
    """Next-token cross-entropy on target positions flagged by ``loss_mask``.

    Position t's logits predict token t+1, so ``loss_mask[t+1]`` selects them.
    """
    if logits.dim() == 2:
        logits, ids, loss_mask = logits[None], ids[None], loss_mask[None]
    mask = loss_mask[:, 1:].bool()
    if not mask.any():
        raise ContractError("loss mask selects no positions")
    nll = F.cross_entropy(logits[:, :-1].transpose(1, 2), ids[:, 1:], reduction="none")
    if reduction == "none":
        return nll * mask
    if reduction == "sum":
        return nll[mask].sum()
    return nll[mask].mean()


def grad(model: nn.Module, loss_fn: Callable[[], torch.Tensor],
         trainable: Sequence[str] | None = None) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients keyed by parameter name; frozen parameters are absent."""
    named = dict(model.named_parameters())
    names = list(named) if trainable is None else [n for n in trainable if n in named]
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()} ({len(names)} trainable tensors)")
    gs = torch.autograd.grad(loss, [named[n] for n in names], allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(named[n])) for n, g in zip(names, gs)}


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))
    return torch.Generator().manual_seed(seed)


def build_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> Transformer:
    torch.manual_seed(seed)
    return Transformer(cfg).to(dtype)


# ---------------------------------------------------------------- decoding


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "greedy"  # or "nucleus"
    top_p: float = 0.9
    max_new: int = 32
    temperature: float = 1.0
    seed: int = 0


def _nucleus_pick(logits: torch.Tensor, top_p: float, temperature: float, gen: torch.Generator) -> int:
    probs = (logits / temperature).softmax(-1)
    order = torch.argsort(probs, descending=True, stable=True)
    sorted_p = probs[order]
    keep = int((sorted_p.cumsum(0) < top_p).sum().item()) + 1
    kept = sorted_p[:keep] / sorted_p[:keep].sum()
    choice = torch.multinomial(kept, 1, generator=gen).item()
    return int(order[choice])


@torch.no_grad()
def generate(model: Transformer, prefix: EncodedSequence, vocab: Vocabulary,
             decode: DecodeConfig = DecodeConfig(), inj: Injection | None = None,
             n_prompts: int = 0) -> list[int]:
    """Continue ``prefix`` (which must end inside the AR region) until [EOS] or ``max_new``."""
    if len(prefix) == 0 or prefix.region[-1] != AR:
        raise ContractError("generation prefix must end inside the autoregressive region")
    gen = torch.Generator().manual_seed(decode.seed)
    ids = list(prefix.ids)
    region = list(prefix.region)
    pos = list(prefix.pos)
    seg = list(prefix.seg)
    new: list[int] = []
    for _ in range(decode.max_new):
        if len(ids) >= model.cfg.max_len:
            break
        seq = EncodedSequence(np.array(ids), np.array(region), np.array(pos), np.array(seg),
                              np.zeros(len(ids), dtype=np.int64))
        logits = next_token_logits(model, seq, vocab, inj, n_prompts)
        if decode.strategy == "greedy" or decode.temperature <= 0:
            tok = int(torch.argmax(logits))
        else:
            tok = _nucleus_pick(logits, decode.top_p, decode.temperature, gen)
        new.append(tok)
        if tok == vocab.eos:
            break
        ids.append(tok)
        region.append(AR)
        pos.append(pos[-1] + 1)
        seg.append(seg[-1])
    return new


def next_token_logits(model: Transformer, seq: EncodedSequence, vocab: Vocabulary,
                      inj: Injection | None = None, n_prompts: int = 0) -> torch.Tensor:
    batch = make_batch([seq], vocab.pad, n_prompts)
    tr = model.run(batch, inj)
    return model.lm_logits(tr.out[0, -1])

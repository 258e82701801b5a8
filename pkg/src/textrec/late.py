"""Split-stage scoring: cache per-segment states from the first L' layers, interact in the rest.

Training runs the same computation in one pass: a block-diagonal-by-segment mask
for layers below L', segment-index embeddings added at layer L', then the full mask.
"""
from __future__ import annotations

import hashlib
import logging
import struct
import threading
import time
from collections import OrderedDict
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .adaptation import TuneConfig, TuningState, readout, tune
from .checkpoint import fingerprint, model_fingerprint
from .model import Batch, ContractError, Transformer, gather_rows, make_batch
from .text import (AR, BIDIR, BehaviorRecord, EncodedSequence, EncodingError, Vocabulary,
                   encode_segment as _encode_segment_text, encode_segments, segment_split)

logger = logging.getLogger(__name__)

MAX_INTERACTION_LAYERS = 3


@dataclass(frozen=True)
class LateInteractionConfig:
    n_layers: int
    interaction_layers: int = 3
    max_segments: int = 32
    cache_capacity: int = 100_000
    cache_path: str | None = None
    cache_candidate: bool = False

    def __post_init__(self) -> None:
        if not 1 <= self.interaction_layers <= min(MAX_INTERACTION_LAYERS, self.n_layers):
            raise ContractError(
                f"interaction layers must be in [1, {min(MAX_INTERACTION_LAYERS, self.n_layers)}], "
                f"got {self.interaction_layers}"
            )

    @property
    def prefix_layers(self) -> int:
        return self.n_layers - self.interaction_layers


@dataclass(frozen=True)
class SegmentKey:
    content: bytes      # sha256 of the segment text
    fingerprint: bytes  # 32-byte store fingerprint (model + prefix-affecting tuning tensors)
    prefix_layers: int

    def to_bytes(self) -> bytes:
        return self.content + self.fingerprint + struct.pack("<H", self.prefix_layers)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SegmentKey":
        return cls(raw[:32], raw[32:64], struct.unpack("<H", raw[64:66])[0])

    @classmethod
    def of(cls, text: str, fp: bytes, prefix_layers: int) -> "SegmentKey":
        return cls(hashlib.sha256(text.encode("utf-8")).digest(), fp, prefix_layers)


KEY_BYTES = 66


@dataclass
class CachedPrefix:
    states: torch.Tensor  # (n, d) hidden states after the first L' layers
    region: np.ndarray    # (n,) region tags
    eos_offset: int = -1  # index of [EOS] inside the segment
    created: float = field(default_factory=time.time)

    @property
    def n_tokens(self) -> int:
        return self.states.shape[0]


def store_fingerprint(model: Transformer, prefix_layers: int, state: TuningState | None = None,
                      base_fp: str | None = None) -> bytes:
    """Cache namespace: the model plus any tuning tensors that reach the cached layers."""
    base_fp = base_fp or model_fingerprint(state.model(model) if state is not None else model)
    extra = state.prefix_tensors(prefix_layers) if state is not None else {}
    return bytes.fromhex(fingerprint({"base": base_fp, "prefix_layers": prefix_layers}, extra))


class SegmentCache:
    """LRU of :class:`CachedPrefix` fronting an optional append-only file.

    Disk records: key (66 bytes), u32 tokens, u32 width, u8 region tags, i32 eos
    offset, then tokens x width float32 row-major.  Records from another
    fingerprint are skipped on load.
    """

    def __init__(self, fp: bytes, capacity: int = 100_000, path: str | Path | None = None):
        self.fp = fp
        self.capacity = capacity
        self.path = Path(path) if path else None
        self._data: OrderedDict[bytes, CachedPrefix] = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if self.path is not None and self.path.exists():
            self._load()

    def __len__(self) -> int:
        return len(self._data)

    def __contains__(self, key: SegmentKey) -> bool:
        return key.to_bytes() in self._data

    def get(self, key: SegmentKey) -> CachedPrefix | None:
        with self._lock:
            kb = key.to_bytes()
            hit = self._data.get(kb)
            if hit is not None:
                self._data.move_to_end(kb)
            return hit

    def put(self, key: SegmentKey, value: CachedPrefix, persist: bool = True) -> None:
        with self._lock:
            kb = key.to_bytes()
            self._data[kb] = value
            self._data.move_to_end(kb)
            while len(self._data) > self.capacity:
                self._data.popitem(last=False)
            if persist and self.path is not None:
                self._append(kb, value)

    def _append(self, kb: bytes, v: CachedPrefix) -> None:
        mat = v.states.detach().to(torch.float32).contiguous().numpy()
        with open(self.path, "ab") as f:
            f.write(kb)
            f.write(struct.pack("<IIi", mat.shape[0], mat.shape[1], v.eos_offset))
            f.write(v.region.astype(np.uint8).tobytes())
            f.write(mat.tobytes())

    def _load(self) -> None:
        data = self.path.read_bytes()
        off = 0
        kept = skipped = 0
        while off + KEY_BYTES + 12 <= len(data):
            kb = data[off:off + KEY_BYTES]
            n, d, eos = struct.unpack_from("<IIi", data, off + KEY_BYTES)
            off += KEY_BYTES + 12
            region = np.frombuffer(data[off:off + n], dtype=np.uint8).astype(np.int64)
            off += n
            mat = np.frombuffer(data[off:off + 4 * n * d], dtype=np.float32).reshape(n, d).copy()
            off += 4 * n * d
            if SegmentKey.from_bytes(kb).fingerprint != self.fp:
                skipped += 1
                continue
            self.put(SegmentKey.from_bytes(kb), CachedPrefix(torch.from_numpy(mat), region, eos),
                     persist=False)
            kept += 1
        if skipped:
            logger.info("ignored %d cache records from other model fingerprints", skipped)


# ---------------------------------------------------------------- stages


def _single(seq: EncodedSequence, vocab: Vocabulary, n_prompts: int = 0) -> Batch:
    return make_batch([seq], vocab.pad, n_prompts)


def _empty_seq() -> EncodedSequence:
    z = np.zeros(0, dtype=np.int64)
    return EncodedSequence(z, z, z, z, z)


@torch.no_grad()
def encode_segment(model: Transformer, text: str, vocab: Vocabulary, prefix_layers: int,
                   state: TuningState | None = None) -> CachedPrefix:
    """Layers 0..L' on one segment alone, positions starting at 1."""
    seq = _encode_segment_text(text, vocab)
    if len(seq) == 0:
        raise EncodingError("empty segment")
    m = state.model(model) if state is not None else model
    inj = state.injection(vocab) if state is not None else None
    if inj is not None:
        inj.prompts = None  # prompts are their own segment
    tr = m.run(_single(seq, vocab), inj, stop=prefix_layers)
    return CachedPrefix(tr.hidden[prefix_layers][0].clone(), seq.region.copy(), seq.eos_index)


@torch.no_grad()
def encode_prompt_segment(model: Transformer, state: TuningState, vocab: Vocabulary,
                          prefix_layers: int) -> CachedPrefix | None:
    if state is None or state.n_prompts == 0:
        return None
    m = state.model(model)
    batch = _single(_empty_seq(), vocab, state.n_prompts)
    tr = m.run(batch, state.injection(vocab), stop=prefix_layers)
    return CachedPrefix(tr.hidden[prefix_layers][0].clone(), np.full(state.n_prompts, BIDIR))


def cache_lookup_or_compute(store: SegmentCache, model: Transformer, text: str, vocab: Vocabulary,
                            prefix_layers: int, state: TuningState | None = None,
                            persist: bool = True) -> tuple[CachedPrefix, bool]:
    key = SegmentKey.of(text, store.fp, prefix_layers)
    hit = store.get(key)
    if hit is not None:
        store.hits += 1
        return hit, True
    store.misses += 1
    value = encode_segment(model, text, vocab, prefix_layers, state)
    store.put(key, value, persist=persist)
    return value, False


@torch.no_grad()
def interact(model: Transformer, prefixes: Sequence[CachedPrefix], vocab: Vocabulary,
             prefix_layers: int, state: TuningState | None = None,
             prompt_prefix: CachedPrefix | None = None, max_segments: int | None = None
             ) -> torch.Tensor:
    """Concatenate cached segments, add segment-index embeddings, run layers L'..L, read [EOS]."""
    m = state.model(model) if state is not None else model
    limit = max_segments if max_segments is not None else m.cfg.max_segments
    if len(prefixes) > limit:
        raise ContractError(f"{len(prefixes)} segments exceed the limit of {limit}")
    parts = ([prompt_prefix] if prompt_prefix is not None else []) + list(prefixes)
    first_seg = 0 if prompt_prefix is not None else 1
    h = torch.cat([p.states for p in parts])[None]
    T = h.shape[1]
    if T > m.cfg.max_len + (prompt_prefix.n_tokens if prompt_prefix is not None else 0):
        raise ContractError(f"request of {T} tokens exceeds max_len")
    region = torch.from_numpy(np.concatenate([p.region for p in parts]))[None]
    seg = torch.cat([torch.full((p.n_tokens,), first_seg + i, dtype=torch.long)
                     for i, p in enumerate(parts)])[None]
    last = prefixes[-1]
    if last.eos_offset < 0:
        raise ContractError("last segment carries no [EOS]")
    eos = torch.tensor([T - last.n_tokens + last.eos_offset])
    zeros = torch.zeros(1, T, dtype=torch.long)
    batch = Batch(zeros, zeros, seg, region, torch.zeros(1, T, dtype=torch.bool), zeros,
                  eos, torch.tensor([-1]), torch.tensor([0]))
    inj = state.injection(vocab) if state is not None else None
    tr = m.run(batch, inj, start=prefix_layers, h_start=h, add_segments_at=prefix_layers)
    return readout(m, state, tr.out, eos)[0]


def single_pass_logits(model: Transformer, seqs: Sequence[EncodedSequence], vocab: Vocabulary,
                       prefix_layers: int, state: TuningState | None = None) -> torch.Tensor:
    """Training-time path: one forward with block-diagonal masking below layer L'."""
    m = state.model(model) if state is not None else model
    P = state.n_prompts if state is not None else 0
    batch = make_batch(seqs, vocab.pad, P)
    inj = state.injection(vocab) if state is not None else None
    tr = m.run(batch, inj, block_layers=prefix_layers, add_segments_at=prefix_layers)
    return readout(m, state, tr.out, batch.eos)


class LateInteractionScorer:
    """Serving object: segments a request, reuses cached prefixes, runs the interaction layers."""

    def __init__(self, model: Transformer, vocab: Vocabulary, cfg: LateInteractionConfig,
                 state: TuningState | None = None):
        if cfg.n_layers != model.cfg.n_layers:
            raise ContractError("config layer count does not match the model")
        self.model, self.vocab, self.cfg, self.state = model, vocab, cfg, state
        self.fp = store_fingerprint(model, cfg.prefix_layers, state)
        self.cache = SegmentCache(self.fp, cfg.cache_capacity, cfg.cache_path)
        self.prompt_prefix = encode_prompt_segment(model, state, vocab, cfg.prefix_layers)
        self.last_timing: tuple[float, float] = (0.0, 0.0)

    def prefixes(self, record: BehaviorRecord) -> tuple[list[CachedPrefix], int]:
        texts = segment_split(record)
        out, hits = [], 0
        for i, text in enumerate(texts):
            if i == len(texts) - 1 and not self.cfg.cache_candidate:
                out.append(encode_segment(self.model, text, self.vocab, self.cfg.prefix_layers,
                                          self.state))
                continue
            p, hit = cache_lookup_or_compute(self.cache, self.model, text, self.vocab,
                                             self.cfg.prefix_layers, self.state)
            out.append(p)
            hits += hit
        return out, hits

    def logits(self, record: BehaviorRecord) -> tuple[torch.Tensor, int]:
        t0 = time.perf_counter()
        prefixes, hits = self.prefixes(record)
        t1 = time.perf_counter()
        out = interact(self.model, prefixes, self.vocab, self.cfg.prefix_layers, self.state,
                       self.prompt_prefix, self.cfg.max_segments)
        self.last_timing = (t1 - t0, time.perf_counter() - t1)
        return out, hits

    def predict(self, record: BehaviorRecord) -> float:
        return float(self.logits(record)[0].softmax(-1)[1])


def segmented_sequences(records: Sequence[BehaviorRecord], vocab: Vocabulary
                        ) -> list[EncodedSequence]:
    return [encode_segments(segment_split(r), vocab) for r in records]


def train_late_interaction(
    model: Transformer,
    records: Sequence[BehaviorRecord],
    cfg: LateInteractionConfig,
    method: str,
    vocab: Vocabulary,
    tune_cfg: TuneConfig = TuneConfig(),
) -> tuple[TuningState, list[float]]:
    """Tune ``method`` with the single-pass block-masked forward, one forward per batch."""
    seqs = segmented_sequences(records, vocab)
    labels = torch.tensor([int(r.label) for r in records])
    if method != "fine" and not tune_cfg.segment_rows:
        tune_cfg = TuneConfig(**{**tune_cfg.__dict__, "segment_rows": True})

    def loss_fn(state: TuningState, idx: list[int]) -> torch.Tensor:
        logits = single_pass_logits(model, [seqs[i] for i in idx], vocab, cfg.prefix_layers, state)
        return F.cross_entropy(logits, labels[idx])

    return tune(model, seqs, labels.tolist(), method, vocab, tune_cfg, loss_fn=loss_fn)


def late_scores(model: Transformer, records: Sequence[BehaviorRecord], vocab: Vocabulary,
                prefix_layers: int, state: TuningState | None = None,
                batch_size: int = 128) -> np.ndarray:
    """Batched positive-class probabilities from the single-pass path (evaluation helper)."""
    seqs = segmented_sequences(records, vocab)
    out = []
    with torch.no_grad():
        for i in range(0, len(seqs), batch_size):
            out.append(single_pass_logits(model, seqs[i:i + batch_size], vocab, prefix_layers,
                                          state).softmax(-1)[:, 1])
    return torch.cat(out).double().numpy()

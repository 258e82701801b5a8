"""Dual-encoder retrieval: users and items become 128-d unit vectors read from one
backbone through two separate projections, trained with in-batch negatives and
served by exact brute-force kNN."""
from __future__ import annotations

import logging
import struct
import warnings
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .model import ContractError, Transformer, gather_rows, make_batch
from .text import BehaviorRecord, EncodedSequence, Item, Vocabulary, encode_record
from .training import fit

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RetrievalConfig:
    dim: int = 128
    temperature: float = 0.07
    batch_size: int = 64
    steps: int = 300
    lr: float = 5e-4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 2:
            raise ValueError("in-batch negatives need a batch of at least 2")


def _normalize(v: torch.Tensor) -> torch.Tensor:
    norm = v.norm(dim=-1, keepdim=True)
    zero = (norm == 0).squeeze(-1)
    if zero.any():
        warnings.warn("zero retrieval vector; falling back to the first basis vector", RuntimeWarning)
        basis = torch.zeros_like(v)
        basis[..., 0] = 1.0
        v = torch.where(zero[..., None], basis, v)
        norm = torch.where(zero[..., None], torch.ones_like(norm), norm)
    return v / norm


def item_record(item: Item) -> BehaviorRecord:
    return BehaviorRecord(user={}, events=[], candidate=item)


def user_sequences(records: Sequence[BehaviorRecord], vocab: Vocabulary, max_len: int = 256
                   ) -> list[EncodedSequence]:
    return [encode_record(r, "retrieval_user", vocab, max_len) for r in records]


def item_sequences(items: Sequence[Item], vocab: Vocabulary, max_len: int = 256) -> list[EncodedSequence]:
    return [encode_record(item_record(it), "retrieval_item", vocab, max_len) for it in items]


def user_vectors(model: Transformer, seqs: Sequence[EncodedSequence], vocab: Vocabulary) -> torch.Tensor:
    batch = make_batch(seqs, vocab.pad)
    out = model.run(batch).out
    return _normalize(model.user_proj(gather_rows(out, batch.eos_p)))


def item_vectors(model: Transformer, seqs: Sequence[EncodedSequence], vocab: Vocabulary) -> torch.Tensor:
    batch = make_batch(seqs, vocab.pad)
    out = model.run(batch).out
    return _normalize(model.item_proj(gather_rows(out, batch.eos)))


@torch.no_grad()
def encode_user(model: Transformer, record: BehaviorRecord, vocab: Vocabulary) -> np.ndarray:
    """Unit vector from the [EOS'] output through the user projection."""
    return user_vectors(model, user_sequences([record], vocab, model.cfg.max_len), vocab)[0].numpy()


@torch.no_grad()
def encode_item(model: Transformer, item: Item, vocab: Vocabulary) -> np.ndarray:
    """Unit vector from the [EOS] output through the item projection."""
    return item_vectors(model, item_sequences([item], vocab, model.cfg.max_len), vocab)[0].numpy()


def contrastive_loss(x: torch.Tensor, y: torch.Tensor, temperature: float = 0.07,
                     reduction: str = "mean") -> torch.Tensor:
    """In-batch softmax loss: row i of ``x`` is positive with row i of ``y``, negative with the rest."""
    n = x.shape[0]
    if n < 2:
        raise ContractError("contrastive loss needs at least two pairs for in-batch negatives")
    logits = (x @ y.T) / temperature
    return F.cross_entropy(logits, torch.arange(n), reduction=reduction)


# ---------------------------------------------------------------- index


class RetrievalIndex:
    """Immutable exact inner-product index over unit vectors."""

    def __init__(self, ids: Sequence[str], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float32)
        if len(ids) != len(vectors):
            raise ValueError("ids and vectors differ in length")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate item ids")
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
        if len(norms) and np.abs(norms - 1).max() > 1e-5:
            raise ValueError("index vectors must be unit norm")
        order = np.argsort(np.asarray(ids, dtype=object), kind="stable")
        # stored sorted by id so a stable sort on score breaks ties by id
        self.ids = [ids[i] for i in order]
        self.vectors = vectors[order]
        self.vectors.setflags(write=False)

    def __len__(self) -> int:
        return len(self.ids)

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as f:
            f.write(struct.pack("<I", len(self.ids)))
            for i, v in zip(self.ids, self.vectors):
                raw = i.encode("utf-8")
                f.write(struct.pack("<I", len(raw)))
                f.write(raw)
                f.write(v.astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path, dim: int = 128) -> "RetrievalIndex":
        data = Path(path).read_bytes()
        (n,) = struct.unpack_from("<I", data, 0)
        off = 4
        ids, vecs = [], []
        for _ in range(n):
            (m,) = struct.unpack_from("<I", data, off)
            off += 4
            ids.append(data[off:off + m].decode("utf-8"))
            off += m
            vecs.append(np.frombuffer(data, dtype="<f4", count=dim, offset=off))
            off += 4 * dim
        return cls(ids, np.stack(vecs) if vecs else np.zeros((0, dim), np.float32))


@dataclass
class KnnResult:
    ids: list[str]
    scores: np.ndarray
    truncated: bool  # K exceeded the index size


def knn_query(index: RetrievalIndex, x: np.ndarray, k: int) -> KnnResult:
    """Exact top-k by inner product; ties go to the smaller item id."""
    if len(index) == 0:
        raise ContractError("query against an empty index")
    scores = index.vectors.astype(np.float64) @ np.asarray(x, dtype=np.float64)
    flagged = k > len(index)
    if flagged:
        logger.warning("K=%d exceeds index size %d; returning every item", k, len(index))
    k = min(k, len(index))
    order = np.argsort(-scores, kind="stable")[:k]
    return KnnResult([index.ids[i] for i in order], scores[order], flagged)


@torch.no_grad()
def build_index(model: Transformer, items: Sequence[Item], vocab: Vocabulary,
                batch_size: int = 256) -> RetrievalIndex:
    seqs = item_sequences(items, vocab, model.cfg.max_len)
    vecs = [item_vectors(model, seqs[i:i + batch_size], vocab) for i in range(0, len(seqs), batch_size)]
    return RetrievalIndex([it.item_id for it in items], torch.cat(vecs).numpy())


@torch.no_grad()
def hitrate_at_k(model: Transformer, index: RetrievalIndex, users: Sequence[BehaviorRecord],
                 positives: Sequence[str], vocab: Vocabulary, k: int = 100, batch_size: int = 256) -> float:
    """Fraction of users whose positive item id is in their top-k."""
    if not users:
        raise ContractError("no evaluation pairs")
    seqs = user_sequences(users, vocab, model.cfg.max_len)
    hits = 0
    for i in range(0, len(seqs), batch_size):
        xs = user_vectors(model, seqs[i:i + batch_size], vocab).numpy()
        for x, pos in zip(xs, positives[i:i + batch_size]):
            hits += pos in knn_query(index, x, k).ids
    return hits / len(users)


def hitrate_from_ranks(ranks: Sequence[int], k: int) -> float:
    """HitRate@k given 1-based ranks of each positive."""
    if len(ranks) == 0:
        raise ContractError("no ranks")
    return float(np.mean(np.asarray(ranks) <= k))


def train_retrieval(model: Transformer, users: Sequence[BehaviorRecord], items: Sequence[Item],
                    vocab: Vocabulary, cfg: RetrievalConfig = RetrievalConfig()) -> list[float]:
    """Fine-tune backbone and both projections in place on (user, positive item) pairs."""
    if model.cfg.retrieval_dim != cfg.dim:
        raise ContractError(f"model projects to {model.cfg.retrieval_dim} dims, config wants {cfg.dim}")
    useqs = user_sequences(users, vocab, model.cfg.max_len)
    iseqs = item_sequences(items, vocab, model.cfg.max_len)
    rng = np.random.default_rng(cfg.seed)
    n = len(useqs)

    def step_loss(_t: int) -> torch.Tensor:
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        x = user_vectors(model, [useqs[i] for i in idx], vocab)
        y = item_vectors(model, [iseqs[i] for i in idx], vocab)
        return contrastive_loss(x, y, cfg.temperature)

    model.train()
    curve = fit(model.parameters(), step_loss, cfg.steps, cfg.lr)
    model.eval()
    return curve

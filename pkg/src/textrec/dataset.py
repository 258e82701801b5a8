"""On-disk experiment datasets: the synthetic logs plus the vocabulary built from them."""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .synthetic import SyntheticData, write_dataset
from .text import BehaviorRecord, Item, Vocabulary, build_vocab, load_templates, read_jsonl, render_task_text

VOCAB_FILE = "vocab.txt"
MAX_VOCAB = 4000


def vocab_corpus(data: SyntheticData) -> list[str]:
    """Every text the pipeline can render from this dataset, plus template wording."""
    texts = list(data.corpus)
    for r in data.ctr_train:
        texts.append(" ".join(render_task_text(r, "score")))
    for r, _ in data.retrieval_train:
        texts.append(render_task_text(r, "retrieval_user")[0])
    texts.extend(re.sub(r"\{\w+\}", " ", s) for k, s in sorted(load_templates().items()) if k != "version")
    texts.append("USER: SYSTEM:")
    return texts


def build_task_vocab(data: SyntheticData, max_size: int = MAX_VOCAB) -> Vocabulary:
    return build_vocab(vocab_corpus(data), max_size)


def save_dataset(data: SyntheticData, out_dir: str | Path) -> Vocabulary:
    write_dataset(data, out_dir)
    vocab = build_task_vocab(data)
    vocab.save(Path(out_dir) / VOCAB_FILE)
    return vocab


@dataclass
class Dataset:
    vocab: Vocabulary
    items: list[Item]
    ctr_train: list[BehaviorRecord]
    ctr_train_p: np.ndarray
    ctr_test: list[BehaviorRecord]
    ctr_test_p: np.ndarray
    retrieval_train: list[tuple[BehaviorRecord, str]]
    retrieval_test: list[tuple[BehaviorRecord, str]]
    retrieval_unseen: list[tuple[BehaviorRecord, str]]
    unseen_items: list[str]
    preference_pairs: list[tuple[str, str, str]]
    corpus: list[str]

    @classmethod
    def from_synthetic(cls, data: SyntheticData, vocab: Vocabulary | None = None) -> "Dataset":
        return cls(vocab or build_task_vocab(data), list(data.items), data.ctr_train, data.ctr_train_p,
                   data.ctr_test, data.ctr_test_p, data.retrieval_train, data.retrieval_test,
                   data.retrieval_unseen, data.unseen_items, data.preference_pairs, data.corpus)

    def item_by_id(self) -> dict[str, Item]:
        return {it.item_id: it for it in self.items}


def _ctr(path: Path) -> tuple[list[BehaviorRecord], np.ndarray]:
    rows = read_jsonl(path)
    return [BehaviorRecord.from_dict(r) for r in rows], np.asarray([r["p"] for r in rows])


def _pairs(path: Path) -> list[tuple[BehaviorRecord, str]]:
    return [(BehaviorRecord.from_dict(r["user"]), r["item_id"]) for r in read_jsonl(path)]


def load_dataset(data_dir: str | Path) -> Dataset:
    d = Path(data_dir)
    tr, tr_p = _ctr(d / "ctr_train.jsonl")
    te, te_p = _ctr(d / "ctr_test.jsonl")
    return Dataset(
        Vocabulary.load(d / VOCAB_FILE),
        [Item(**r) for r in read_jsonl(d / "items.jsonl")],
        tr, tr_p, te, te_p,
        _pairs(d / "retrieval_train.jsonl"), _pairs(d / "retrieval_test.jsonl"),
        _pairs(d / "retrieval_unseen.jsonl"),
        [r["item_id"] for r in read_jsonl(d / "unseen_items.jsonl")],
        [(r["context"], r["preferred"], r["other"]) for r in read_jsonl(d / "preference_pairs.jsonl")],
        (d / "corpus.txt").read_text(encoding="utf-8").splitlines(),
    )

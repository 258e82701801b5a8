"""Behavior records as plain text: vocabulary, task templates, and region-tagged encoding."""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

BOS_P = "[BOS']"
EOS_P = "[EOS']"
BOS = "[BOS]"
EOS = "[EOS]"
MASK = "[MASK]"
PAD = "[PAD]"
UNK = "[UNK]"
SPECIALS = (BOS_P, EOS_P, BOS, EOS, MASK, PAD, UNK)

# region tags
BIDIR = 0
AR = 1
PADDING = 2

TASKS = (
    "score",
    "explain",
    "product_design",
    "query_gen",
    "dialog",
    "retrieval_user",
    "retrieval_item",
    "zeroshot",
)

_SPECIAL_RE = re.compile("(" + "|".join(re.escape(s) for s in SPECIALS) + ")")
_WORD_RE = re.compile(r"\w+|[^\w\s]")


class ConfigError(ValueError):
    pass


class TemplateError(KeyError):
    pass


class EncodingError(ValueError):
    pass


def tokenize(text: str, allow_special: bool = False) -> list[str]:
    """Lower-cased word/punctuation tokens.

    With ``allow_special`` the literal strings ``[BOS']``, ``[EOS]`` etc. come back
    as single special tokens; otherwise they are split like any other text, so
    corpus tokenization can never produce a special token.
    """
    if not allow_special:
        return _WORD_RE.findall(text.lower())
    out: list[str] = []
    for piece in _SPECIAL_RE.split(text):
        if piece in SPECIALS:
            out.append(piece)
        elif piece:
            out.extend(_WORD_RE.findall(piece.lower()))
    return out


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("duplicate tokens in vocabulary")
        missing = [s for s in SPECIALS if s not in self.index]
        if missing:
            raise ConfigError(f"vocabulary lacks special tokens {missing}")
        self.bos_p = self.index[BOS_P]
        self.eos_p = self.index[EOS_P]
        self.bos = self.index[BOS]
        self.eos = self.index[EOS]
        self.mask = self.index[MASK]
        self.pad = self.index[PAD]
        self.unk = self.index[UNK]

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def special_ids(self) -> tuple[int, ...]:
        return tuple(self.index[s] for s in SPECIALS)

    @property
    def delimiter_ids(self) -> tuple[int, int, int, int]:
        return (self.bos_p, self.eos_p, self.bos, self.eos)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, self.unk) for t in tokens]

    def encode_text(self, text: str, allow_special: bool = False) -> list[int]:
        return self.ids(tokenize(text, allow_special=allow_special))

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[int(i)] for i in ids)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for i, tok in enumerate(self.tokens):
                f.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        pairs = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, idx = line.rsplit("\t", 1)
                pairs.append((int(idx), tok))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ConfigError(f"{path}: ids are not dense from 0")
        return cls([t for _, t in pairs])


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocabulary:
    """Frequency-ranked word vocabulary with the special tokens appended.

    Ties keep first-occurrence order, so the result depends only on the corpus order.
    """
    counts: Counter[str] = Counter()
    n_lines = 0
    for line in corpus:
        n_lines += 1
        counts.update(tokenize(line))
    if n_lines == 0 or not counts:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    # Counter preserves insertion order, and sorted() is stable
    ranked = sorted(counts, key=lambda t: -counts[t])[:max_size]
    return Vocabulary(ranked + list(SPECIALS))


# ---------------------------------------------------------------- records


@dataclass
class Event:
    verb: str
    category: str
    title: str
    time: str = ""
    ts: float = 0.0


@dataclass
class Item:
    item_id: str
    category: str
    title: str
    stats: str = ""
    details: str = ""


@dataclass
class BehaviorRecord:
    user: dict[str, str] = field(default_factory=dict)
    events: list[Event] = field(default_factory=list)
    candidate: Item | None = None
    label: int | None = None
    cross: str = ""
    explanation: str = ""
    query: str = ""
    dialog: list[tuple[str, str]] = field(default_factory=list)
    record_id: str = ""
    user_id: str = ""

    def __post_init__(self) -> None:
        self.events = sorted(self.events, key=lambda e: e.ts)
        if self.label is not None and self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dialog"] = [list(turn) for turn in self.dialog]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BehaviorRecord":
        cand = d.get("candidate")
        return cls(
            user=dict(d.get("user", {})),
            events=[Event(**e) for e in d.get("events", [])],
            candidate=Item(**cand) if cand else None,
            label=d.get("label"),
            cross=d.get("cross", ""),
            explanation=d.get("explanation", ""),
            query=d.get("query", ""),
            dialog=[(s, t) for s, t in d.get("dialog", [])],
            record_id=d.get("record_id", ""),
            user_id=d.get("user_id", ""),
        )


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def read_records(path: str | Path) -> list[BehaviorRecord]:
    return [BehaviorRecord.from_dict(d) for d in read_jsonl(path)]


# ---------------------------------------------------------------- templates

_DEFAULT_TEMPLATES = Path(__file__).with_name("templates.json")


@lru_cache(maxsize=8)
def load_templates(path: str | None = None) -> dict[str, str]:
    with open(path or _DEFAULT_TEMPLATES, encoding="utf-8") as f:
        return json.load(f)


def _need(value, name: str, task: str):
    if value is None or value == "" or value == [] or value == {}:
        raise TemplateError(f"task {task!r} needs record field {name!r}")
    return value


def _profile(record: BehaviorRecord, t: dict[str, str]) -> str:
    return " ".join(t["profile_attr"].format(value=v) for v in record.user.values())


def render_event(e: Event, t: dict[str, str]) -> str:
    text = t["event"].format(verb=e.verb, category=e.category, title=e.title, time=e.time)
    return re.sub(r"\s+([.,])", r"\1", " ".join(text.split()))


def _candidate_clause(record: BehaviorRecord, t: dict[str, str], task: str) -> str:
    c = _need(record.candidate, "candidate", task)
    parts = [t["candidate"].format(category=c.category, title=c.title)]
    if c.stats:
        parts.append(t["candidate_stats"].format(stats=c.stats))
    if record.cross:
        parts.append(t["cross"].format(cross=record.cross))
    return " ".join(parts)


def render_clauses(
    record: BehaviorRecord, task: str, templates: dict[str, str] | None = None
) -> tuple[list[str], str]:
    """Like :func:`render_task_text` but keeps the bidirectional side as clauses.

    Clause 0 is the user profile (possibly empty); clauses 1.. are behavior
    events, oldest first.  Truncation uses this split.
    """
    t = templates or load_templates()
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    history = [_profile(record, t)] + [render_event(e, t) for e in record.events]
    if task == "score":
        return history, _candidate_clause(record, t, task)
    if task == "explain":
        c = _need(record.candidate, "candidate", task)
        ar = t["explain"].format(category=c.category, title=c.title, details=c.details)
        if record.explanation:
            ar = f"{ar} {record.explanation}"
        return history, ar
    if task == "product_design":
        ar = t["product_design"]
        if record.candidate is not None:
            c = record.candidate
            ar = f"{ar} {t['product_design_target'].format(category=c.category, title=c.title)}"
        return history, ar
    if task == "query_gen":
        ar = t["query_gen"]
        if record.query:
            ar = f"{ar} {record.query}"
        return history, ar
    if task == "dialog":
        turns = _need(record.dialog, "dialog", task)
        ar = " ".join(t["dialog_turn"].format(speaker=s.upper(), text=x) for s, x in turns)
        return history, ar
    if task == "retrieval_user":
        return history, ""
    if task == "retrieval_item":
        c = _need(record.candidate, "candidate", task)
        parts = [t["retrieval_item"].format(category=c.category, title=c.title)]
        if c.stats:
            parts.append(t["candidate_stats"].format(stats=c.stats))
        if c.details:
            parts.append(f"product details: {c.details}.")
        return [], " ".join(parts)
    # zeroshot
    events = _need(record.events, "events", task)
    c = _need(record.candidate, "candidate", task)
    ctx = t["zeroshot_context"].format(
        events=", ".join(t["zeroshot_event"].format(verb=e.verb, title=e.title) for e in events)
    )
    return [ctx], t["zeroshot_outcome"].format(title=c.title)


def render_task_text(
    record: BehaviorRecord, task: str, templates: dict[str, str] | None = None
) -> tuple[str, str]:
    clauses, ar = render_clauses(record, task, templates)
    return " ".join(c for c in clauses if c), ar


# ---------------------------------------------------------------- encoding


@dataclass(eq=False)
class EncodedSequence:
    ids: np.ndarray
    region: np.ndarray
    pos: np.ndarray
    seg: np.ndarray
    loss_mask: np.ndarray
    eos_index: int = -1
    eos_p_index: int = -1
    truncated: int = 0

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_segments(self) -> int:
        return int(self.seg.max()) if len(self.seg) else 0

    def same_as(self, other: "EncodedSequence") -> bool:
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("ids", "region", "pos", "seg", "loss_mask")
        ) and (self.eos_index, self.eos_p_index) == (other.eos_index, other.eos_p_index)

    def prefix(self, n: int) -> "EncodedSequence":
        """First ``n`` tokens (used for generation prompts)."""
        return EncodedSequence(
            self.ids[:n].copy(), self.region[:n].copy(), self.pos[:n].copy(),
            self.seg[:n].copy(), self.loss_mask[:n].copy(),
            self.eos_index if self.eos_index < n else -1,
            self.eos_p_index if self.eos_p_index < n else -1,
        )


def _finish(ids: list[int], region: list[int], pos: list[int], seg: list[int], vocab: Vocabulary,
            truncated: int = 0) -> EncodedSequence:
    ids_a = np.asarray(ids, dtype=np.int64)
    region_a = np.asarray(region, dtype=np.int64)
    loss = np.zeros(len(ids), dtype=np.int64)
    seen_bos = False
    for i, (tok, r) in enumerate(zip(ids, region)):
        if r == AR and seen_bos:
            loss[i] = 1
        if tok == vocab.bos and r == AR:
            seen_bos = True
    eos = np.flatnonzero(ids_a == vocab.eos)
    eos_p = np.flatnonzero(ids_a == vocab.eos_p)
    return EncodedSequence(
        ids_a, region_a,
        np.asarray(pos, dtype=np.int64), np.asarray(seg, dtype=np.int64), loss,
        int(eos[-1]) if len(eos) else -1,
        int(eos_p[-1]) if len(eos_p) else -1,
        truncated,
    )


def encode(
    bidir: str | Sequence[str], ar: str, vocab: Vocabulary, max_len: int = 256
) -> EncodedSequence:
    """``[BOS'] bidir [EOS'] [BOS] ar [EOS]`` with region tags, positions and loss mask.

    ``bidir`` may be a list of clauses (profile first, then events oldest first);
    on overflow whole event clauses are dropped oldest first, then leading tokens.
    The autoregressive side is never truncated.
    """
    clauses = [bidir] if isinstance(bidir, str) else list(bidir)
    return encode_ids([vocab.encode_text(c) for c in clauses], vocab.encode_text(ar), vocab, max_len)


def encode_ids(tok_clauses: Sequence[Sequence[int]], ar_ids: Sequence[int], vocab: Vocabulary,
               max_len: int = 256) -> EncodedSequence:
    """:func:`encode` on already-tokenized clauses."""
    tok_clauses = [list(c) for c in tok_clauses] or [[]]
    ar_ids = list(ar_ids)
    budget = max_len - len(ar_ids) - 4
    if budget < 0:
        raise EncodingError(f"autoregressive text alone needs {len(ar_ids) + 4} > {max_len} tokens")
    total = sum(map(len, tok_clauses))
    dropped = 0
    while total > budget and len(tok_clauses) > 1:
        gone = tok_clauses.pop(1)
        total -= len(gone)
        dropped += len(gone)
    b_ids = [i for c in tok_clauses for i in c]
    if len(b_ids) > budget:
        dropped += len(b_ids) - budget
        b_ids = b_ids[len(b_ids) - budget:]
    if dropped:
        logger.info("truncated %d bidirectional tokens to fit max_len=%d", dropped, max_len)
    ids = [vocab.bos_p, *b_ids, vocab.eos_p, vocab.bos, *ar_ids, vocab.eos]
    n_b = len(b_ids) + 2
    region = [BIDIR] * n_b + [AR] * (len(ids) - n_b)
    return _finish(ids, region, list(range(1, len(ids) + 1)), [1] * len(ids), vocab, dropped)


def encode_record(record: BehaviorRecord, task: str, vocab: Vocabulary, max_len: int = 256,
                  templates: dict[str, str] | None = None) -> EncodedSequence:
    clauses, ar = render_clauses(record, task, templates)
    return encode([c for c in clauses] or [""], ar, vocab, max_len)


def segment_split(record: BehaviorRecord, task: str = "score",
                  templates: dict[str, str] | None = None) -> list[str]:
    """Profile, one segment per behavior event, then the candidate.

    The candidate segment carries ``[EOS'] [BOS] ... [EOS]``; the profile segment
    opens with ``[BOS']``.  Cross features stay with the candidate.
    """
    if task != "score":
        raise ConfigError(f"segmentation is defined for scoring tasks, not {task!r}")
    clauses, ar = render_clauses(record, task, templates)
    profile, events = clauses[0], clauses[1:]
    first = f"{BOS_P} {profile}".rstrip()
    return [first, *events, f"{EOS_P} {BOS} {ar} {EOS}"]


def encode_segments(segments: Sequence[str], vocab: Vocabulary) -> EncodedSequence:
    """Concatenated segments with per-segment positions (restarting at 1) and segment ids 1..S."""
    ids: list[int] = []
    region: list[int] = []
    pos: list[int] = []
    seg: list[int] = []
    in_ar = False
    for s, text in enumerate(segments, start=1):
        toks = vocab.encode_text(text, allow_special=True)
        if not toks:
            raise EncodingError(f"segment {s} is empty")
        for p, tok in enumerate(toks, start=1):
            if tok == vocab.bos:
                in_ar = True
            ids.append(tok)
            region.append(AR if in_ar else BIDIR)
            pos.append(p)
            seg.append(s)
    return _finish(ids, region, pos, seg, vocab)


def encode_segment(text: str, vocab: Vocabulary) -> EncodedSequence:
    return encode_segments([text], vocab)

"""Text generation for the generative tasks and a dialog loop built on it."""
from __future__ import annotations

from collections.abc import Iterable, Iterator

from .adaptation import TuningState
from .model import DecodeConfig, Transformer, generate
from .text import BehaviorRecord, EncodedSequence, Vocabulary, encode, render_clauses

GENERATIVE_TASKS = {"explain": "explain", "product": "product_design", "query": "query_gen",
                    "dialog": "dialog"}


def generation_prefix(record: BehaviorRecord, task: str, vocab: Vocabulary, max_len: int = 256
                      ) -> EncodedSequence:
    """The encoded task text with its closing [EOS] removed, ready to be continued."""
    clauses, ar = render_clauses(record, GENERATIVE_TASKS.get(task, task))
    seq = encode(clauses or [""], ar, vocab, max_len - 1)
    return seq.prefix(seq.eos_index)


def generate_text(model: Transformer, vocab: Vocabulary, record: BehaviorRecord, task: str,
                  decode: DecodeConfig = DecodeConfig(), state: TuningState | None = None) -> str:
    prefix = generation_prefix(record, task, vocab, model.cfg.max_len)
    m = state.model(model) if state is not None else model
    inj = state.injection(vocab) if state is not None else None
    P = state.n_prompts if state is not None else 0
    new = generate(m, prefix, vocab, decode, inj, P)
    if new and new[-1] == vocab.eos:
        new = new[:-1]
    return vocab.decode(new)


def chat(model: Transformer, vocab: Vocabulary, user_turns: Iterable[str], record: BehaviorRecord | None = None,
         decode: DecodeConfig = DecodeConfig(), state: TuningState | None = None) -> Iterator[str]:
    """Yield one assistant reply per user turn, conditioning on the whole conversation so far."""
    record = record or BehaviorRecord()
    history: list[tuple[str, str]] = list(record.dialog)
    for text in user_turns:
        history.append(("user", text))
        probe = BehaviorRecord(user=record.user, events=record.events, dialog=history + [("system", "")])
        reply = generate_text(model, vocab, probe, "dialog", decode, state)
        # the model may run on into the next user turn
        reply = reply.split("user :")[0].strip()
        history.append(("system", reply))
        yield reply

"""Per-request latency measurement for the serving paths.

Every timed request includes text rendering and tokenization, not just the
matrix work, so numbers reflect what a caller waits for.
"""
from __future__ import annotations

import csv
import time
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .adaptation import TuningState, readout
from .late import LateInteractionConfig, LateInteractionScorer
from .model import ContractError, Transformer, make_batch
from .text import BehaviorRecord, Vocabulary, encode_record

MODES = ("monolithic", "late_interaction", "early_exit", "quantized")


@dataclass
class LatencyReport:
    mode: str
    samples_ms: list[float]

    @property
    def p50(self) -> float:
        return float(np.percentile(self.samples_ms, 50))

    @property
    def p95(self) -> float:
        return float(np.percentile(self.samples_ms, 95))

    @property
    def mean(self) -> float:
        return float(np.mean(self.samples_ms))


def _monolithic_request(model: Transformer, vocab: Vocabulary, state: TuningState | None,
                        exit_layer: int | None):
    m = state.model(model) if state is not None else model
    inj = state.injection(vocab) if state is not None else None
    P = state.n_prompts if state is not None else 0

    def run(record: BehaviorRecord) -> float:
        seq = encode_record(record, "score", vocab, model.cfg.max_len)
        batch = make_batch([seq], vocab.pad, P)
        tr = m.run(batch, inj, stop=exit_layer)
        return float(readout(m, state, tr.out, batch.eos)[0].softmax(-1)[1])

    return run


@torch.no_grad()
def latency_bench(
    model: Transformer,
    vocab: Vocabulary,
    records: Sequence[BehaviorRecord],
    mode: str,
    reps: int = 100,
    warmup: int = 10,
    state: TuningState | None = None,
    exit_layer: int | None = None,
    late: LateInteractionConfig | None = None,
) -> LatencyReport:
    """Time ``reps`` single-record requests cycling over ``records``.

    ``late_interaction`` first serves every record once so the cache is warm;
    ``quantized`` expects ``model`` to already carry int8-rounded weights.
    """
    if mode not in MODES:
        raise ContractError(f"unknown latency mode {mode!r}")
    if not records:
        raise ContractError("no records to benchmark")
    if mode == "late_interaction":
        if late is None:
            raise ContractError("late_interaction mode needs a LateInteractionConfig")
        scorer = LateInteractionScorer(model, vocab, late, state)
        for r in records:
            scorer.predict(r)
        request = scorer.predict
    elif mode == "early_exit":
        if exit_layer is None:
            raise ContractError("early_exit mode needs an exit layer")
        request = _monolithic_request(model, vocab, state, exit_layer)
    else:
        request = _monolithic_request(model, vocab, state, None)
    for i in range(warmup):
        request(records[i % len(records)])
    samples = []
    for i in range(reps):
        t0 = time.perf_counter()
        request(records[i % len(records)])
        samples.append((time.perf_counter() - t0) * 1e3)
    label = f"early_exit({exit_layer})" if mode == "early_exit" else mode
    return LatencyReport(label, samples)


def write_latency_csv(path: str | Path, reports: Sequence[LatencyReport]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mode", "p50_ms", "p95_ms", "mean_ms", "n"])
        for r in reports:
            w.writerow([r.mode, f"{r.p50:.4f}", f"{r.p95:.4f}", f"{r.mean:.4f}", len(r.samples_ms)])


def write_samples_csv(path: str | Path, reports: Sequence[LatencyReport]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mode", "request", "ms"])
        for r in reports:
            for i, s in enumerate(r.samples_ms):
                w.writerow([r.mode, i, f"{s:.4f}"])


@dataclass
class ServeRow:
    request_id: str
    hits: int
    phase1_ms: float
    phase2_ms: float
    total_ms: float


@torch.no_grad()
def serve_bench(scorer: LateInteractionScorer, records: Sequence[BehaviorRecord]) -> list[ServeRow]:
    """Serve each record once, reporting cache hits and per-phase timing."""
    rows = []
    for k, r in enumerate(records):
        t0 = time.perf_counter()
        _, hits = scorer.logits(r)
        total = (time.perf_counter() - t0) * 1e3
        p1, p2 = scorer.last_timing
        rows.append(ServeRow(r.record_id or str(k), hits, p1 * 1e3, p2 * 1e3, total))
    return rows


def write_serve_csv(path: str | Path, rows: Sequence[ServeRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["request_id", "cache_hits", "phase1_ms", "phase2_ms", "total_ms"])
        for r in rows:
            w.writerow([r.request_id, r.hits, f"{r.phase1_ms:.4f}", f"{r.phase2_ms:.4f}",
                        f"{r.total_ms:.4f}"])

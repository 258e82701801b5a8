import csv

import pytest

from conftest import make_record
from textrec.bench import MODES, LatencyReport, latency_bench, serve_bench, write_latency_csv, write_serve_csv
from textrec.compression import dequantized_copy, quantize_model
from textrec.generation import chat, generate_text, generation_prefix
from textrec.late import LateInteractionConfig, LateInteractionScorer
from textrec.model import ContractError, DecodeConfig
from textrec.text import AR


@pytest.mark.parametrize("mode", MODES)
def test_every_mode_times_requests(tiny_model, vocab, mode):
    recs = [make_record(k % 3 + 1) for k in range(4)]
    model = dequantized_copy(tiny_model, quantize_model(tiny_model)) if mode == "quantized" else tiny_model
    rep = latency_bench(model, vocab, recs, mode, reps=6, warmup=1, exit_layer=1,
                        late=LateInteractionConfig(n_layers=2, interaction_layers=1))
    assert len(rep.samples_ms) == 6 and rep.p50 > 0 and rep.p95 >= rep.p50


def test_bad_requests(tiny_model, vocab):
    with pytest.raises(ContractError):
        latency_bench(tiny_model, vocab, [make_record()], "gpu")
    with pytest.raises(ContractError):
        latency_bench(tiny_model, vocab, [], "monolithic")
    with pytest.raises(ContractError):
        latency_bench(tiny_model, vocab, [make_record()], "late_interaction")


def test_reports_written(tmp_path, tiny_model, vocab):
    write_latency_csv(tmp_path / "l.csv", [LatencyReport("monolithic", [1.0, 2.0, 3.0])])
    row = list(csv.DictReader(open(tmp_path / "l.csv")))[0]
    assert row["p50_ms"] == "2.0000" and row["n"] == "3"
    scorer = LateInteractionScorer(tiny_model, vocab, LateInteractionConfig(n_layers=2, interaction_layers=1))
    rows = serve_bench(scorer, [make_record(2), make_record(2)])
    assert [r.hits for r in rows] == [0, 3]
    write_serve_csv(tmp_path / "s.csv", rows)
    assert (tmp_path / "s.csv").read_text().startswith("request_id,cache_hits,phase1_ms")


def test_generation_prefix_is_open_ended(vocab, record):
    p = generation_prefix(record, "explain", vocab)
    assert p.region[-1] == AR and vocab.eos not in set(p.ids[p.region == AR])


def test_generation_and_chat(tiny_model, vocab, record):
    text = generate_text(tiny_model, vocab, record, "query", DecodeConfig(max_new=3))
    assert isinstance(text, str)
    replies = list(chat(tiny_model, vocab, ["hello", "more please"], decode=DecodeConfig(max_new=3)))
    assert len(replies) == 2

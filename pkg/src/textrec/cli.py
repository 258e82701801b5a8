"""Command-line entry point.

Every subcommand reads optional JSON config (``--config``), applies explicit flags
on top (flags win, then the config file, then built-in defaults), writes its
artifacts into ``--out`` and records a ``manifest.json`` there.  Manifests hold the
resolved config, its hash, content hashes of inputs and outputs, model
fingerprints, the seed and the metrics, and nothing time-dependent, so a rerun with
the same inputs reproduces them byte for byte.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from collections.abc import Callable
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger("textrec")

# keys naming files or directories: recorded by content hash, never by path
PATH_KEYS = ("data", "base", "state", "teacher", "index", "model", "world", "records", "candidates",
             "replay")
VOLATILE = {"serve.csv", "latency.csv"}   # wall-clock measurements


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- manifests


def _sha_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def content_hash(path: str | Path) -> str:
    p = Path(path)
    if p.is_dir():
        h = hashlib.sha256()
        for f in sorted(q for q in p.rglob("*") if q.is_file() and q.name != "manifest.json"):
            h.update(str(f.relative_to(p)).encode())
            h.update(_sha_file(f).encode())
        return h.hexdigest()
    return _sha_file(p)


def _clean(v):
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def write_manifest(out: Path, command: str, cfg: dict, metrics: dict, fingerprints: dict) -> dict:
    recorded = {k: v for k, v in cfg.items() if k not in PATH_KEYS and k not in ("out", "config")}
    inputs = {k: content_hash(cfg[k]) for k in PATH_KEYS if cfg.get(k)}
    artifacts = {f.name: _sha_file(f) for f in sorted(out.iterdir())
                 if f.is_file() and f.name != "manifest.json" and f.name not in VOLATILE}
    manifest = {
        "command": command,
        "config": recorded,
        "config_hash": hashlib.sha256(json.dumps(recorded, sort_keys=True).encode()).hexdigest(),
        "seed": cfg.get("seed"),
        "inputs": inputs,
        "fingerprints": fingerprints,
        "artifacts": artifacts,
        "metrics": _clean(metrics),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


# ---------------------------------------------------------------- shared loaders


def _need(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _load_model(path):
    from .checkpoint import load_checkpoint

    return load_checkpoint(path)[0]


def _load_state(cfg, base):
    from .adaptation import TuningState

    return TuningState.load(cfg["state"], base) if cfg.get("state") else None


def _ctr_seqs(records, vocab, max_len, interaction_layers):
    from .late import segmented_sequences
    from .text import encode_record

    if interaction_layers:
        return segmented_sequences(records, vocab)
    return [encode_record(r, "score", vocab, max_len) for r in records]


def _ctr_scores(base, state, records, vocab, interaction_layers: int) -> np.ndarray:
    from .late import late_scores
    from .objectives import score

    if interaction_layers:
        return late_scores(base, records, vocab, base.n_layers - interaction_layers, state)
    return score(base, _ctr_seqs(records, vocab, base.cfg.max_len, 0), vocab, state)


def _seed(cfg):
    from .model import seed_everything

    torch.set_num_threads(1)
    seed_everything(int(cfg["seed"]))


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(cfg, out):
    from .dataset import save_dataset
    from .metrics import auc
    from .synthetic import WorldSpec, generate_logs

    spec = WorldSpec.load(cfg["world"]) if cfg.get("world") else WorldSpec()
    spec = WorldSpec.from_dict({**spec.to_dict(), "seed": int(cfg["seed"])})
    data = generate_logs(spec, cfg["n_users"], cfg["n_items"], cfg["n_events"], cfg["unseen_fraction"],
                         cfg["n_corpus"], cfg["n_pairs"])
    vocab = save_dataset(data, out)
    y = [r.label for r in data.ctr_test]
    return {"oracle_auc": auc(data.ctr_test_p, y),
            "base_rate": float(np.mean([r.label for r in data.ctr_train])),
            "vocab_size": len(vocab), "n_ctr_train": len(data.ctr_train), "n_ctr_test": len(y),
            "n_items": len(data.items)}, {}


def _model_cfg(cfg, vocab):
    from .model import ModelConfig

    return ModelConfig(n_layers=cfg["layers"], n_heads=cfg["heads"], d_model=cfg["d_model"],
                       d_emb=cfg["d_emb"], vocab_size=len(vocab), max_len=cfg["max_len"],
                       share_layers=bool(cfg["share_layers"]))


def _split_corpus(ds):
    ids = [ds.vocab.encode_text(s) for s in ds.corpus]
    return [s for i, s in enumerate(ids) if i % 20], [s for i, s in enumerate(ids) if i % 20 == 0]


def cmd_pretrain(cfg, out):
    from .checkpoint import model_fingerprint, save_checkpoint
    from .dataset import load_dataset
    from .objectives import PretrainConfig, heldout_nll, pretrain
    from .training import write_curve

    _need(cfg, "data")
    ds = load_dataset(cfg["data"])
    train, held = _split_corpus(ds)
    pcfg = PretrainConfig(steps=cfg["steps"], lr=cfg["lr"], batch_size=cfg["batch_size"], seed=cfg["seed"])
    model, curve = pretrain(train, ds.vocab, _model_cfg(cfg, ds.vocab), pcfg)
    save_checkpoint(model, out / "model.ckpt")
    write_curve(out / "loss.csv", curve)
    nll = heldout_nll(model, held, ds.vocab)
    return ({"final_loss": float(np.mean(curve[-50:])), "heldout_nll": nll, "heldout_ppl": float(np.exp(nll))},
            {"model": model_fingerprint(model)})


METHOD_NAMES = {"fine": "fine", "prompt": "prompt", "option": "option", "option-adapter": "option_adapter"}


def cmd_tune(cfg, out):
    from .adaptation import TuneConfig, trainable_fraction, tune
    from .checkpoint import model_fingerprint
    from .dataset import load_dataset
    from .late import LateInteractionConfig, train_late_interaction
    from .metrics import auc
    from .training import write_curve

    _need(cfg, "base", "data")
    method = METHOD_NAMES[cfg["method"]]
    base = _load_model(cfg["base"])
    ds = load_dataset(cfg["data"])
    tcfg = TuneConfig(lr=cfg["lr"], steps=cfg["steps"], batch=cfg["batch_size"], n_prompts=cfg["n_prompts"],
                      rank=cfg["rank"], seed=cfg["seed"])
    k = cfg["interaction_layers"]
    if k:
        lcfg = LateInteractionConfig(n_layers=base.n_layers, interaction_layers=k)
        state, curve = train_late_interaction(base, ds.ctr_train, lcfg, method, ds.vocab, tcfg)
    else:
        seqs = _ctr_seqs(ds.ctr_train, ds.vocab, base.cfg.max_len, 0)
        state, curve = tune(base, seqs, [r.label for r in ds.ctr_train], method, ds.vocab, tcfg, task="ctr")
    fp = state.save(out / "state.bin")
    write_curve(out / "loss.csv", curve)
    test_auc = auc(_ctr_scores(base, state, ds.ctr_test, ds.vocab, k), [r.label for r in ds.ctr_test])
    return ({"test_auc": test_auc, "trainable_fraction": trainable_fraction(state, base),
             "final_loss": float(np.mean(curve[-50:]))},
            {"base": model_fingerprint(base), "state": fp})


def cmd_eval_ctr(cfg, out):
    import csv

    from .checkpoint import model_fingerprint
    from .dataset import load_dataset
    from .metrics import auc

    _need(cfg, "data")
    ds = load_dataset(cfg["data"])
    y = [r.label for r in ds.ctr_test]
    fps = {}
    if cfg["scorer"] == "oracle":
        scores = ds.ctr_test_p
    else:
        _need(cfg, "base")
        base = _load_model(cfg["base"])
        state = _load_state(cfg, base)
        fps["base"] = model_fingerprint(base)
        if state is not None:
            fps["state"] = content_hash(cfg["state"])
        scores = _ctr_scores(base, state, ds.ctr_test, ds.vocab, cfg["interaction_layers"])
    with open(out / "scores.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["record_id", "label", "score"])
        for r, s in zip(ds.ctr_test, scores):
            w.writerow([r.record_id, r.label, repr(float(s))])
    return {"auc": auc(scores, y), "oracle_auc": auc(ds.ctr_test_p, y)}, fps


def cmd_serve_bench(cfg, out):
    from .bench import latency_bench, serve_bench, write_latency_csv, write_serve_csv
    from .checkpoint import model_fingerprint
    from .dataset import load_dataset
    from .late import LateInteractionConfig, LateInteractionScorer

    _need(cfg, "base", "data")
    base = _load_model(cfg["base"])
    state = _load_state(cfg, base)
    ds = load_dataset(cfg["data"])
    records = ds.ctr_test[: cfg["n_requests"]]
    lcfg = LateInteractionConfig(n_layers=base.n_layers, interaction_layers=cfg["interaction_layers"],
                                 cache_candidate=bool(cfg["cache_candidate"]))
    scorer = LateInteractionScorer(base, ds.vocab, lcfg, state)
    cold = serve_bench(scorer, records)
    warm = serve_bench(scorer, records)
    for r in cold:
        r.request_id = f"cold:{r.request_id}"
    for r in warm:
        r.request_id = f"warm:{r.request_id}"
    write_serve_csv(out / "serve.csv", cold + warm)
    reports = [latency_bench(base, ds.vocab, records, "monolithic", reps=cfg["reps"], state=state),
               latency_bench(base, ds.vocab, records, "late_interaction", reps=cfg["reps"], state=state,
                             late=lcfg)]
    write_latency_csv(out / "latency.csv", reports)
    for r in reports:
        print(f"{r.mode}: p50 {r.p50:.3f} ms  p95 {r.p95:.3f} ms  mean {r.mean:.3f} ms")
    cold_ms = sum(r.total_ms for r in cold)
    warm_ms = sum(r.total_ms for r in warm)
    print(f"cold total {cold_ms:.1f} ms, warm total {warm_ms:.1f} ms")
    return ({"cold_hits": sum(r.hits for r in cold), "warm_hits": sum(r.hits for r in warm),
             "requests": len(records)},
            {"base": model_fingerprint(base)})


def cmd_retrieve_build(cfg, out):
    from .checkpoint import model_fingerprint, save_checkpoint
    from .dataset import load_dataset
    from .retrieval import RetrievalConfig, build_index, train_retrieval
    from .training import write_curve

    _need(cfg, "base", "data")
    model = _load_model(cfg["base"])
    ds = load_dataset(cfg["data"])
    metrics = {}
    if cfg["train_steps"]:
        items = ds.item_by_id()
        users = [u for u, _ in ds.retrieval_train]
        pos = [items[i] for _, i in ds.retrieval_train]
        rcfg = RetrievalConfig(temperature=cfg["temperature"], batch_size=cfg["batch_size"],
                               steps=cfg["train_steps"], lr=cfg["lr"], seed=cfg["seed"])
        curve = train_retrieval(model, users, pos, ds.vocab, rcfg)
        write_curve(out / "loss.csv", curve)
        metrics["final_loss"] = float(np.mean(curve[-20:]))
    save_checkpoint(model, out / "model.ckpt")
    index = build_index(model, ds.items, ds.vocab)
    index.save(out / "index.bin")
    metrics["n_items"] = len(index)
    return metrics, {"model": model_fingerprint(model)}


def cmd_retrieve_eval(cfg, out):
    import csv

    from .checkpoint import model_fingerprint
    from .dataset import load_dataset
    from .retrieval import RetrievalIndex, hitrate_at_k

    _need(cfg, "model", "index", "data")
    model = _load_model(cfg["model"])
    index = RetrievalIndex.load(cfg["index"], model.cfg.retrieval_dim)
    ds = load_dataset(cfg["data"])
    k = cfg["k"]
    rows = {}
    for split in ("retrieval_test", "retrieval_unseen"):
        pairs = getattr(ds, split)
        if pairs:
            rows[split] = hitrate_at_k(model, index, [u for u, _ in pairs], [i for _, i in pairs], ds.vocab, k)
    with open(out / "hitrate.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["split", "k", "hitrate"])
        for s, v in rows.items():
            w.writerow([s, k, repr(v)])
    return ({**{f"hitrate_{s.split('_')[1]}": v for s, v in rows.items()},
             "random_baseline": min(1.0, k / len(index))},
            {"model": model_fingerprint(model)})


def cmd_zeroshot(cfg, out):
    from .checkpoint import model_fingerprint
    from .metrics import pairwise_auc
    from .zeroshot import normalized_logliks, rank_events, write_ranking

    _need(cfg, "base")
    model = _load_model(cfg["base"])
    fps = {"model": model_fingerprint(model)}
    if cfg.get("candidates"):
        _need(cfg, "context")
        from .text import Vocabulary

        vocab = Vocabulary.load(cfg["vocab"]) if cfg.get("vocab") else None
        if vocab is None:
            _need(cfg, "data")
            from .dataset import load_dataset

            vocab = load_dataset(cfg["data"]).vocab
        cands = [c.strip() for c in Path(cfg["candidates"]).read_text().splitlines() if c.strip()]
        ranking = rank_events(model, vocab, cfg["context"], cands, cfg["prefix"])
        write_ranking(out / "ranking.csv", ranking)
        return {"top": ranking[0][0]}, fps
    _need(cfg, "data")
    from .dataset import load_dataset

    ds = load_dataset(cfg["data"])
    ctx = [c for c, _, _ in ds.preference_pairs]
    a = normalized_logliks(model, ds.vocab, ctx, [p for _, p, _ in ds.preference_pairs], cfg["prefix"])
    b = normalized_logliks(model, ds.vocab, ctx, [o for _, _, o in ds.preference_pairs], cfg["prefix"])
    with open(out / "pairs.csv", "w") as f:
        f.write("pair,preferred_score,other_score\n")
        for i, (x, y) in enumerate(zip(a, b)):
            f.write(f"{i},{x!r},{y!r}\n")
    return {"preference_auc": pairwise_auc(a, b), "n_pairs": len(a)}, fps


def _decode_cfg(cfg):
    from .model import DecodeConfig

    return DecodeConfig(cfg["strategy"], cfg["top_p"], cfg["max_new"], cfg["temperature"], cfg["seed"])


def cmd_generate(cfg, out):
    from .checkpoint import model_fingerprint
    from .dataset import load_dataset
    from .generation import generate_text
    from .text import BehaviorRecord, read_records, write_jsonl

    _need(cfg, "base", "data")
    model = _load_model(cfg["base"])
    state = _load_state(cfg, model)
    ds = load_dataset(cfg["data"])
    records = read_records(cfg["records"]) if cfg.get("records") else ds.ctr_test[: cfg["n"]]
    rows = []
    for r in records:
        if cfg["task"] == "dialog" and not r.dialog:
            r = BehaviorRecord(user=r.user, events=r.events, candidate=r.candidate, record_id=r.record_id,
                               dialog=[("user", cfg["opening"]), ("system", "")])
        text = generate_text(model, ds.vocab, r, cfg["task"], _decode_cfg(cfg), state)
        rows.append({"record_id": r.record_id, "task": cfg["task"], "text": text})
        print(f"{r.record_id}\t{text}")
    write_jsonl(out / "generations.jsonl", rows)
    return {"n": len(rows)}, {"model": model_fingerprint(model)}


def cmd_chat(cfg, out):
    from .checkpoint import model_fingerprint
    from .dataset import load_dataset
    from .generation import chat
    from .text import write_jsonl

    _need(cfg, "base", "data")
    model = _load_model(cfg["base"])
    state = _load_state(cfg, model)
    ds = load_dataset(cfg["data"])
    if cfg.get("replay"):
        turns = [t.strip() for t in Path(cfg["replay"]).read_text().splitlines() if t.strip()]
    else:
        def stdin_turns():
            while True:
                try:
                    line = input("user> ")
                except EOFError:
                    return
                if line.strip() in ("", "/quit"):
                    return
                yield line
        turns = stdin_turns()
    log: list[dict] = []
    for reply in chat(model, ds.vocab, _Tee(turns, log), decode=_decode_cfg(cfg), state=state):
        print(f"system> {reply}")
        log[-1]["system"] = reply
    write_jsonl(out / "transcript.jsonl", log)
    return {"turns": len(log)}, {"model": model_fingerprint(model)}


class _Tee:
    """Iterates user turns while logging each one."""

    def __init__(self, turns, log):
        self.turns, self.log = iter(turns), log

    def __iter__(self):
        for t in self.turns:
            self.log.append({"user": t})
            yield t


def cmd_distill(cfg, out):
    from .checkpoint import model_fingerprint, save_checkpoint
    from .compression import distill
    from .dataset import load_dataset
    from .model import param_count
    from .objectives import PretrainConfig, heldout_nll
    from .training import write_curve

    _need(cfg, "teacher", "data")
    teacher = _load_model(cfg["teacher"])
    ds = load_dataset(cfg["data"])
    train, held = _split_corpus(ds)
    scfg = _model_cfg({**cfg, "heads": teacher.cfg.n_heads, "max_len": teacher.cfg.max_len}, ds.vocab)
    pcfg = PretrainConfig(steps=cfg["steps"], lr=cfg["lr"], batch_size=cfg["batch_size"], seed=cfg["seed"])
    student, curve = distill(teacher, scfg, train, ds.vocab, pcfg, cfg["relation_weight"])
    save_checkpoint(student, out / "model.ckpt")
    write_curve(out / "loss.csv", curve)
    nll = heldout_nll(student, held, ds.vocab)
    return ({"heldout_ppl": float(np.exp(nll)), "student_params": param_count(scfg),
             "teacher_params": param_count(teacher.cfg)},
            {"teacher": model_fingerprint(teacher), "student": model_fingerprint(student)})


def _ctr_batches(model, ds, cfg):
    from .model import make_batch

    seqs = _ctr_seqs(ds.ctr_train, ds.vocab, model.cfg.max_len, 0)
    y = torch.tensor([r.label for r in ds.ctr_train])
    rng = np.random.default_rng(cfg["seed"])

    def sample():
        idx = rng.integers(0, len(seqs), cfg["batch_size"])
        return make_batch([seqs[i] for i in idx], ds.vocab.pad), y[idx]

    return sample


def cmd_prune(cfg, out):
    import torch.nn.functional as F

    from .checkpoint import model_fingerprint, save_checkpoint
    from .compression import PruneSchedule, prune, sparsity_report, write_sparsity_report
    from .dataset import load_dataset
    from .metrics import auc

    _need(cfg, "base", "data")
    model = _load_model(cfg["base"])
    ds = load_dataset(cfg["data"])
    y = [r.label for r in ds.ctr_test]
    dense = auc(_ctr_scores(model, None, ds.ctr_test, ds.vocab, 0), y)
    sample = _ctr_batches(model, ds, cfg)

    def step_loss(_t):
        b, yy = sample()
        return F.cross_entropy(model.class_logits(model.run(b).out, b.eos), yy)

    sched = PruneSchedule(cfg["target"], 0, cfg["steps"], cfg["every"])
    _, curve = prune(model, sched, step_loss, cfg["lr"])
    save_checkpoint(model, out / "model.ckpt")
    rows = sparsity_report(model)
    write_sparsity_report(out / "sparsity.csv", rows)
    return ({"dense_auc": dense, "pruned_auc": auc(_ctr_scores(model, None, ds.ctr_test, ds.vocab, 0), y),
             "min_sparsity": min(r[3] for r in rows), "max_sparsity": max(r[3] for r in rows)},
            {"model": model_fingerprint(model)})


def cmd_quantize(cfg, out):
    from .checkpoint import load_checkpoint, model_fingerprint, save_checkpoint
    from .compression import quantize_model
    from .dataset import load_dataset
    from .model import make_batch

    _need(cfg, "base", "data")
    model = _load_model(cfg["base"])
    ds = load_dataset(cfg["data"])
    q = quantize_model(model)
    save_checkpoint(model, out / "model.ckpt", quantized=q, meta={"quantized": "int8"})
    qmodel, _ = load_checkpoint(out / "model.ckpt")
    seqs = _ctr_seqs(ds.ctr_test[: cfg["n_eval"]], ds.vocab, model.cfg.max_len, 0)
    batch = make_batch(seqs, ds.vocab.pad)
    with torch.no_grad():
        a = model.class_logits(model.run(batch).out, batch.eos)
        b = qmodel.class_logits(qmodel.run(batch).out, batch.eos)
    params = dict(model.named_parameters())
    worst = max(float((params[n].detach().double() - torch.from_numpy(t.values.astype(np.float64) * t.scale)
                       ).abs().max() / t.scale) for n, t in q.items())
    return ({"logit_drift": float((a - b).abs().mean()), "max_error_over_scale": worst,
             "n_quantized": len(q)},
            {"float": model_fingerprint(model), "quantized": content_hash(out / "model.ckpt")})


def cmd_exit_eval(cfg, out):
    import copy
    import csv

    from .checkpoint import model_fingerprint, save_checkpoint
    from .compression import early_exit_infer, exit_classification_loss
    from .dataset import load_dataset
    from .metrics import auc
    from .training import fit, write_curve

    _need(cfg, "base", "data")
    base = _load_model(cfg["base"])
    model = copy.deepcopy(base)
    ds = load_dataset(cfg["data"])
    sample = _ctr_batches(model, ds, cfg)
    accumulated = bool(cfg["accumulated"])

    def step_loss(_t):
        b, yy = sample()
        return exit_classification_loss(model, b, yy, accumulated)

    model.train()
    curve = fit(model.parameters(), step_loss, cfg["steps"], cfg["lr"])
    model.eval()
    save_checkpoint(model, out / "model.ckpt")
    write_curve(out / "loss.csv", curve)
    seqs = _ctr_seqs(ds.ctr_test, ds.vocab, model.cfg.max_len, 0)
    y = [r.label for r in ds.ctr_test]
    aucs = {k: auc(early_exit_infer(model, seqs, ds.vocab, k), y) for k in range(1, model.n_layers + 1)}
    with open(out / "exits.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["exit_layer", "auc"])
        for k, v in aucs.items():
            w.writerow([k, repr(v)])
    return {f"auc_exit_{k}": v for k, v in aucs.items()}, {"base": model_fingerprint(base),
                                                           "model": model_fingerprint(model)}


# ---------------------------------------------------------------- parser

MODEL_FLAGS = {"layers": 4, "heads": 16, "d_model": 64, "d_emb": 0, "share_layers": False, "max_len": 256}
DECODE_FLAGS = {"strategy": "greedy", "top_p": 0.9, "max_new": 32, "temperature": 1.0}

COMMANDS: dict[str, tuple[Callable, dict, str]] = {
    "gen-data": (cmd_gen_data, {"world": None, "n_users": 600, "n_items": 1000, "n_events": 4000,
                                "unseen_fraction": 0.1, "n_corpus": 6000, "n_pairs": 400},
                 "sample synthetic behavior logs and build the vocabulary"),
    "pretrain": (cmd_pretrain, {"data": None, **MODEL_FLAGS, "steps": 2000, "lr": 1e-3, "batch_size": 32},
                 "pretrain a model on the dataset's text corpus"),
    "tune": (cmd_tune, {"base": None, "data": None, "method": None, "steps": 300, "lr": None,
                        "batch_size": 32, "n_prompts": 16, "rank": None, "interaction_layers": 0},
             "adapt a pretrained model to click-through prediction"),
    "eval-ctr": (cmd_eval_ctr, {"base": None, "state": None, "data": None, "interaction_layers": 0,
                                "scorer": "model"},
                 "score the held-out click pairs and report AUC"),
    "serve-bench": (cmd_serve_bench, {"base": None, "state": None, "data": None, "interaction_layers": 3,
                                      "n_requests": 100, "reps": 100, "cache_candidate": True},
                    "time cached split-stage serving against the monolithic forward"),
    "retrieve-build": (cmd_retrieve_build, {"base": None, "data": None, "train_steps": 300, "lr": 5e-4,
                                            "batch_size": 64, "temperature": 0.07},
                       "train the dual encoder and build the item index"),
    "retrieve-eval": (cmd_retrieve_eval, {"model": None, "index": None, "data": None, "k": 100},
                      "HitRate@K on held-out and unseen-item users"),
    "zeroshot": (cmd_zeroshot, {"base": None, "data": None, "vocab": None, "context": None,
                                "candidates": None, "prefix": "also clicks"},
                 "rank outcomes by length-normalized likelihood"),
    "generate": (cmd_generate, {"base": None, "state": None, "data": None, "records": None,
                                "task": None, "n": 5, "opening": "hi , what should i buy ?", **DECODE_FLAGS},
                 "generate explanations, product titles, queries or dialog replies"),
    "chat": (cmd_chat, {"base": None, "state": None, "data": None, "replay": None, **DECODE_FLAGS},
             "converse turn by turn (replay file or interactive)"),
    "distill": (cmd_distill, {"teacher": None, "data": None, "layers": 4, "d_model": 64, "d_emb": 32,
                              "share_layers": True, "steps": 2000, "lr": 1e-3, "batch_size": 32,
                              "relation_weight": 1.0},
                "distill a shared-layer, factorized-embedding student"),
    "prune": (cmd_prune, {"base": None, "data": None, "target": 0.8, "steps": 300, "every": 10, "lr": 5e-4,
                          "batch_size": 32},
              "gradual magnitude pruning while training on click prediction"),
    "quantize": (cmd_quantize, {"base": None, "data": None, "n_eval": 256},
                 "store int8 weights and report logit drift"),
    "exit-eval": (cmd_exit_eval, {"base": None, "data": None, "steps": 300, "lr": 5e-4, "batch_size": 32,
                                  "accumulated": True},
                  "train with the depth-weighted exit loss and report AUC per exit layer"),
}

CHOICES = {"method": tuple(METHOD_NAMES), "scorer": ("model", "oracle"), "strategy": ("greedy", "nucleus"),
           "task": ("explain", "product", "query", "dialog")}
REQUIRED_CHOICE = {"tune": "method", "generate": "task"}


def _flag_type(default):
    if isinstance(default, bool):
        return lambda s: s.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="textrec", description="Text-based recommendation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, defaults, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON file of settings; explicit flags override it")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        for key, default in defaults.items():
            kw: dict = {"default": argparse.SUPPRESS, "dest": key}
            if key in CHOICES:
                kw["choices"] = CHOICES[key]
            elif (t := _flag_type(default)) is not None:
                kw["type"] = t
            elif key in ("lr", "rank"):
                kw["type"] = float if key == "lr" else int
            p.add_argument("--" + key.replace("_", "-"), **kw)
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Built-in defaults, then the config file, then explicit flags."""
    defaults = COMMANDS[command][1]
    cfg = {"seed": 0, **defaults}
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
        for key, value in loaded.items():
            if key in CHOICES and value is not None and value not in CHOICES[key]:
                raise UsageError(f"invalid {key} {value!r}; choose from {CHOICES[key]}")
        cfg.update(loaded)
    given = {k: v for k, v in vars(args).items() if k in cfg}
    cfg.update(given)
    need = REQUIRED_CHOICE.get(command)
    if need and cfg.get(need) is None:
        raise UsageError(f"--{need} is required")
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _seed(cfg)
        fn = COMMANDS[args.command][0]
        metrics, fingerprints = fn(cfg, out)
        write_manifest(out, args.command, cfg, metrics, fingerprints)
        print(json.dumps(_clean(metrics), sort_keys=True))
        return 0
    except UsageError as e:
        print(f"textrec {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure: report and exit 1
        logger.debug("failure", exc_info=True)
        print(f"textrec {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

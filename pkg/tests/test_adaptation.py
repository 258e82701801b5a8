import hashlib

import numpy as np
import pytest
import torch

from conftest import make_record, randomize
from textrec.adaptation import (METHODS, ItemError, TuneConfig, TuningState, mixed_task_inference, new_state,
                                state_class_probs, trainable_fraction, tune)
from textrec.checkpoint import model_fingerprint, save_checkpoint
from textrec.model import ModelConfig, build_model
from textrec.text import ConfigError, encode_record


def toy_task(vocab, n=24):
    """Label is 1 exactly when the candidate is a yoga mat: learnable from the candidate alone."""
    recs = [make_record(1 + i % 3, label=i % 2, title="silky mat" if i % 2 else "steel kettle",
                        category="yoga" if i % 2 else "kitchen") for i in range(n)]
    return [encode_record(r, "score", vocab, 96) for r in recs], [r.label for r in recs]


def file_hash(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.mark.parametrize("method", ["prompt", "option", "option_adapter"])
def test_base_bytes_unchanged(tmp_path, tiny_model, vocab, method):
    randomize(tiny_model)
    save_checkpoint(tiny_model, tmp_path / "before.ckpt")
    seqs, y = toy_task(vocab)
    tune(tiny_model, seqs, y, method, vocab, TuneConfig(steps=5, batch=8, n_prompts=4))
    save_checkpoint(tiny_model, tmp_path / "after.ckpt")
    assert file_hash(tmp_path / "before.ckpt") == file_hash(tmp_path / "after.ckpt")
    assert all(p.requires_grad for p in tiny_model.parameters())


def test_fine_tuning_copies_the_base(tiny_model, vocab):
    fp = model_fingerprint(tiny_model)
    seqs, y = toy_task(vocab)
    state, _ = tune(tiny_model, seqs, y, "fine", vocab, TuneConfig(steps=3, batch=8))
    assert model_fingerprint(tiny_model) == fp
    assert model_fingerprint(state.full) != fp


@pytest.mark.parametrize("method", METHODS)
def test_every_method_reduces_the_loss(tiny_model, vocab, method):
    randomize(tiny_model, scale=0.5)
    seqs, y = toy_task(vocab)
    state, curve = tune(tiny_model, seqs, y, method, vocab, TuneConfig(steps=100, batch=12, n_prompts=4, lr=1e-2))
    assert np.mean(curve[-10:]) < 0.7 * curve[0]
    if method == "fine":
        acc = ((state_class_probs(tiny_model, state, seqs, vocab)[:, 1] > 0.5).long().numpy() == y).mean()
        assert acc == 1.0


def test_option_adapter_budget_at_desk_scale(vocab):
    # the synthetic task vocabulary has about 125 entries
    base = build_model(ModelConfig(n_layers=4, n_heads=16, d_model=64, vocab_size=128))
    state = new_state(base, "option_adapter", vocab, TuneConfig())
    assert state.adapters.rank == 4
    assert trainable_fraction(state, base) <= 0.015


def test_option_count_must_match_classes(tiny_model, vocab):
    with pytest.raises(ConfigError):
        new_state(tiny_model, "option", vocab, TuneConfig(n_options=3))
    with pytest.raises(ConfigError):
        new_state(tiny_model, "lora", vocab, TuneConfig())


@pytest.mark.parametrize("method", METHODS)
def test_state_round_trip(tmp_path, tiny_model, vocab, method):
    seqs, y = toy_task(vocab)
    state, _ = tune(tiny_model, seqs, y, method, vocab, TuneConfig(steps=2, batch=4, n_prompts=4))
    state.save(tmp_path / "s.bin")
    back = TuningState.load(tmp_path / "s.bin", tiny_model)
    assert torch.equal(state_class_probs(tiny_model, state, seqs, vocab),
                       state_class_probs(tiny_model, back, seqs, vocab))


def test_state_refuses_other_base(tmp_path, tiny_model, tiny_cfg, vocab):
    seqs, y = toy_task(vocab)
    state, _ = tune(tiny_model, seqs, y, "option", vocab, TuneConfig(steps=1, batch=4, n_prompts=4))
    state.save(tmp_path / "s.bin")
    with pytest.raises(ConfigError):
        TuningState.load(tmp_path / "s.bin", build_model(tiny_cfg, seed=9))


def test_mixed_batch_matches_separate_runs(tiny_model, vocab):
    randomize(tiny_model)
    seqs, y = toy_task(vocab, 6)
    states = {}
    for k, (method, P) in enumerate([("prompt", 3), ("option", 5), ("option_adapter", 2), ("fine", 0)]):
        st, _ = tune(tiny_model, seqs, y, method, vocab, TuneConfig(steps=2, batch=4, n_prompts=max(P, 2),
                                                                        rank=2 + k % 2, seed=k, lr=1e-2))
        states[method] = st
    items = [(m, seqs[i % len(seqs)]) for i, m in enumerate(["prompt", "option", "nope", "option_adapter",
                                                             "fine", "option"])]
    out = mixed_task_inference(tiny_model, states, items, vocab)
    assert isinstance(out[2], ItemError)
    for (task, seq), got in zip(items, out):
        if task == "nope":
            continue
        want = state_class_probs(tiny_model, states[task], [seq], vocab)[0].detach().numpy()
        np.testing.assert_allclose(got, want, atol=1e-5)


def test_tuning_is_seeded(tiny_model, vocab):
    seqs, y = toy_task(vocab)
    cfg = TuneConfig(steps=4, batch=4, n_prompts=4, seed=3)
    assert tune(tiny_model, seqs, y, "option", vocab, cfg)[1] == tune(tiny_model, seqs, y, "option", vocab, cfg)[1]

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_record, randomize, rel_err
from textrec.adaptation import TuneConfig, new_state, option_logits, readout
from textrec.model import (Block, ContractError, DecodeConfig, ModelConfig, adapter_ffn, attention_mask,
                           build_model, generate, lm_loss, make_batch, param_count)
from textrec.text import AR, BIDIR, PADDING, encode, encode_record


def fd_check(loss_fn, tensors, n=6, h=1e-4, seed=0):
    """Central differences on ``n`` random entries of each tensor against autograd."""
    g = torch.Generator().manual_seed(seed)
    for t in tensors:
        t.requires_grad_(True)
    analytic = torch.autograd.grad(loss_fn(), tensors)
    worst = 0.0
    with torch.no_grad():
        for t, ga in zip(tensors, analytic):
            flat = t.view(-1)
            for i in torch.randint(flat.numel(), (n,), generator=g).tolist():
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                num = (up - down) / (2 * h)
                ana = ga.view(-1)[i].item()
                worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    return worst


def reference_attention(block, x, allow):
    """Softmax attention written out longhand."""
    q, k, v = block.qkv_heads(x)
    s = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    s = s.masked_fill(~allow[:, None], float("-inf"))
    ctx = s.softmax(-1) @ v
    B, H, T, hd = q.shape
    x = x + block.out(ctx.transpose(1, 2).reshape(B, T, H * hd))
    return x + block.ffn(block.ln2(x))


regions = st.lists(st.sampled_from([BIDIR, AR, PADDING]), min_size=1, max_size=12)


@given(regions)
def test_mask_rules(reg):
    r = torch.tensor(reg)[None]
    m = attention_mask(r)[0]
    T = len(reg)
    for i in range(T):
        for j in range(T):
            if reg[i] == PADDING:
                expect = i == j
            elif reg[j] == BIDIR:
                expect = True
            elif reg[i] == AR and reg[j] == AR:
                expect = j <= i
            else:
                expect = False
            assert bool(m[i, j]) == expect


def test_block_mask_restricts_to_segment():
    r = torch.tensor([[BIDIR] * 4 + [AR] * 2])
    seg = torch.tensor([[1, 1, 2, 2, 3, 3]])
    m = attention_mask(r, seg, block=True)[0]
    assert m[0, :2].all() and not m[0, 2:].any()
    assert m[5, 4] and m[5, 5] and not m[5, :4].any()
    with pytest.raises(ContractError):
        attention_mask(r, None, block=True)


def test_fused_attention_matches_longhand():
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16, vocab_size=10)
    torch.manual_seed(0)
    blk = Block(cfg).double()
    x = torch.randn(2, 7, 16, dtype=torch.float64)
    region = torch.tensor([[BIDIR] * 3 + [AR] * 4, [BIDIR] * 2 + [AR] * 3 + [PADDING] * 2])
    allow = attention_mask(region)
    assert rel_err(blk(x, allow)[0].detach(), reference_attention(blk, x, allow).detach()) < 1e-12


@pytest.mark.parametrize("kw", [{}, {"d_emb": 8}, {"share_layers": True}, {"n_layers": 3, "max_segments": 4}])
def test_param_count_closed_form(kw, vocab):
    cfg = ModelConfig(n_heads=2, d_model=16, vocab_size=len(vocab), max_len=32, **kw)
    model = build_model(cfg)
    assert param_count(cfg) == sum(p.numel() for p in model.parameters())


def test_config_validation():
    with pytest.raises(ContractError):
        ModelConfig(n_heads=3, d_model=16)
    with pytest.raises(ContractError):
        ModelConfig(d_model=16, n_heads=2, d_emb=32)


def test_bidirectional_side_ignores_generated_side(tiny_model, vocab):
    randomize(tiny_model)
    a = encode("yoga mat rugged", "silky mat", vocab)
    b = encode("yoga mat rugged", "compact tarp today", vocab)
    n = int((a.region == BIDIR).sum())
    ha = tiny_model.run(make_batch([a], vocab.pad)).out[0, :n]
    hb = tiny_model.run(make_batch([b], vocab.pad)).out[0, :n]
    assert torch.allclose(ha, hb, atol=1e-6)


def test_generated_side_is_causal(tiny_model, vocab):
    randomize(tiny_model)
    a = encode("yoga", "silky mat rugged", vocab)
    b = encode("yoga", "silky mat compact", vocab)
    t = len(a) - 2  # the position before the differing token
    ha = tiny_model.run(make_batch([a], vocab.pad)).out[0, :t]
    hb = tiny_model.run(make_batch([b], vocab.pad)).out[0, :t]
    assert torch.allclose(ha, hb, atol=1e-6)


def test_padding_does_not_leak(tiny_model, vocab):
    randomize(tiny_model)
    short = encode_record(make_record(1), "score", vocab, 96)
    long = encode_record(make_record(4), "score", vocab, 96)
    alone = tiny_model.run(make_batch([short], vocab.pad)).out[0]
    padded = tiny_model.run(make_batch([short, long], vocab.pad)).out[0, :len(short)]
    assert torch.allclose(alone, padded, atol=1e-5)


def test_exit_layer_runs_only_lower_layers(tiny_model, vocab, record):
    batch = make_batch([encode_record(record, "score", vocab, 96)], vocab.pad)
    tr = tiny_model.run(batch, stop=1)
    assert tr.executed() == [0, 1]
    full = tiny_model.run(batch)
    assert torch.allclose(tr.hidden[1], full.hidden[1])
    with pytest.raises(ContractError):
        tiny_model.run(batch, start=1)


def test_split_run_equals_full_run(tiny_model, vocab, record):
    randomize(tiny_model)
    batch = make_batch([encode_record(record, "score", vocab, 96)], vocab.pad)
    lower = tiny_model.run(batch, stop=1)
    upper = tiny_model.run(batch, start=1, h_start=lower.hidden[1])
    assert torch.allclose(upper.out, tiny_model.run(batch).out, atol=1e-6)


def test_lm_loss_uniform_logits():
    V = 11
    logits = torch.zeros(5, V)
    ids = torch.tensor([1, 2, 3, 4, 5])
    mask = torch.tensor([0, 0, 1, 1, 1])
    assert lm_loss(logits, ids, mask).item() == pytest.approx(math.log(V), rel=1e-6)
    with pytest.raises(ContractError):
        lm_loss(logits, ids, torch.zeros(5, dtype=torch.long))


def test_lm_loss_targets_are_shifted():
    logits = torch.full((3, 4), -50.0)
    logits[0, 2] = 50.0  # position 0 predicts token 2 at position 1
    ids = torch.tensor([0, 2, 3])
    mask = torch.tensor([0, 1, 0])
    assert lm_loss(logits, ids, mask).item() < 1e-6


# ------------------------------------------------------------ gradient checks (float64)


@pytest.fixture
def model64(tiny_cfg):
    return randomize(build_model(tiny_cfg, seed=1, dtype=torch.float64), seed=2, scale=0.2)


def test_lm_loss_gradient(model64, vocab):
    seqs = [encode_record(make_record(2), "score", vocab, 96), encode("yoga mat", "silky mat", vocab)]
    batch = make_batch(seqs, vocab.pad)

    def loss():
        tr = model64.run(batch, want_logits=True)
        return lm_loss(tr.logits, batch.ids, batch.loss_mask)

    params = [model64.blocks[0].qkv.weight, model64.blocks[1].fc1.weight, model64.tok_emb.weight,
              model64.pos_emb.weight, model64.ln_f.weight]
    assert fd_check(loss, params) < 1e-3


def test_option_logit_gradient(model64, vocab):
    state = new_state(model64, "option_adapter", vocab, TuneConfig(n_prompts=4, n_options=2))
    with torch.no_grad():
        for t in state.adapters.W2:
            t.normal_(0, 0.2)
    seqs = [encode_record(make_record(2), "score", vocab, 80), encode_record(make_record(1, 0), "score", vocab, 80)]
    batch = make_batch(seqs, vocab.pad, state.n_prompts)
    y = torch.tensor([1, 0])

    def loss():
        tr = model64.run(batch, state.injection(vocab))
        return F.cross_entropy(readout(model64, state, tr.out, batch.eos), y)

    ts = [state.prompts.vectors, state.prompts.special_rows, state.adapters.W1[0], state.adapters.W2[1],
          state.adapters.lam[0], state.adapters.b1[1]]
    assert fd_check(loss, ts) < 1e-3


def test_adapter_ffn_gradient():
    g = torch.Generator().manual_seed(0)
    d, r = 8, 2
    Z = torch.randn(3, 5, d, generator=g, dtype=torch.float64)
    lin = torch.randn(d, d, generator=g, dtype=torch.float64)
    ts = [torch.tensor(0.7, dtype=torch.float64), torch.randn(d, r, generator=g, dtype=torch.float64),
          torch.randn(1, r, generator=g, dtype=torch.float64), torch.randn(r, d, generator=g, dtype=torch.float64),
          torch.randn(1, d, generator=g, dtype=torch.float64), Z]

    def loss():
        return adapter_ffn(ts[5], lambda z: torch.tanh(z @ lin), *ts[:5]).pow(2).sum()

    assert fd_check(loss, ts) < 1e-3


def test_adapter_identity_at_init(tiny_model, vocab, record):
    randomize(tiny_model)
    state = new_state(tiny_model, "option_adapter", vocab, TuneConfig(n_prompts=4))
    batch = make_batch([encode_record(record, "score", vocab, 96)], vocab.pad, 4)
    inj = state.injection(vocab)
    with_ad = tiny_model.run(batch, inj).out
    inj.adapters = None
    assert torch.allclose(with_ad, tiny_model.run(batch, inj).out)


def test_adapter_shape_mismatch():
    with pytest.raises(ContractError, match="W1"):
        adapter_ffn(torch.zeros(2, 8), lambda z: z, 1.0, torch.zeros(4, 2), 0, torch.zeros(2, 8), 0)


def test_option_logits_inner_product():
    h = torch.tensor([[1.0, 2.0], [0.0, -1.0]])
    opts = torch.tensor([[1.0, 0.0], [0.5, 0.5]])
    assert torch.equal(option_logits(h, opts), torch.tensor([[1.0, 1.5], [0.0, -0.5]]))
    per_item = opts[None].expand(2, 2, 2)
    assert torch.equal(option_logits(h, per_item), option_logits(h, opts))


# ------------------------------------------------------------ decoding


def test_greedy_is_deterministic(tiny_model, vocab):
    randomize(tiny_model)
    prefix = encode("yoga", "the user likes it because", vocab)
    prefix = prefix.prefix(prefix.eos_index)
    a = generate(tiny_model, prefix, vocab, DecodeConfig(max_new=8))
    assert a == generate(tiny_model, prefix, vocab, DecodeConfig(max_new=8))
    assert 1 <= len(a) <= 8


def test_nucleus_seeded_and_tiny_p_is_greedy(tiny_model, vocab):
    randomize(tiny_model, scale=1.0)
    prefix = encode("yoga", "the user", vocab)
    prefix = prefix.prefix(prefix.eos_index)
    cfg = DecodeConfig("nucleus", top_p=0.95, max_new=6, seed=3)
    assert generate(tiny_model, prefix, vocab, cfg) == generate(tiny_model, prefix, vocab, cfg)
    tiny = DecodeConfig("nucleus", top_p=1e-9, max_new=6, seed=3)
    assert generate(tiny_model, prefix, vocab, tiny) == generate(tiny_model, prefix, vocab, DecodeConfig(max_new=6))


def test_generate_needs_ar_prefix(tiny_model, vocab):
    s = encode("yoga", "", vocab)
    with pytest.raises(ContractError):
        generate(tiny_model, s.prefix(2), vocab)

import numpy as np
import pytest
import torch

VERDICTS = pytest.StashKey[dict]()
N_CRITERIA = 12

from textrec.model import ModelConfig, build_model
from textrec.text import BehaviorRecord, Event, Item, build_vocab, load_templates

WORDS = [
    "age group 1. city tier 2.",
    "clicks a product of category shoes named rugged boots yesterday.",
    "purchases a product of category tents named compact tarp today.",
    "the user is now recommended a product of category yoga named silky mat.",
    "a user clicks hiking shoes also clicks trekking poles yoga knee pads",
    "the user now purchases a product of category kitchen named steel kettle.",
    "product details: cast iron. the user likes it because it is sturdy",
    "the user now searches the query winter stuff",
    "USER: hello SYSTEM: hi there",
]


def make_record(n_events=2, label=1, title="silky mat", category="yoga", cross=""):
    events = [Event("clicks" if i % 2 == 0 else "purchases", "shoes" if i % 2 == 0 else "tents",
                    "rugged boots" if i % 2 == 0 else "compact tarp", "yesterday", float(i))
              for i in range(n_events)]
    return BehaviorRecord(user={"age": "age group 1", "city": "city tier 2"}, events=events,
                          candidate=Item("i1", category, title, details="cast iron"),
                          label=label, cross=cross, record_id="r1", user_id="u1")


@pytest.fixture(scope="session")
def vocab():
    t = load_templates()
    return build_vocab(WORDS + [v for k, v in sorted(t.items()) if k != "version"], 500)


@pytest.fixture
def tiny_cfg(vocab):
    return ModelConfig(n_layers=2, n_heads=2, d_model=16, vocab_size=len(vocab), max_len=96)


@pytest.fixture
def tiny_model(tiny_cfg):
    return build_model(tiny_cfg, seed=0)


@pytest.fixture
def record():
    return make_record()


@pytest.fixture(autouse=True)
def _one_thread():
    torch.set_num_threads(1)
    yield


def randomize(model, seed=0, scale=0.3):
    """Give every parameter (including zero-initialized tables) non-trivial values."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


# ------------------------------------------------------------ acceptance reporting


def pytest_configure(config):
    config.stash[VERDICTS] = {}


@pytest.fixture(scope="session")
def verdict(request):
    """``verdict(n, ok, detail)`` records one part of acceptance criterion ``n``."""
    store = request.config.stash[VERDICTS]

    def record(n: int, ok: bool, detail: str) -> bool:
        store.setdefault(n, []).append((bool(ok), detail))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(VERDICTS, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        parts = store.get(n)
        if parts is None:
            terminalreporter.write_line(f"criterion {n:2d}: FAIL (not run or errored)")
            continue
        ok = all(p for p, _ in parts)
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

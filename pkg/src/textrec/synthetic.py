"""Behavior logs sampled from a known click model.

Users belong to archetypes with category preferences and favourite title keywords;
items are short titles built from per-category word banks.  The click probability
is ``sigmoid(w * affinity + b)`` with ``b`` calibrated to a target base rate, so
every downstream metric has a ground-truth oracle.  Keywords make the title text
carry signal beyond the category.
"""
from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .text import BehaviorRecord, Event, Item, load_templates, render_event, write_jsonl

CATEGORIES = ("shoes", "tents", "yoga", "kitchen", "books", "toys", "garden", "audio")
BANKS = {
    "shoes": ("boots", "sneakers", "sandals", "loafers", "slippers", "cleats", "heels", "clogs"),
    "tents": ("tent", "tarp", "hammock", "canopy", "shelter", "bivy", "awning", "yurt"),
    "yoga": ("mat", "block", "strap", "bolster", "pads", "towel", "wheel", "cushion"),
    "kitchen": ("kettle", "skillet", "whisk", "ladle", "grater", "blender", "teapot", "wok"),
    "books": ("novel", "atlas", "memoir", "cookbook", "anthology", "almanac", "journal", "primer"),
    "toys": ("puzzle", "robot", "kite", "doll", "blocks", "yoyo", "train", "marbles"),
    "garden": ("shovel", "rake", "hose", "planter", "trowel", "seeds", "shears", "trellis"),
    "audio": ("headphones", "speaker", "radio", "earbuds", "amplifier", "turntable", "mixer", "microphone"),
}
ADJECTIVES = (
    "vintage", "organic", "compact", "deluxe", "rugged", "minimal", "neon", "classic",
    "wooden", "wireless", "bamboo", "retro", "pastel", "steel", "foldable", "silky",
)
VERBS = ("clicks", "purchases")
TIMES = ("yesterday", "today", "last week", "two days ago")


@dataclass(frozen=True)
class WorldSpec:
    n_archetypes: int = 6
    liked_categories: int = 2
    keywords_per_archetype: int = 3
    weight: float = 4.0
    keyword_bonus: float = 0.8
    noise: float = 0.2
    base_rate: float = 0.3
    history: tuple[int, int] = (3, 6)
    seed: int = 0
    categories: tuple[str, ...] = CATEGORIES
    banks: dict = field(default_factory=lambda: dict(BANKS))
    adjectives: tuple[str, ...] = ADJECTIVES

    def to_dict(self) -> dict:
        d = asdict(self)
        d["banks"] = {k: list(v) for k, v in self.banks.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        for k in ("history", "categories", "adjectives"):
            if k in d:
                d[k] = tuple(d[k])
        if "banks" in d:
            d["banks"] = {k: tuple(v) for k, v in d["banks"].items()}
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "WorldSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class World:
    spec: WorldSpec
    prefs: np.ndarray          # (A, C) archetype category weights
    keywords: list[set[str]]   # per archetype
    items: list[Item]
    item_cat: np.ndarray       # (N,) category index
    item_adj: list[str]
    bias: float

    def affinity(self, user_pref: np.ndarray, arch: int, idx: np.ndarray | None = None) -> np.ndarray:
        idx = np.arange(len(self.items)) if idx is None else np.asarray(idx)
        kw = np.array([self.item_adj[i] in self.keywords[arch] for i in idx], dtype=float)
        return user_pref[self.item_cat[idx]] + self.spec.keyword_bonus * kw

    def click_prob(self, user_pref: np.ndarray, arch: int, idx=None) -> np.ndarray:
        return expit(self.spec.weight * self.affinity(user_pref, arch, idx) + self.bias)


@dataclass
class User:
    user_id: str
    archetype: int
    pref: np.ndarray
    profile: dict[str, str]
    history: list[int]         # item indices, oldest first


@dataclass
class SyntheticData:
    world: World
    users: list[User]
    ctr_train: list[BehaviorRecord]
    ctr_train_p: np.ndarray
    ctr_test: list[BehaviorRecord]
    ctr_test_p: np.ndarray
    retrieval_train: list[tuple[BehaviorRecord, str]]
    retrieval_test: list[tuple[BehaviorRecord, str]]
    retrieval_unseen: list[tuple[BehaviorRecord, str]]
    unseen_items: list[str]
    preference_pairs: list[tuple[str, str, str]]   # (context, preferred title, other title)
    corpus: list[str]

    @property
    def items(self) -> list[Item]:
        return self.world.items


def build_world(spec: WorldSpec, n_items: int, rng: np.random.Generator) -> World:
    C = len(spec.categories)
    prefs = np.zeros((spec.n_archetypes, C))
    keywords = []
    for a in range(spec.n_archetypes):
        liked = rng.choice(C, size=spec.liked_categories, replace=False)
        prefs[a, liked] = np.linspace(1.0, 0.6, spec.liked_categories)
        keywords.append(set(rng.choice(spec.adjectives, size=spec.keywords_per_archetype, replace=False)))
    combos = [(a, c, n) for c, cat in enumerate(spec.categories)
              for a in spec.adjectives for n in spec.banks[cat]]
    order = rng.permutation(len(combos))
    items, cats, adjs = [], [], []
    for k in range(n_items):
        a, c, noun = combos[order[k % len(combos)]]
        # once single-adjective titles run out, stack a second adjective
        extra = f"{spec.adjectives[(k // len(combos) - 1) % len(spec.adjectives)]} " if k >= len(combos) else ""
        items.append(Item(f"i{k:05d}", spec.categories[c], f"{extra}{a} {noun}"))
        cats.append(c)
        adjs.append(a)
    world = World(spec, prefs, keywords, items, np.asarray(cats), adjs, 0.0)
    # calibrate the intercept so random (archetype, item) pairs click at the base rate
    aff = np.concatenate([world.affinity(prefs[a], a) for a in range(spec.n_archetypes)])
    world.bias = brentq(lambda b: expit(spec.weight * aff + b).mean() - spec.base_rate, -50, 50)
    return world


def _click_odds(world: World, pref: np.ndarray, arch: int, pool: np.ndarray) -> np.ndarray:
    # observed histories over-represent liked items: sample in proportion to click odds
    return np.exp(world.spec.weight * world.affinity(pref, arch, pool))


def _sample_user(world: World, k: int, rng: np.random.Generator, pool: np.ndarray) -> User:
    spec = world.spec
    a = int(rng.integers(spec.n_archetypes))
    pref = world.prefs[a] + rng.normal(0, spec.noise, len(spec.categories))
    n_hist = int(rng.integers(spec.history[0], spec.history[1] + 1))
    w = _click_odds(world, pref, a, pool)
    hist = [int(i) for i in rng.choice(pool, size=n_hist, replace=False, p=w / w.sum())]
    profile = {"age": f"age group {(a + int(rng.integers(2))) % 4}",
               "city": f"city tier {int(rng.integers(1, 4))}"}
    return User(f"u{k:05d}", a, pref, profile, hist)


def _events(world: World, hist: Sequence[int], rng: np.random.Generator) -> list[Event]:
    out = []
    for t, i in enumerate(hist):
        it = world.items[i]
        out.append(Event(str(rng.choice(VERBS)), it.category, it.title, str(rng.choice(TIMES)), float(t)))
    return out


def _zeroshot_context(events: Sequence[Event], t: dict[str, str]) -> str:
    return t["zeroshot_context"].format(
        events=", ".join(t["zeroshot_event"].format(verb=e.verb, title=e.title) for e in events))


def generate_logs(spec: WorldSpec, n_users: int = 600, n_items: int = 1000, n_events: int = 4000,
                  unseen_fraction: float = 0.1, n_corpus: int = 6000, n_pairs: int = 400) -> SyntheticData:
    """Sample a world and its logs; identical ``spec`` and counts give identical output."""
    if min(n_users, n_items, n_events) < 1:
        raise ValueError("counts must be at least 1")
    rng = np.random.default_rng(spec.seed)
    world = build_world(spec, n_items, rng)
    t = load_templates()
    N = len(world.items)
    perm = rng.permutation(N)
    n_unseen = int(round(unseen_fraction * N))
    unseen = np.sort(perm[:n_unseen])
    seen = np.sort(perm[n_unseen:])
    users = [_sample_user(world, k, rng, seen) for k in range(n_users)]

    def base_record(u: User, rid: str) -> BehaviorRecord:
        return BehaviorRecord(user=dict(u.profile), events=_events(world, u.history, rng),
                              record_id=rid, user_id=u.user_id)

    # click-through pairs: random candidates from the seen pool, labels from the oracle
    ctr, ctr_p = [], []
    for k in range(n_events):
        u = users[int(rng.integers(n_users))]
        i = int(rng.choice(seen))
        p = float(world.click_prob(u.pref, u.archetype, [i])[0])
        r = base_record(u, f"c{k:06d}")
        r.candidate = world.items[i]
        r.label = int(rng.random() < p)
        ctr.append(r)
        ctr_p.append(p)
    cut = int(0.8 * n_events)

    # retrieval: the next clicked item after the history
    def next_click(u: User, pool: np.ndarray) -> int:
        p = world.click_prob(u.pref, u.archetype, pool)
        return int(rng.choice(pool, p=p / p.sum()))

    ret = [(base_record(u, f"r{k:05d}"), world.items[next_click(u, seen)].item_id)
           for k, u in enumerate(users)]
    rcut = int(0.8 * len(ret))
    unseen_pairs = [(base_record(u, f"n{k:05d}"), world.items[next_click(u, unseen)].item_id)
                    for k, u in enumerate(users[rcut:])] if n_unseen else []

    # zero-shot preference pairs: a liked-category item against an unliked one
    pairs = []
    for _ in range(n_pairs):
        u = users[int(rng.integers(n_users))]
        liked = set(np.flatnonzero(world.prefs[u.archetype] > 0))
        good = [i for i in seen if world.item_cat[i] in liked]
        bad = [i for i in seen if world.item_cat[i] not in liked]
        ctx = _zeroshot_context(_events(world, u.history, rng), t)
        pairs.append((ctx, world.items[int(rng.choice(good))].title, world.items[int(rng.choice(bad))].title))

    # pretraining corpus: click sessions in both the compact and the behavior-log wording
    corpus = []
    for k in range(n_corpus):
        u = users[int(rng.integers(n_users))]
        w = _click_odds(world, u.pref, u.archetype, seen)
        n = int(rng.integers(3, 7))
        sess = [int(i) for i in rng.choice(seen, size=n, replace=False, p=w / w.sum())]
        evs = _events(world, sess, rng)
        if k % 2:
            corpus.append(" ".join(render_event(e, t) for e in evs))
        else:
            corpus.append(_zeroshot_context(evs[:-1], t) + " "
                          + t["zeroshot_outcome"].format(title=evs[-1].title))
    for it in world.items:
        corpus.append(t["retrieval_item"].format(category=it.category, title=it.title))

    return SyntheticData(
        world, users, ctr[:cut], np.asarray(ctr_p[:cut]), ctr[cut:], np.asarray(ctr_p[cut:]),
        ret[:rcut], ret[rcut:], unseen_pairs, [world.items[i].item_id for i in unseen], pairs, corpus,
    )


def write_dataset(data: SyntheticData, out_dir: str | Path) -> None:
    """Line-delimited JSON files plus the world spec; byte-identical for a fixed seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "world.json").write_text(json.dumps(data.world.spec.to_dict(), sort_keys=True, indent=1))
    write_jsonl(out / "items.jsonl", (asdict(it) for it in data.items))
    write_jsonl(out / "ctr_train.jsonl",
                (r.to_dict() | {"p": p} for r, p in zip(data.ctr_train, data.ctr_train_p)))
    write_jsonl(out / "ctr_test.jsonl",
                (r.to_dict() | {"p": p} for r, p in zip(data.ctr_test, data.ctr_test_p)))
    for name in ("retrieval_train", "retrieval_test", "retrieval_unseen"):
        write_jsonl(out / f"{name}.jsonl",
                    ({"user": r.to_dict(), "item_id": i} for r, i in getattr(data, name)))
    write_jsonl(out / "preference_pairs.jsonl",
                ({"context": c, "preferred": a, "other": b} for c, a, b in data.preference_pairs))
    write_jsonl(out / "unseen_items.jsonl", ({"item_id": i} for i in data.unseen_items))
    (out / "corpus.txt").write_text("\n".join(data.corpus) + "\n", encoding="utf-8")

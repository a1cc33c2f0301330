"""Interaction ingestion, user sequences, splits and synthetic corpora."""
from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    rating: int | None
    timestamp: int

    def __post_init__(self):
        if self.user_id < 0 or self.item_id < 0:
            raise DataError(f"negative id in {self}")
        if self.timestamp < 0:
            raise DataError(f"negative timestamp in {self}")


@dataclass
class UserSequence:
    user_id: int
    items: list[int]
    timestamps: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class EvalSplit:
    user_id: int
    history: list[int]
    future: list[int]


def parse_movielens(path: str | Path) -> list[Interaction]:
    """Read a ``UserID::MovieID::Rating::Timestamp`` file, one record per line."""
    out = []
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != 4:
                raise DataError(f"line {lineno}: expected 4 '::'-separated fields, got {len(parts)}")
            try:
                user, item, rating, ts = (int(p) for p in parts)
                out.append(Interaction(user, item, rating, ts))
            except ValueError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
    if not out:
        raise DataError("empty input")
    return out


def filter_interactions(
    interactions: Sequence[Interaction], min_item_count: int = 5, min_user_count: int = 5
) -> list[Interaction]:
    """Single pass of item-then-user frequency filtering."""
    item_counts = Counter(x.item_id for x in interactions)
    kept = [x for x in interactions if item_counts[x.item_id] >= min_item_count]
    user_counts = Counter(x.user_id for x in kept)
    return [x for x in kept if user_counts[x.user_id] >= min_user_count]


def build_sequences(interactions: Iterable[Interaction], min_seq_len: int = 5) -> list[UserSequence]:
    by_user: dict[int, list[tuple[int, int, int]]] = defaultdict(list)
    for pos, x in enumerate(interactions):
        by_user[x.user_id].append((x.timestamp, pos, x.item_id))
    out = []
    for user in sorted(by_user):
        rows = sorted(by_user[user])
        if len(rows) < min_seq_len:
            continue
        out.append(UserSequence(user, [r[2] for r in rows], [r[0] for r in rows]))
    return out


def split_users(
    sequences: Sequence[UserSequence], train_frac: float = 0.8, seed: int = 0
) -> tuple[list[UserSequence], list[UserSequence]]:
    if not 0 < train_frac < 1:
        raise DataError(f"train_frac must be in (0, 1), got {train_frac}")
    if len(sequences) < 2:
        raise DataError("need at least 2 users to split")
    n_train = int(round(train_frac * len(sequences)))
    n_train = min(max(n_train, 1), len(sequences) - 1)
    order = np.random.default_rng(seed).permutation(len(sequences))
    train_idx = set(order[:n_train].tolist())
    train = [s for i, s in enumerate(sequences) if i in train_idx]
    test = [s for i, s in enumerate(sequences) if i not in train_idx]
    return train, test


def make_eval_split(sequence: UserSequence, n: int) -> EvalSplit:
    if len(sequence.items) <= n:
        raise DataError(
            f"user {sequence.user_id}: sequence of {len(sequence.items)} items cannot hold {n} future items"
        )
    return EvalSplit(sequence.user_id, list(sequence.items[:-n]), list(sequence.items[-n:]))


def encoder_window(items: Sequence[int], rng: np.random.Generator, short_term: int = 20, long_term: int = 30) -> list[int]:
    """Last ``short_term`` items plus an ordered sample of up to ``long_term`` older ones."""
    items = list(items)
    recent = items[-short_term:] if short_term > 0 else []
    older = items[: len(items) - len(recent)]
    if len(older) > long_term:
        keep = np.sort(rng.choice(len(older), size=long_term, replace=False))
        older = [older[i] for i in keep]
    return older + recent


def user_rng(seed: int, user_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, user_id])


# -- synthetic corpora --------------------------------------------------------


@dataclass
class SynthCorpus:
    sequences: list[UserSequence]
    labels: dict[int, tuple[int, ...]]
    embeddings: np.ndarray  # row i belongs to item i
    user_interests: dict[int, list[tuple[int, ...]]]

    @property
    def leaves(self) -> list[tuple[int, ...]]:
        return sorted(set(self.labels.values()))


def synth_corpus(
    levels: int = 2,
    branching: int = 4,
    items_per_leaf: int = 50,
    users: int = 500,
    interests_per_user: int = 3,
    seq_len: int = 40,
    noise_frac: float = 0.0,
    seed: int = 0,
    dim: int = 16,
    level_scale: float = 0.5,
    item_scale: float = 0.08,
    popularity_exponent: float = 0.5,
    taste_strength: float = 2.0,
) -> SynthCorpus:
    """Users drawing behaviours from a planted hierarchy of item clusters.

    Item embeddings come from a hierarchical Gaussian mixture: each layer adds
    an offset whose scale shrinks by ``level_scale``. Within a leaf, items
    carry Zipf popularity. Each user owns ``interests_per_user`` leaves and
    draws ``round((1 - noise_frac) * seq_len)`` distinct items from them; the
    remainder are uniform over the catalogue.

    Inside each of its leaves a user also has a taste, a random direction in
    embedding space: item weights are popularity times ``exp(taste_strength * z)``
    with ``z`` the standardised projection of the item's offset from the leaf
    centre onto that direction.
    """
    if min(levels, branching, items_per_leaf, users, interests_per_user, seq_len) < 1:
        raise DataError("all counts must be >= 1")
    if not 0 <= noise_frac < 1:
        raise DataError("noise_frac must be in [0, 1)")
    rng = np.random.default_rng(seed)

    leaves = [()]
    for _ in range(levels):
        leaves = [p + (r,) for p in leaves for r in range(branching)]
    offsets: dict[tuple[int, ...], np.ndarray] = {(): np.zeros(dim)}
    for depth in range(1, levels + 1):
        scale = level_scale ** (depth - 1)
        for leaf in leaves:
            node = leaf[:depth]
            if node not in offsets:
                offsets[node] = offsets[node[:-1]] + rng.normal(0, scale, dim)

    n_items = len(leaves) * items_per_leaf
    embeddings = np.zeros((n_items, dim))
    labels: dict[int, tuple[int, ...]] = {}
    members: dict[tuple[int, ...], np.ndarray] = {}
    for li, leaf in enumerate(leaves):
        ids = np.arange(li * items_per_leaf, (li + 1) * items_per_leaf)
        members[leaf] = ids
        embeddings[ids] = offsets[leaf] + rng.normal(0, item_scale, (items_per_leaf, dim))
        for i in ids:
            labels[int(i)] = leaf
    popularity = 1.0 / np.arange(1, items_per_leaf + 1) ** popularity_exponent
    popularity /= popularity.sum()

    n_interest = int(round((1 - noise_frac) * seq_len))
    n_interests = min(interests_per_user, len(leaves))
    sequences, user_interests = [], {}
    for u in range(users):
        chosen = rng.choice(len(leaves), size=n_interests, replace=False)
        interests = [leaves[i] for i in chosen]
        user_interests[u] = interests
        counts = rng.multinomial(n_interest, np.full(n_interests, 1.0 / n_interests))
        picked: list[int] = []
        for leaf, cnt in zip(interests, counts):
            cnt = min(int(cnt), items_per_leaf)
            ids = members[leaf]
            proj = (embeddings[ids] - offsets[leaf]) @ rng.normal(size=dim)
            z = (proj - proj.mean()) / (proj.std() + 1e-12)
            w = popularity * np.exp(taste_strength * z)
            picked.extend(rng.choice(ids, size=cnt, replace=False, p=w / w.sum()).tolist())
        n_noise = seq_len - n_interest
        if n_noise > 0:
            pool = np.setdiff1d(np.arange(n_items), np.asarray(picked, dtype=np.int64))
            picked.extend(rng.choice(pool, size=min(n_noise, len(pool)), replace=False).tolist())
        picked = [int(x) for x in rng.permutation(picked)]
        sequences.append(UserSequence(u, picked, list(range(len(picked)))))
    return SynthCorpus(sequences, labels, embeddings, user_interests)


# -- serialization ------------------------------------------------------------


def write_sequences(path: str | Path, sequences: Iterable[UserSequence]) -> None:
    with open(path, "w") as fh:
        for s in sequences:
            fh.write(json.dumps({"user": s.user_id, "items": s.items, "timestamps": s.timestamps}) + "\n")


def read_sequences(path: str | Path) -> list[UserSequence]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append(UserSequence(rec["user"], rec["items"], rec.get("timestamps", [])))
    return out

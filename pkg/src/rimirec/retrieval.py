"""Partitioned two-tower retrieval.

Each user's behaviour is split by generated interest (user -> category ->
items), one user embedding is computed per category, and items are searched
only inside that category's sub-library. Training negatives come from the
positive's own category.
"""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import tensorio
from .miner import BeamResult
from .taxonomy import CategoryTree, format_path, is_prefix, leaf_id, parse_path, sub_library

Category = tuple[int, ...]
KKV = dict[int, dict[Category, list[int]]]


@dataclass
class RetrievalHyper:
    d_emb: int = 64
    negatives: int = 5
    epochs: int = 5
    lr: float = 1e-3
    batch: int = 256
    max_positives: int = 10
    max_input: int = 50
    zero_init_output: bool = False


# -- behaviour splitting ------------------------------------------------------


def split_behaviors(items: Sequence[int], interests: Sequence[BeamResult | Category], tree: CategoryTree) -> dict[Category, list[int]]:
    """Items of one user grouped under every interest path that prefixes their leaf.

    Items under no interest are dropped, as are interests that receive nothing.
    Overlapping interests (a path and its ancestor) both receive the item.
    """
    paths = [tuple(x.path) if isinstance(x, BeamResult) else tuple(x) for x in interests]
    out: dict[Category, list[int]] = {p: [] for p in paths}
    for i in items:
        try:
            leaf = leaf_id(tree, i)
        except KeyError:
            continue
        for p in out:
            if is_prefix(p, leaf):
                out[p].append(i)
    return {p: v for p, v in out.items() if v}


# -- model --------------------------------------------------------------------


class TwoTower(nn.Module):
    """User tower f: mean-pooled item embeddings -> MLP. Item tower g: embedding -> MLP.

    The towers own separate embedding tables.
    """

    def __init__(self, items: Sequence[int], hyper: RetrievalHyper):
        super().__init__()
        self.items = [int(i) for i in items]
        self.item_index = {i: t for t, i in enumerate(self.items, start=1)}
        self.hyper = hyper
        d, n = hyper.d_emb, len(self.items) + 1
        self.user_embed = nn.Embedding(n, d, padding_idx=0)
        self.item_embed = nn.Embedding(n, d, padding_idx=0)
        self.user_mlp = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d))
        self.item_mlp = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d))
        for emb in (self.user_embed, self.item_embed):
            nn.init.normal_(emb.weight, std=0.1)
            with torch.no_grad():
                emb.weight[0].zero_()
        if hyper.zero_init_output:
            for mlp in (self.user_mlp, self.item_mlp):
                nn.init.zeros_(mlp[2].weight)
                nn.init.zeros_(mlp[2].bias)

    def tokens(self, ids: Iterable[int]) -> list[int]:
        return [self.item_index[int(i)] for i in ids]

    def user_vec(self, inp: torch.Tensor) -> torch.Tensor:
        mask = (inp != 0).to(self.user_embed.weight.dtype)
        pooled = (self.user_embed(inp) * mask[..., None]).sum(1) / mask.sum(1, keepdim=True).clamp(min=1)
        return self.user_mlp(pooled)

    def item_vec(self, tok: torch.Tensor) -> torch.Tensor:
        return self.item_mlp(self.item_embed(tok))

    @torch.no_grad()
    def embed_user(self, items: Sequence[int]) -> np.ndarray:
        items = [i for i in items if i in self.item_index][-self.hyper.max_input :]
        inp = torch.as_tensor([self.tokens(items) or [0]], dtype=torch.long)
        return self._twin().user_vec(inp)[0].numpy().astype(np.float32)

    @torch.no_grad()
    def embed_items(self, ids: Sequence[int]) -> np.ndarray:
        tok = torch.as_tensor(self.tokens(ids), dtype=torch.long)
        return self._twin().item_vec(tok).numpy().astype(np.float32)

    def _twin(self) -> "TwoTower":
        # float64 copy for inference, rebuilt whenever parameters change in place
        if next(self.parameters()).dtype == torch.float64:
            return self
        version = sum(p._version for p in self.parameters())
        cached = self.__dict__.get("_twin_cache")
        if cached is None or cached[0] != version:
            twin = TwoTower(self.items, self.hyper).double()
            twin.load_state_dict({n: t.double() for n, t in self.state_dict().items()})
            twin.eval()
            self.__dict__["_twin_cache"] = cached = (version, twin)
        return cached[1]

    def save(self, path: str | Path) -> None:
        header = {"kind": "two_tower", "hyper": asdict(self.hyper), "items": self.items}
        tensorio.save_tensors(path, header, {n: p.detach().cpu().numpy() for n, p in self.state_dict().items()})

    @classmethod
    def load(cls, path: str | Path) -> "TwoTower":
        header, tensors = tensorio.load_tensors(path)
        if header.get("kind") != "two_tower":
            raise ValueError(f"{path} is not a two-tower checkpoint")
        model = cls(header["items"], RetrievalHyper(**header["hyper"]))
        model.load_state_dict({n: torch.from_numpy(a) for n, a in tensors.items()})
        model.eval()
        return model


def init_two_tower(items, hyper, seed: int) -> TwoTower:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return TwoTower(items, hyper)


# -- loss & sampling ----------------------------------------------------------


@dataclass
class Batch:
    inputs: torch.Tensor  # (B, L) item tokens, 0-padded
    positives: torch.Tensor  # (B,)
    negatives: torch.Tensor  # (B, K)


def in_category_loss(model: TwoTower, batch: Batch, reduction: str = "mean") -> torch.Tensor:
    """-log s(r+) - mean_j log(1 - s(r-_j)) per positive, with s the logistic function."""
    u = model.user_vec(batch.inputs)
    pos = (u * model.item_vec(batch.positives)).sum(-1)
    neg = (u[:, None, :] * model.item_vec(batch.negatives)).sum(-1)
    per = -F.logsigmoid(pos) - F.logsigmoid(-neg).mean(-1)
    return per.sum() if reduction == "sum" else per.mean()


def sample_negatives(allowed: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws (with replacement) from ``allowed``, the category minus the user's items."""
    return allowed[rng.integers(len(allowed), size=n)]


@dataclass
class Group:
    """One (user, category) training unit: time-ordered items and the negative pool."""

    user_id: int
    category: Category
    items: list[int]
    allowed: np.ndarray


def kkv_groups(kkv: KKV, tree: CategoryTree, histories: Mapping[int, Sequence[int]] | None = None) -> tuple[list[Group], int]:
    """Training groups with in-category negative pools; returns (groups, skipped)."""
    groups, skipped = [], 0
    libs: dict[Category, np.ndarray] = {}
    for user in sorted(kkv):
        owned = set(histories[user]) if histories is not None else {i for v in kkv[user].values() for i in v}
        owned_arr = np.fromiter(owned, dtype=np.int64)
        for cat in sorted(kkv[user]):
            if cat not in libs:
                libs[cat] = np.asarray(sub_library(tree, cat), dtype=np.int64)
            allowed = np.setdiff1d(libs[cat], owned_arr)
            if len(allowed) == 0:
                skipped += 1
                continue
            groups.append(Group(user, cat, list(kkv[user][cat]), allowed))
    return groups, skipped


def whole_library_groups(sequences: Mapping[int, Sequence[int]], items: Sequence[int]) -> list[Group]:
    lib = np.asarray(sorted(set(items)), dtype=np.int64)
    known = set(lib.tolist())
    out = []
    for user in sorted(sequences):
        seq = [i for i in sequences[user] if i in known]
        allowed = np.setdiff1d(lib, np.asarray(seq, dtype=np.int64))
        if len(seq) >= 2 and len(allowed):
            out.append(Group(user, (), seq, allowed))
    return out


def make_examples(groups: Sequence[Group], hyper: RetrievalHyper, rng: np.random.Generator):
    """Autoregressive positives: item t is the positive, items before t the tower input."""
    rows = []
    for g in groups:
        positions = np.arange(1, len(g.items))
        if len(positions) == 0:
            continue
        if len(positions) > hyper.max_positives:
            positions = np.sort(rng.choice(positions, size=hyper.max_positives, replace=False))
        for t in positions:
            inp = g.items[max(0, t - hyper.max_input) : t]
            rows.append((inp, g.items[t], sample_negatives(g.allowed, hyper.negatives, rng)))
    return rows


def to_batch(model: TwoTower, rows) -> Batch:
    width = max(len(r[0]) for r in rows)
    inp = torch.zeros((len(rows), width), dtype=torch.long)
    for i, r in enumerate(rows):
        inp[i, : len(r[0])] = torch.as_tensor(model.tokens(r[0]))
    pos = torch.as_tensor(model.tokens(r[1] for r in rows), dtype=torch.long)
    neg = torch.as_tensor([model.tokens(r[2]) for r in rows], dtype=torch.long)
    return Batch(inp, pos, neg)


@dataclass
class TrainResult:
    model: TwoTower
    trace: list[float]
    skipped: int = 0


def train_groups(groups: Sequence[Group], items: Sequence[int], hyper: RetrievalHyper, seed: int = 0) -> TrainResult:
    if not groups:
        raise ValueError("no training groups")
    model = init_two_tower(items, hyper, seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=hyper.lr)
    rng = np.random.default_rng(seed)
    trace = []
    for epoch in range(hyper.epochs):
        rows = make_examples(groups, hyper, rng)
        order = rng.permutation(len(rows))
        total = 0.0
        for start in range(0, len(rows), hyper.batch):
            chunk = [rows[i] for i in order[start : start + hyper.batch]]
            loss = in_category_loss(model, to_batch(model, chunk))
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite retrieval loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(chunk)
        trace.append(total / len(rows))
    model.eval()
    return TrainResult(model, trace)


def train_retrieval(
    kkv: KKV,
    tree: CategoryTree,
    hyper: RetrievalHyper,
    seed: int = 0,
    histories: Mapping[int, Sequence[int]] | None = None,
    items: Sequence[int] | None = None,
) -> TrainResult:
    if not kkv:
        raise ValueError("empty KKV store")
    groups, skipped = kkv_groups(kkv, tree, histories)
    res = train_groups(groups, items if items is not None else tree.items, hyper, seed)
    res.skipped = skipped
    return res


def train_baseline(sequences: Mapping[int, Sequence[int]], items: Sequence[int], hyper: RetrievalHyper, seed: int = 0) -> TrainResult:
    """Single-embedding whole-library two-tower on unsplit sequences."""
    return train_groups(whole_library_groups(sequences, items), items, hyper, seed)


# -- indexes & search ---------------------------------------------------------


@dataclass
class SubLibraryIndex:
    category: Category
    items: np.ndarray  # int64 ids, ascending
    vectors: np.ndarray  # float32 (n, d)

    def __len__(self) -> int:
        return len(self.items)


def build_index(tree: CategoryTree, category: Sequence[int], model: TwoTower) -> SubLibraryIndex:
    ids = np.asarray(sub_library(tree, category), dtype=np.int64)
    if len(ids) == 0:
        raise ValueError(f"empty sub-library {format_path(category)}")
    return SubLibraryIndex(tuple(category), ids, model.embed_items(ids))


def build_leaf_indexes(tree: CategoryTree, model: TwoTower) -> dict[Category, SubLibraryIndex]:
    return {p: build_index(tree, p, model) for p in tree.leaf_paths}


def merge_indexes(category: Category, parts: Sequence[SubLibraryIndex]) -> SubLibraryIndex:
    ids = np.concatenate([p.items for p in parts])
    vecs = np.concatenate([p.vectors for p in parts])
    order = np.argsort(ids, kind="stable")
    return SubLibraryIndex(category, ids[order], vecs[order])


class IndexSet:
    """Leaf indexes, unioned on demand for coarser categories."""

    def __init__(self, leaves: Mapping[Category, SubLibraryIndex]):
        self.leaves = dict(leaves)
        self._cache: dict[Category, SubLibraryIndex] = {}

    def get(self, category: Category) -> SubLibraryIndex:
        category = tuple(category)
        if category in self.leaves:
            return self.leaves[category]
        if category not in self._cache:
            parts = [ix for p, ix in sorted(self.leaves.items()) if is_prefix(category, p)]
            if not parts:
                raise KeyError(f"no index under {format_path(category)!r}")
            self._cache[category] = merge_indexes(category, parts)
        return self._cache[category]

    def whole(self) -> SubLibraryIndex:
        return self.get(())

    def save(self, path: str | Path) -> None:
        d = next(iter(self.leaves.values())).vectors.shape[1]
        with open(path, "wb") as fh:
            fh.write(b"RMIDX001")
            fh.write(struct.pack("<II", len(self.leaves), d))
            for cat in sorted(self.leaves):
                ix = self.leaves[cat]
                name = format_path(cat).encode()
                fh.write(struct.pack("<I", len(name)))
                fh.write(name)
                fh.write(struct.pack("<Q", len(ix)))
                rec = np.empty(len(ix), dtype=[("id", "<u8"), ("vec", "<f4", (d,))])
                rec["id"], rec["vec"] = ix.items, ix.vectors
                fh.write(rec.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "IndexSet":
        leaves = {}
        with open(path, "rb") as fh:
            if fh.read(8) != b"RMIDX001":
                raise ValueError(f"{path}: not an index file")
            n, d = struct.unpack("<II", fh.read(8))
            rec = np.dtype([("id", "<u8"), ("vec", "<f4", (d,))])
            for _ in range(n):
                (nlen,) = struct.unpack("<I", fh.read(4))
                cat = parse_path(fh.read(nlen).decode())
                (count,) = struct.unpack("<Q", fh.read(8))
                arr = np.frombuffer(fh.read(count * rec.itemsize), dtype=rec)
                leaves[cat] = SubLibraryIndex(cat, arr["id"].astype(np.int64), arr["vec"].copy())
        return cls(leaves)


def topk(index: SubLibraryIndex, query: np.ndarray, m: int) -> list[tuple[int, float]]:
    """Exact maximum inner product search; ties go to the smaller item id."""
    if m < 1:
        raise ValueError("m must be >= 1")
    scores = index.vectors.astype(np.float64) @ np.asarray(query, dtype=np.float64)
    ids = index.items
    if m >= len(ids):
        order = np.lexsort((ids, -scores))
    else:
        part = np.argpartition(-scores, m - 1)[:m]
        cand = np.flatnonzero(scores >= scores[part].min())
        order = cand[np.lexsort((ids[cand], -scores[cand]))][:m]
    return [(int(ids[i]), float(scores[i])) for i in order]


# -- serving ------------------------------------------------------------------


def assign_quotas(probs: Sequence[float], m_total: int) -> list[int]:
    """floor(m * p) each, leftover slots one at a time in descending p."""
    p = np.asarray(probs, dtype=np.float64)
    p = p / p.sum()
    quotas = np.floor(m_total * p).astype(int)
    order = sorted(range(len(p)), key=lambda i: (-p[i], i))
    for j in range(m_total - int(quotas.sum())):
        quotas[order[j % len(order)]] += 1
    return quotas.tolist()


def beam_probabilities(interests: Sequence[BeamResult]) -> np.ndarray:
    lp = np.array([b.log_prob for b in interests], dtype=np.float64)
    w = np.exp(lp - lp.max())
    return w / w.sum()


@dataclass
class Retrieved:
    items: list[int]
    scores: list[float]
    categories: list[str]
    fallback: bool = False
    quotas: dict[str, int] = field(default_factory=dict)


def retrieve_user(
    history: Sequence[int],
    interests: Sequence[BeamResult],
    model: TwoTower,
    indexes: IndexSet,
    tree: CategoryTree,
    m_total: int,
    whole_library: bool = False,
    unified_sequence: bool = False,
) -> Retrieved:
    """Per-interest search with beam-probability quotas, merged and deduplicated.

    ``whole_library`` searches every category's embedding over the full
    catalogue; ``unified_sequence`` feeds the unsplit history to the user
    tower for every category. Neither flag changes anything else.
    """
    seen = set(history)
    kkv = split_behaviors(history, interests, tree)
    kept = [b for b in interests if tuple(b.path) in kkv]
    if not kept:
        q = model.embed_user(history)
        ranked = [(i, s) for i, s in topk(indexes.whole(), q, len(seen) + m_total) if i not in seen][:m_total]
        return Retrieved([i for i, _ in ranked], [s for _, s in ranked], [""] * len(ranked), fallback=True)

    probs = beam_probabilities(kept)
    quotas = assign_quotas(probs, m_total)
    ranked_lists = []
    for b in kept:
        cat = tuple(b.path)
        q = model.embed_user(history if unified_sequence else kkv[cat])
        ix = indexes.whole() if whole_library else indexes.get(cat)
        ranked_lists.append([(i, s) for i, s in topk(ix, q, len(ix)) if i not in seen])

    best: dict[int, tuple[float, str]] = {}
    cursors = []
    for b, quota, ranked in zip(kept, quotas, ranked_lists):
        name = format_path(b.path)
        for i, s in ranked[:quota]:
            if i not in best or s > best[i][0]:
                best[i] = (s, name)
        cursors.append(quota)
    # backfill, highest-probability interest first
    for n in sorted(range(len(kept)), key=lambda j: (-probs[j], j)):
        name = format_path(kept[n].path)
        ranked = ranked_lists[n]
        while len(best) < m_total and cursors[n] < len(ranked):
            i, s = ranked[cursors[n]]
            cursors[n] += 1
            if i not in best:
                best[i] = (s, name)
        if len(best) >= m_total:
            break
    merged = sorted(best.items(), key=lambda kv: (-kv[1][0], kv[0]))[:m_total]
    return Retrieved(
        [i for i, _ in merged],
        [v[0] for _, v in merged],
        [v[1] for _, v in merged],
        quotas={format_path(b.path): q for b, q in zip(kept, quotas)},
    )


def retrieve_unified(history: Sequence[int], model: TwoTower, index: SubLibraryIndex, m_total: int) -> Retrieved:
    """Baseline: one embedding of the whole history searched over the whole catalogue."""
    seen = set(history)
    q = model.embed_user(history)
    ranked = [(i, s) for i, s in topk(index, q, len(seen) + m_total) if i not in seen][:m_total]
    return Retrieved([i for i, _ in ranked], [s for _, s in ranked], [""] * len(ranked))

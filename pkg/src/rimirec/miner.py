"""Seq2seq interest miner: behaviour sequence -> semantic category IDs.

The encoder reads item tokens; the decoder emits layer-positioned category
tokens, so cluster number 4 at layer 2 and at layer 3 are different symbols.
The two sides never share an embedding table.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import tensorio
from .data import UserSequence, encoder_window, user_rng
from .taxonomy import END, CategoryTree, leaf_id, valid_continuations

BOS, EOS = 0, 1
IGNORE = -100


@dataclass(frozen=True)
class DecoderVocab:
    k: int
    max_depth: int

    @property
    def size(self) -> int:
        return 2 + self.k * self.max_depth

    def token(self, layer: int, r: int) -> int:
        if not (1 <= layer <= self.max_depth and 0 <= r < self.k):
            raise ValueError(f"no token for layer {layer}, cluster {r}")
        return 2 + (layer - 1) * self.k + r

    def lookup(self, token: int) -> tuple[int, int]:
        if token < 2 or token >= self.size:
            raise ValueError(f"token {token} is not a category token")
        layer, r = divmod(token - 2, self.k)
        return layer + 1, r

    def encode_path(self, path: Sequence[int]) -> list[int]:
        return [BOS] + [self.token(d, r) for d, r in enumerate(path, start=1)] + [EOS]


@dataclass
class MinerHyper:
    d_model: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    d_ff: int = 128
    max_src_len: int = 50
    lr: float = 1e-3
    batch: int = 64
    epochs: int = 10
    zero_init_output: bool = True


@dataclass
class Example:
    src: list[int]
    tgt: list[int]


@dataclass
class BeamResult:
    path: tuple[int, ...]
    log_prob: float
    step_log_probs: list[float] = field(default_factory=list)


def sinusoid(length: int, d: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(length, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe


class Attention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        assert d % heads == 0
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, x, mem, mask):
        # mask: bool, broadcastable to (B, heads, Tq, Tk); True = attend
        B, Tq, d = x.shape
        Tk = mem.shape[1]
        h, dh = self.heads, d // self.heads
        q = self.q(x).view(B, Tq, h, dh).transpose(1, 2)
        k = self.k(mem).view(B, Tk, h, dh).transpose(1, 2)
        v = self.v(mem).view(B, Tk, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        scores = scores.masked_fill(~mask, float("-inf"))
        out = scores.softmax(-1) @ v
        return self.o(out.transpose(1, 2).reshape(B, Tq, d))


class FeedForward(nn.Module):
    def __init__(self, d: int, d_ff: int):
        super().__init__()
        self.fc1 = nn.Linear(d, d_ff)
        self.fc2 = nn.Linear(d_ff, d)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, d, heads, d_ff):
        super().__init__()
        self.ln1, self.ln2 = nn.LayerNorm(d), nn.LayerNorm(d)
        self.attn = Attention(d, heads)
        self.ff = FeedForward(d, d_ff)

    def forward(self, x, mask):
        y = self.ln1(x)
        x = x + self.attn(y, y, mask)
        return x + self.ff(self.ln2(x))


class DecoderLayer(nn.Module):
    def __init__(self, d, heads, d_ff):
        super().__init__()
        self.ln1, self.ln2, self.ln3 = nn.LayerNorm(d), nn.LayerNorm(d), nn.LayerNorm(d)
        self.self_attn = Attention(d, heads)
        self.cross_attn = Attention(d, heads)
        self.ff = FeedForward(d, d_ff)

    def forward(self, x, self_mask, h, cross_mask):
        y = self.ln1(x)
        x = x + self.self_attn(y, y, self_mask)
        x = x + self.cross_attn(self.ln2(x), h, cross_mask)
        return x + self.ff(self.ln3(x))


class MinerModel(nn.Module):
    def __init__(self, items: Sequence[int], vocab: DecoderVocab, hyper: MinerHyper):
        super().__init__()
        self.items = [int(i) for i in items]
        self.item_index = {i: t for t, i in enumerate(self.items, start=1)}  # 0 = PAD
        self.vocab = vocab
        self.hyper = hyper
        d = hyper.d_model
        self.enc_embed = nn.Embedding(len(self.items) + 1, d, padding_idx=0)
        self.dec_embed = nn.Embedding(vocab.size, d)
        self.encoder = nn.ModuleList(EncoderLayer(d, hyper.heads, hyper.d_ff) for _ in range(hyper.enc_layers))
        self.decoder = nn.ModuleList(DecoderLayer(d, hyper.heads, hyper.d_ff) for _ in range(hyper.dec_layers))
        self.enc_norm, self.dec_norm = nn.LayerNorm(d), nn.LayerNorm(d)
        self.out = nn.Linear(d, vocab.size)
        nn.init.normal_(self.enc_embed.weight, std=d**-0.5)
        nn.init.normal_(self.dec_embed.weight, std=d**-0.5)
        with torch.no_grad():
            self.enc_embed.weight[0].zero_()
        if hyper.zero_init_output:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)
        self.register_buffer("pos", sinusoid(max(hyper.max_src_len, 64), d).float(), persistent=False)

    def _pos(self, n, like):
        if n > self.pos.shape[0]:
            return sinusoid(n, self.hyper.d_model).to(like.dtype)
        return self.pos[:n].to(like.dtype)

    def src_tokens(self, src: Sequence[int]) -> list[int]:
        if len(src) > self.hyper.max_src_len:
            raise ValueError(f"source length {len(src)} exceeds max_src_len={self.hyper.max_src_len}")
        try:
            return [self.item_index[int(i)] for i in src]
        except KeyError as exc:
            raise KeyError(f"item {exc.args[0]} not in encoder vocabulary") from None

    def forward_encoder(self, tokens: torch.Tensor):
        mask = tokens != 0
        x = self.enc_embed(tokens) * math.sqrt(self.hyper.d_model) + self._pos(tokens.shape[1], self.enc_embed.weight)
        attn_mask = mask[:, None, None, :]
        for layer in self.encoder:
            x = layer(x, attn_mask)
        return self.enc_norm(x), mask

    def forward_decoder(self, h, src_mask, tgt_in: torch.Tensor):
        T = tgt_in.shape[1]
        x = self.dec_embed(tgt_in) * math.sqrt(self.hyper.d_model) + self._pos(T, self.dec_embed.weight)
        causal = torch.ones(T, T, dtype=torch.bool, device=tgt_in.device).tril()[None, None]
        cross = src_mask[:, None, None, :]
        for layer in self.decoder:
            x = layer(x, causal, h, cross)
        return self.out(self.dec_norm(x))

    def forward(self, src: torch.Tensor, tgt_in: torch.Tensor) -> torch.Tensor:
        h, mask = self.forward_encoder(src)
        return self.forward_decoder(h, mask, tgt_in)

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        header = {
            "kind": "miner",
            "hyper": asdict(self.hyper),
            "vocab": {"k": self.vocab.k, "max_depth": self.vocab.max_depth},
            "items": self.items,
        }
        tensors = {n: p.detach().cpu().numpy() for n, p in self.state_dict().items()}
        tensorio.save_tensors(path, header, tensors)

    @classmethod
    def load(cls, path: str | Path) -> "MinerModel":
        header, tensors = tensorio.load_tensors(path)
        if header.get("kind") != "miner":
            raise ValueError(f"{path} is not a miner checkpoint")
        model = cls(header["items"], DecoderVocab(**header["vocab"]), MinerHyper(**header["hyper"]))
        model.load_state_dict({n: torch.from_numpy(a) for n, a in tensors.items()})
        model.eval()
        return model


# -- data ---------------------------------------------------------------------


def build_training_examples(
    sequences: Sequence[UserSequence],
    tree: CategoryTree,
    vocab: DecoderVocab,
    prefix_aug: float = 0.3,
    seed: int = 0,
    min_leaf_hits: int = 2,
    short_term: int = 20,
    long_term: int = 30,
) -> list[Example]:
    """One example per (user, leaf with at least ``min_leaf_hits`` behaviours).

    With probability ``prefix_aug`` an example is paired with a copy whose
    target is a random proper prefix of the leaf path, so the decoder learns
    to stop early.
    """
    rng = np.random.default_rng(seed)
    known = set(tree.items)
    out = []
    for s in sequences:
        items = [i for i in s.items if i in known]
        if not items:
            continue
        src = encoder_window(items, user_rng(seed, s.user_id), short_term, long_term)
        hits: dict[tuple[int, ...], int] = {}
        for i in items:
            p = leaf_id(tree, i)
            hits[p] = hits.get(p, 0) + 1
        for path in sorted(p for p, n in hits.items() if n >= min_leaf_hits):
            out.append(Example(src, vocab.encode_path(path)))
            if prefix_aug > 0 and len(path) > 1 and rng.random() < prefix_aug:
                cut = int(rng.integers(1, len(path)))
                out.append(Example(src, vocab.encode_path(path[:cut])))
    return out


def _pad(rows: Sequence[Sequence[int]], value: int) -> torch.Tensor:
    width = max(len(r) for r in rows)
    out = torch.full((len(rows), width), value, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.as_tensor(r, dtype=torch.long)
    return out


def collate(model: MinerModel, batch: Sequence[Example]):
    src = _pad([model.src_tokens(e.src) for e in batch], 0)
    tgt_in = _pad([e.tgt[:-1] for e in batch], EOS)
    labels = _pad([e.tgt[1:] for e in batch], IGNORE)
    return src, tgt_in, labels


def sequence_loss(model: MinerModel, batch: Sequence[Example]) -> torch.Tensor:
    """Teacher-forced cross-entropy summed over target tokens, averaged over examples."""
    src, tgt_in, labels = collate(model, batch)
    logits = model(src, tgt_in)
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=IGNORE, reduction="sum")
    return ce / len(batch)


def init_miner(items, vocab, hyper, seed: int) -> MinerModel:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return MinerModel(items, vocab, hyper)


def train_miner(
    examples: Sequence[Example],
    items: Sequence[int],
    vocab: DecoderVocab,
    hyper: MinerHyper,
    seed: int = 0,
    model: MinerModel | None = None,
    steps: int | None = None,
) -> tuple[MinerModel, list[float]]:
    """Adam on mini-batches; returns the model and the mean loss of each epoch.

    ``steps`` caps the number of updates (epochs are then ignored).
    """
    if not examples:
        raise ValueError("no training examples")
    model = model or init_miner(items, vocab, hyper, seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=hyper.lr)
    rng = np.random.default_rng(seed)
    trace: list[float] = []
    done = 0
    epochs = hyper.epochs if steps is None else math.ceil(steps / math.ceil(len(examples) / hyper.batch))
    for epoch in range(epochs):
        order = rng.permutation(len(examples))
        total, count = 0.0, 0
        for start in range(0, len(order), hyper.batch):
            batch = [examples[i] for i in order[start : start + hyper.batch]]
            loss = sequence_loss(model, batch)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite miner loss at epoch {epoch}, batch {start // hyper.batch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
            done += 1
            if steps is not None and done >= steps:
                break
        trace.append(total / count)
        if steps is not None and done >= steps:
            break
    model.eval()
    return model, trace


# -- inference ----------------------------------------------------------------


@torch.no_grad()
def encode(model: MinerModel, src: Sequence[int]) -> torch.Tensor:
    """Encoder states for one source sequence, shape (len(src), d_model)."""
    tokens = torch.as_tensor([model.src_tokens(src)], dtype=torch.long)
    h, _ = model.forward_encoder(tokens)
    return h[0]


@torch.no_grad()
def _next_log_probs(model: MinerModel, h: torch.Tensor, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
    tgt = _pad(prefixes, EOS)
    lengths = torch.as_tensor([len(p) for p in prefixes])
    hb = h[None].expand(len(prefixes), -1, -1)
    mask = torch.ones(hb.shape[:2], dtype=torch.bool)
    logits = model.forward_decoder(hb, mask, tgt)
    last = logits[torch.arange(len(prefixes)), lengths - 1]
    return torch.log_softmax(last.double(), -1).numpy()


def decode_step(model: MinerModel, h: torch.Tensor, prefix_tokens: Sequence[int]) -> np.ndarray:
    if not prefix_tokens or prefix_tokens[0] != BOS:
        raise ValueError("prefix must start with BOS")
    return np.exp(_next_log_probs(model, h, [list(prefix_tokens)])[0])


def path_log_prob(model: MinerModel, h: torch.Tensor, path: Sequence[int]) -> float:
    """log P(path + END) by chaining decode_step one token at a time."""
    tokens = model.vocab.encode_path(path)
    total = 0.0
    for t in range(1, len(tokens)):
        total += math.log(decode_step(model, h, tokens[:t])[tokens[t]])
    return total


def beam_search(model: MinerModel, src: Sequence[int], tree: CategoryTree, beam_size: int) -> list[BeamResult]:
    """Prefix-tree constrained beam search, no length normalisation.

    Each step scores every valid continuation (child clusters, and END once the
    path is nonempty) of every live hypothesis and keeps the best ``beam_size``;
    finished hypotheses leave the beam. Stops once no live hypothesis can beat
    the ``beam_size``-th finished one.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    vocab = model.vocab
    h = encode(model, src)
    live: list[tuple[tuple[int, ...], float, list[float]]] = [((), 0.0, [])]
    finished: list[BeamResult] = []
    while live:
        logp = _next_log_probs(model, h, [vocab.encode_path(p)[:-1] for p, _, _ in live])
        cands = []
        for (path, score, steps), lp in zip(live, logp):
            for r in sorted(valid_continuations(tree, path)):
                if r == END:
                    s = float(lp[EOS])
                    cands.append((score + s, path, True, steps + [s]))
                else:
                    s = float(lp[vocab.token(len(path) + 1, r)])
                    cands.append((score + s, path + (r,), False, steps + [s]))
        cands.sort(key=lambda c: (-c[0], c[1], not c[2]))
        live = []
        for score, path, done, steps in cands[:beam_size]:
            if done:
                finished.append(BeamResult(path, score, steps))
            else:
                live.append((path, score, steps))
        if len(finished) >= beam_size:
            finished.sort(key=lambda b: (-b.log_prob, b.path))
            floor = finished[beam_size - 1].log_prob
            live = [x for x in live if x[1] > floor]
    finished.sort(key=lambda b: (-b.log_prob, b.path))
    return finished[:beam_size]


def user_source(items: Sequence[int], known: set[int] | dict, seed: int, user_id: int, short_term=20, long_term=30) -> list[int]:
    """Encoder input for a user: known items only, long/short-term window."""
    items = [i for i in items if i in known]
    return encoder_window(items, user_rng(seed, user_id), short_term, long_term)

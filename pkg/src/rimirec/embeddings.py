"""Behavioural item embeddings: windowed co-occurrence -> PPMI -> truncated eigendecomposition."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .data import UserSequence

_MAGIC = b"RMEMB001"


@dataclass
class Cooccurrence:
    items: np.ndarray  # item ids, row/column order of `counts`
    counts: sp.csr_matrix

    def index(self) -> dict[int, int]:
        return {int(x): i for i, x in enumerate(self.items)}


@dataclass
class ItemEmbeddings:
    items: np.ndarray
    vectors: np.ndarray  # (len(items), dim)
    residuals: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.items)

    def as_dict(self) -> dict[int, np.ndarray]:
        return {int(i): v for i, v in zip(self.items, self.vectors)}


def build_cooccurrence(
    sequences: Iterable[UserSequence], window: int = 5, items: Sequence[int] | None = None
) -> Cooccurrence:
    """Count pairs of distinct items at most ``window`` positions apart.

    ``items`` fixes the item universe; items outside it are ignored.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    sequences = list(sequences)
    if items is None:
        items = sorted({i for s in sequences for i in s.items})
    items = np.asarray(sorted(set(int(i) for i in items)), dtype=np.int64)
    index = {int(x): i for i, x in enumerate(items)}
    rows, cols = [], []
    for s in sequences:
        seq = np.asarray([index.get(int(i), -1) for i in s.items], dtype=np.int64)
        for off in range(1, window + 1):
            if off >= len(seq):
                break
            a, b = seq[:-off], seq[off:]
            ok = (a >= 0) & (b >= 0) & (a != b)
            rows.append(a[ok])
            cols.append(b[ok])
    n = len(items)
    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
    else:
        r = c = np.zeros(0, dtype=np.int64)
    data = np.ones(2 * len(r), dtype=np.float64)
    counts = sp.coo_matrix((data, (np.concatenate([r, c]), np.concatenate([c, r]))), shape=(n, n)).tocsr()
    counts.sum_duplicates()
    return Cooccurrence(items, counts)


def ppmi(counts: sp.spmatrix) -> sp.csr_matrix:
    counts = sp.csr_matrix(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return counts.copy()
    marg = np.asarray(counts.sum(axis=1)).ravel()
    coo = counts.tocoo()
    pmi = np.log(coo.data * total / (marg[coo.row] * marg[coo.col]))
    keep = pmi > 0
    out = sp.coo_matrix((pmi[keep], (coo.row[keep], coo.col[keep])), shape=counts.shape).tocsr()
    out.eliminate_zeros()
    return out


def factorize(
    cooc: Cooccurrence, dim: int = 32, iters: int = 10, seed: int = 0, oversample: int = 10
) -> ItemEmbeddings:
    """Top-``dim`` eigenpairs of the PPMI matrix by randomized subspace iteration.

    Rows are ``U * sqrt(max(lambda, 0))`` then L2-normalised; items without any
    co-occurrence keep the zero vector.
    """
    n = len(cooc.items)
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if n == 0 or cooc.counts.nnz == 0:
        raise ValueError("co-occurrence matrix is empty")
    if dim > n:
        raise ValueError(f"dim={dim} exceeds number of items ({n})")
    A = ppmi(cooc.counts)
    width = min(n, dim + oversample)
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(A @ rng.standard_normal((n, width)))
    residuals = []
    for _ in range(iters):
        Q, _ = np.linalg.qr(A @ Q)
        AQ = A @ Q
        T = Q.T @ AQ
        residuals.append(float(np.linalg.norm(AQ - Q @ T)))
    T = Q.T @ (A @ Q)
    evals, evecs = np.linalg.eigh((T + T.T) / 2)
    top = np.argsort(-evals, kind="stable")[:dim]
    U = Q @ evecs[:, top]
    # fix the sign of each eigenvector so reruns agree bitwise
    signs = np.sign(U[np.abs(U).argmax(axis=0), np.arange(U.shape[1])])
    signs[signs == 0] = 1
    vecs = U * signs * np.sqrt(np.clip(evals[top], 0, None))
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    vecs = np.divide(vecs, norms, out=np.zeros_like(vecs), where=norms > 1e-12)
    return ItemEmbeddings(cooc.items.copy(), vecs, residuals)


def save_embeddings(path: str | Path, emb: ItemEmbeddings) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", emb.dim, len(emb)))
        rec = np.dtype([("id", "<u8"), ("vec", "<f4", (emb.dim,))])
        arr = np.empty(len(emb), dtype=rec)
        arr["id"] = emb.items
        arr["vec"] = emb.vectors
        fh.write(arr.tobytes())


def load_embeddings(path: str | Path) -> ItemEmbeddings:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not an embedding file")
        dim, count = struct.unpack("<IQ", fh.read(12))
        rec = np.dtype([("id", "<u8"), ("vec", "<f4", (dim,))])
        arr = np.frombuffer(fh.read(count * rec.itemsize), dtype=rec)
    return ItemEmbeddings(arr["id"].astype(np.int64), arr["vec"].astype(np.float64))

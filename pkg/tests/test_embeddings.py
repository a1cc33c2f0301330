import itertools

import numpy as np
import pytest

from rimirec.data import UserSequence, synth_corpus
from rimirec.embeddings import (
    Cooccurrence,
    build_cooccurrence,
    factorize,
    load_embeddings,
    ppmi,
    save_embeddings,
)


def dense(cooc):
    return cooc.counts.toarray()


def test_adjacent_window_counts():
    c = build_cooccurrence([UserSequence(0, [1, 2, 3])], window=1)
    m, ix = dense(c), c.index()
    assert m[ix[1], ix[2]] == 1 and m[ix[2], ix[3]] == 1
    assert m[ix[1], ix[3]] == 0
    assert np.array_equal(m, m.T)


def test_self_pairs_excluded():
    c = build_cooccurrence([UserSequence(0, [1, 2, 1])], window=2)
    m, ix = dense(c), c.index()
    assert m[ix[1], ix[2]] == 2
    assert np.all(np.diag(m) == 0)


def test_empty_corpus():
    c = build_cooccurrence([], window=3)
    assert c.counts.shape == (0, 0)


def brute_cooccurrence(seqs, window):
    items = sorted({i for s in seqs for i in s.items})
    ix = {x: k for k, x in enumerate(items)}
    m = np.zeros((len(items), len(items)))
    for s in seqs:
        for a, b in itertools.combinations(range(len(s.items)), 2):
            if b - a <= window and s.items[a] != s.items[b]:
                m[ix[s.items[a]], ix[s.items[b]]] += 1
                m[ix[s.items[b]], ix[s.items[a]]] += 1
    return m


def test_matches_pairwise_enumeration():
    rng = np.random.default_rng(0)
    seqs = [UserSequence(u, rng.integers(0, 15, size=12).tolist()) for u in range(20)]
    for w in (1, 3, 7):
        assert np.array_equal(dense(build_cooccurrence(seqs, w)), brute_cooccurrence(seqs, w))


def test_merge_order_independent():
    rng = np.random.default_rng(1)
    seqs = [UserSequence(u, rng.integers(0, 10, size=8).tolist()) for u in range(10)]
    a = dense(build_cooccurrence(seqs, 3))
    b = dense(build_cooccurrence(seqs[::-1], 3))
    assert np.array_equal(a, b)


def two_cliques(n=5):
    seqs = [UserSequence(0, list(range(n)) * 2), UserSequence(1, list(range(n, 2 * n)) * 2)]
    return build_cooccurrence(seqs, window=n)


def test_two_clique_separation_matches_exact_eigenvectors():
    cooc = two_cliques()
    # exact eigenvectors of the PPMI matrix, by dense eigendecomposition
    A = ppmi(cooc.counts).toarray()
    evals, evecs = np.linalg.eigh(A)
    U = evecs[:, np.argsort(-evals)[:2]]
    Un = U / np.linalg.norm(U, axis=1, keepdims=True)
    exact_cos = Un @ Un.T

    emb = factorize(cooc, dim=2, iters=20, seed=0)
    cos = emb.vectors @ emb.vectors.T
    a, b = range(5), range(5, 10)
    for cos_m in (exact_cos, cos):
        within = min(cos_m[i, j] for grp in (a, b) for i in grp for j in grp)
        across = max(cos_m[i, j] for i in a for j in b)
        assert within > across
    # the randomized solver spans the same subspace as the exact one
    Q, _ = np.linalg.qr(emb.vectors)
    assert np.allclose(np.linalg.svd(U.T @ Q, compute_uv=False), 1, atol=1e-8)


def test_factorize_deterministic_and_normalised():
    c = synth_corpus(levels=1, branching=4, items_per_leaf=20, users=100, seed=0)
    cooc = build_cooccurrence(c.sequences, 5)
    a = factorize(cooc, 8, 10, seed=5)
    b = factorize(cooc, 8, 10, seed=5)
    assert np.array_equal(a.vectors, b.vectors)
    norms = np.linalg.norm(a.vectors, axis=1)
    live = norms > 0
    assert np.allclose(norms[live], 1, atol=1e-6)


def test_factorize_dim_too_large():
    cooc = two_cliques()
    with pytest.raises(ValueError):
        factorize(cooc, dim=len(cooc.items) + 1)


def test_isolated_items_get_zero_vectors():
    seqs = [UserSequence(0, [0, 1, 2, 0, 1, 2]), UserSequence(1, [3, 4, 3, 4])]
    cooc = build_cooccurrence(seqs, 2, items=range(7))
    emb = factorize(cooc, dim=2, seed=0)
    assert np.all(emb.vectors[5:] == 0)


def test_subspace_residual_decreases():
    c = synth_corpus(levels=2, branching=3, items_per_leaf=15, users=200, seed=2)
    emb = factorize(build_cooccurrence(c.sequences, 5), dim=8, iters=12, seed=0)
    r = emb.residuals
    assert all(b <= a * (1 + 1e-9) for a, b in zip(r, r[1:]))


def test_within_leaf_cosine_exceeds_cross_leaf():
    c = synth_corpus(levels=2, branching=3, items_per_leaf=20, users=400, noise_frac=0.1, seed=4)
    emb = factorize(build_cooccurrence(c.sequences, 5, items=range(len(c.labels))), dim=16, seed=0)
    v = emb.vectors
    lab = np.array([str(c.labels[int(i)]) for i in emb.items])
    same = lab[:, None] == lab[None, :]
    cos = v @ v.T
    off = ~np.eye(len(lab), dtype=bool)
    assert cos[same & off].mean() > cos[~same].mean()


def test_binary_roundtrip(tmp_path):
    cooc = two_cliques()
    emb = factorize(cooc, dim=2, seed=0)
    save_embeddings(tmp_path / "e.bin", emb)
    back = load_embeddings(tmp_path / "e.bin")
    assert np.array_equal(back.items, emb.items)
    assert np.array_equal(back.vectors, emb.vectors.astype(np.float32).astype(np.float64))
    raw = (tmp_path / "e.bin").read_bytes()
    assert len(raw) == 8 + 12 + len(emb) * (8 + 4 * 2)

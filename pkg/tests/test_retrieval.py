import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from gradcheck import relative_gradient_errors
from rimirec.miner import BeamResult
from rimirec.retrieval import (
    Batch,
    IndexSet,
    RetrievalHyper,
    SubLibraryIndex,
    assign_quotas,
    build_index,
    build_leaf_indexes,
    in_category_loss,
    init_two_tower,
    kkv_groups,
    make_examples,
    retrieve_unified,
    retrieve_user,
    sample_negatives,
    split_behaviors,
    topk,
    train_retrieval,
)
from rimirec.taxonomy import CategoryTree, Node, format_path, is_prefix, leaf_id, sub_library

SMALL = RetrievalHyper(d_emb=6, negatives=3, epochs=3, lr=1e-2, batch=16, max_positives=5, max_input=10)


def tree_244():
    """k=5 tree with leaves 2-4-4, 2-4-1, 2-0, 3-0, 3-1 (ten items each, ids 0..49)."""
    z = np.zeros(2)
    ids = iter(range(50))
    leaf = lambda p: Node(p, z, items=[next(ids) for _ in range(10)])
    n24 = Node((2, 4), z, children={1: leaf((2, 4, 1)), 4: leaf((2, 4, 4))})
    root = Node((), z, children={
        2: Node((2,), z, children={0: leaf((2, 0)), 4: n24}),
        3: Node((3,), z, children={0: leaf((3, 0)), 1: leaf((3, 1))}),
    })
    return CategoryTree(5, 10, root)


def br(path, lp):
    return BeamResult(tuple(path), lp, [lp])


# -- behaviour splitting ------------------------------------------------------


def test_split_prefix_match_keeps_order():
    tree = tree_244()
    a, b, c = tree.node((2, 4, 4)).items[0], tree.node((2, 4, 1)).items[0], tree.node((3, 0)).items[0]
    got = split_behaviors([a, c, b], [(2, 4)], tree)
    assert got == {(2, 4): [a, b]}


def test_split_drops_empty_category():
    tree = tree_244()
    item = tree.node((3, 0)).items[0]
    assert split_behaviors([item], [(2,), (3,)], tree) == {(3,): [item]}


def test_split_overlapping_interests_duplicate():
    tree = tree_244()
    a = tree.node((2, 4, 4)).items[3]
    got = split_behaviors([a], [br((2, 4), -1.0), br((2, 4, 4), -2.0)], tree)
    assert got == {(2, 4): [a], (2, 4, 4): [a]}


@settings(max_examples=30)
@given(st.lists(st.integers(0, 49), max_size=30), st.sets(st.sampled_from([(2,), (3,), (2, 4), (2, 4, 4), (3, 1)]), min_size=1))
def test_split_items_belong_to_their_category(items, interests):
    tree = tree_244()
    got = split_behaviors(items, sorted(interests), tree)
    for cat, lst in got.items():
        assert lst and all(is_prefix(cat, leaf_id(tree, i)) for i in lst)
        assert lst == [i for i in items if is_prefix(cat, leaf_id(tree, i))]


# -- loss ---------------------------------------------------------------------


def numpy_towers(model):
    w = {n: p.detach().double().numpy() for n, p in model.state_dict().items()}

    def mlp(x, prefix):
        h = np.maximum(x @ w[f"{prefix}.0.weight"].T + w[f"{prefix}.0.bias"], 0)
        return h @ w[f"{prefix}.2.weight"].T + w[f"{prefix}.2.bias"]

    def user(tokens):
        rows = [w["user_embed.weight"][t] for t in tokens if t != 0]
        return mlp(np.mean(rows, axis=0) if rows else np.zeros(w["user_embed.weight"].shape[1]), "user_mlp")

    def item(t):
        return mlp(w["item_embed.weight"][t], "item_mlp")

    return user, item


def brute_loss(model, batch):
    """The in-category objective written out one positive at a time."""
    user, item = numpy_towers(model)
    log_sig = lambda x: -np.logaddexp(0.0, -x)
    total = []
    for inp, pos, negs in zip(batch.inputs.tolist(), batch.positives.tolist(), batch.negatives.tolist()):
        u = user(inp)
        term = -log_sig(u @ item(pos))
        term -= sum(log_sig(-(u @ item(n))) for n in negs) / len(negs)
        total.append(term)
    return math.fsum(total) / len(total)


def random_batch(rng, n_items, size, width, k):
    inputs = np.zeros((size, width), dtype=np.int64)
    for r in range(size):
        length = rng.integers(1, width + 1)
        inputs[r, :length] = rng.integers(1, n_items + 1, size=length)
    return Batch(
        torch.as_tensor(inputs),
        torch.as_tensor(rng.integers(1, n_items + 1, size=size)),
        torch.as_tensor(rng.integers(1, n_items + 1, size=(size, k))),
    )


def test_zero_scores_give_two_ln2():
    hyper = RetrievalHyper(d_emb=4, negatives=1, zero_init_output=True)
    model = init_two_tower(range(10), hyper, 0)
    batch = random_batch(np.random.default_rng(0), 10, 5, 4, 1)
    assert in_category_loss(model, batch).item() == pytest.approx(2 * math.log(2), abs=1e-7)


@pytest.mark.parametrize("seed", range(5))
def test_loss_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    model = init_two_tower(range(12), SMALL, seed)
    batch = random_batch(rng, 12, 6, 5, 3)
    assert in_category_loss(model, batch).item() == pytest.approx(brute_loss(model, batch), abs=1e-5)
    assert in_category_loss(model.double(), batch).item() == pytest.approx(brute_loss(model, batch), abs=1e-9)


def test_sampler_stays_in_category_minus_history():
    tree = tree_244()
    history = {(2, 4): tree.node((2, 4, 4)).items[:4]}
    (group,), skipped = kkv_groups({7: history}, tree)
    assert skipped == 0
    draws = sample_negatives(group.allowed, 10_000, np.random.default_rng(0))
    allowed = set(sub_library(tree, (2, 4))) - set(history[(2, 4)])
    assert set(draws.tolist()) == allowed


def test_exhausted_category_is_skipped():
    tree = tree_244()
    full = tree.node((3, 1)).items
    groups, skipped = kkv_groups({1: {(3, 1): list(full)}}, tree)
    assert groups == [] and skipped == 1


def test_autoregressive_positives_capped():
    tree = tree_244()
    lst = sub_library(tree, (2,))[:12]
    groups, _ = kkv_groups({1: {(2,): lst}}, tree)
    rows = make_examples(groups, SMALL, np.random.default_rng(0))
    assert len(rows) == SMALL.max_positives
    for inp, pos, negs in rows:
        t = lst.index(pos)
        assert inp == lst[max(0, t - SMALL.max_input):t]
        assert not set(negs.tolist()) & set(lst)


def tower_gradient_errors(seed=0):
    model = init_two_tower(range(8), RetrievalHyper(d_emb=4, negatives=2), seed).double()
    batch = random_batch(np.random.default_rng(seed), 8, 4, 3, 2)
    return relative_gradient_errors(model, lambda: in_category_loss(model, batch))


@pytest.mark.slow
def test_tower_gradients_match_finite_differences():
    errors = tower_gradient_errors()
    assert max(errors.values()) <= 1e-5, errors


def toy_kkv(tree, rng, users=30):
    kkv, hist = {}, {}
    cats = [(2, 4), (2, 0), (3,)]
    for u in range(users):
        mine = {}
        for cat in rng.choice(len(cats), size=2, replace=False):
            lib = sub_library(tree, cats[cat])
            mine[cats[cat]] = rng.choice(lib, size=5, replace=False).tolist()
        kkv[u] = mine
        hist[u] = [i for v in mine.values() for i in v]
    return kkv, hist


def test_training_reduces_loss_and_is_deterministic():
    tree = tree_244()
    kkv, hist = toy_kkv(tree, np.random.default_rng(0))
    a = train_retrieval(kkv, tree, SMALL, seed=3, histories=hist)
    b = train_retrieval(kkv, tree, SMALL, seed=3, histories=hist)
    assert a.trace[-1] < a.trace[0]
    assert all(torch.equal(x, y) for x, y in zip(a.model.state_dict().values(), b.model.state_dict().values()))


def test_empty_kkv_rejected():
    with pytest.raises(ValueError):
        train_retrieval({}, tree_244(), SMALL)


# -- indexes & top-k ----------------------------------------------------------


@pytest.fixture(scope="module")
def trained():
    tree = tree_244()
    kkv, hist = toy_kkv(tree, np.random.default_rng(1))
    return tree, train_retrieval(kkv, tree, SMALL, seed=0, histories=hist).model


def test_index_matches_sub_library_and_reembeds_bitwise(trained):
    tree, model = trained
    ix = build_index(tree, (2, 4), model)
    assert ix.items.tolist() == sub_library(tree, (2, 4))
    for pos in (0, 7, 19):
        assert np.array_equal(model.embed_items([ix.items[pos]])[0], ix.vectors[pos])


def test_leaf_indexes_cover_corpus(trained):
    tree, model = trained
    leaves = build_leaf_indexes(tree, model)
    ids = np.concatenate([ix.items for ix in leaves.values()])
    assert sorted(ids.tolist()) == tree.items
    assert IndexSet(leaves).get((2,)).items.tolist() == sub_library(tree, (2,))


def test_index_save_load(trained, tmp_path):
    tree, model = trained
    s = IndexSet(build_leaf_indexes(tree, model))
    s.save(tmp_path / "ix.bin")
    back = IndexSet.load(tmp_path / "ix.bin")
    assert sorted(back.leaves) == sorted(s.leaves)
    for cat in s.leaves:
        assert np.array_equal(back.leaves[cat].items, s.leaves[cat].items)
        assert np.array_equal(back.leaves[cat].vectors, s.leaves[cat].vectors)


def full_scan(index, q, m):
    scores = index.vectors.astype(np.float64) @ q.astype(np.float64)
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], index.items[i]))
    return [int(index.items[i]) for i in ranked[:m]]


def test_topk_unit_vector_first():
    ix = SubLibraryIndex((), np.arange(4), np.eye(4, dtype=np.float32))
    assert topk(ix, np.eye(4)[2], 1)[0][0] == 2


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.integers(1, 60))
def test_topk_equals_full_scan_with_ties(seed, m):
    rng = np.random.default_rng(seed)
    # coarse quantisation forces many exactly tied scores
    vecs = rng.integers(-2, 3, size=(50, 3)).astype(np.float32)
    ids = np.sort(rng.choice(1000, 50, replace=False))
    ix = SubLibraryIndex((), ids, vecs)
    q = rng.integers(-2, 3, size=3).astype(np.float32)
    assert [i for i, _ in topk(ix, q, m)] == full_scan(ix, q, m)


def test_topk_m_beyond_size_returns_all():
    ix = SubLibraryIndex((), np.arange(5), np.random.default_rng(0).normal(size=(5, 2)).astype(np.float32))
    assert len(topk(ix, np.ones(2), 10)) == 5
    with pytest.raises(ValueError):
        topk(ix, np.ones(2), 0)


# -- quotas & merging ---------------------------------------------------------


def test_quota_example():
    assert assign_quotas([0.6, 0.4], 10) == [6, 4]
    assert assign_quotas([1.0], 7) == [7]


@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=8), st.integers(1, 200))
def test_quotas_sum_and_order(probs, m):
    q = assign_quotas(probs, m)
    assert sum(q) == m and min(q) >= 0
    for i in range(len(probs)):
        for j in range(len(probs)):
            if probs[i] > probs[j]:
                assert q[i] >= q[j]


def user_case(tree):
    hist = tree.node((2, 4, 4)).items[:3] + tree.node((3, 0)).items[:2]
    interests = [br((2, 4), -0.4), br((2, 4, 4), -1.2), br((3,), -1.5)]
    return hist, interests


def test_retrieve_user_contract(trained):
    tree, model = trained
    ixs = IndexSet(build_leaf_indexes(tree, model))
    hist, interests = user_case(tree)
    out = retrieve_user(hist, interests, model, ixs, tree, 20)
    assert len(out.items) == 20 == len(set(out.items))
    assert not set(out.items) & set(hist)
    for i, cat in zip(out.items, out.categories):
        assert is_prefix(tuple(int(x) for x in cat.split("-")), leaf_id(tree, i))
    assert sum(out.quotas.values()) == 20 and not out.fallback
    assert out.scores == sorted(out.scores, reverse=True)


def test_single_interest_is_plain_topk(trained):
    tree, model = trained
    ixs = IndexSet(build_leaf_indexes(tree, model))
    hist = tree.node((3, 0)).items[:3]
    out = retrieve_user(hist, [br((3,), -0.1)], model, ixs, tree, 8)
    want = [i for i, _ in topk(ixs.get((3,)), model.embed_user(hist), 20) if i not in hist][:8]
    assert out.items == want


def test_overlapping_categories_dedupe(trained):
    tree, model = trained
    ixs = IndexSet(build_leaf_indexes(tree, model))
    hist = tree.node((2, 4, 4)).items[:2]
    out = retrieve_user(hist, [br((2, 4), -0.5), br((2, 4, 4), -0.9)], model, ixs, tree, 15)
    assert len(out.items) == len(set(out.items)) == 15


def test_fallback_when_no_category_has_items(trained):
    tree, model = trained
    ixs = IndexSet(build_leaf_indexes(tree, model))
    hist = tree.node((3, 0)).items[:3]
    out = retrieve_user(hist, [br((2,), -0.1)], model, ixs, tree, 10)
    assert out.fallback and len(out.items) == 10 and not set(out.items) & set(hist)
    base = retrieve_unified(hist, model, ixs.whole(), 10)
    assert base.items == out.items


def test_ablation_flags_change_only_their_stage(trained):
    tree, model = trained
    ixs = IndexSet(build_leaf_indexes(tree, model))
    hist, interests = user_case(tree)
    full = retrieve_user(hist, interests, model, ixs, tree, 20)
    whole = retrieve_user(hist, interests, model, ixs, tree, 20, whole_library=True)
    uni = retrieve_user(hist, interests, model, ixs, tree, 20, unified_sequence=True)
    assert full.quotas == whole.quotas == uni.quotas
    # unified input keeps searching inside each category
    for i, cat in zip(uni.items, uni.categories):
        assert is_prefix(tuple(int(x) for x in cat.split("-")), leaf_id(tree, i))
    # whole-library search scores with the per-category query, so scores never drop
    assert whole.scores[0] >= full.scores[0]
    assert not set(whole.items) & set(hist)

#!/usr/bin/env python3
"""How well the tree recovers a planted hierarchy, from planted and from learned embeddings."""
import argparse

from sklearn.metrics import adjusted_rand_score

from rimirec.data import synth_corpus
from rimirec.embeddings import build_cooccurrence, factorize
from rimirec.taxonomy import build_tree, leaf_id


def ari(labels, tree, items, depth=None):
    cut = (lambda p: p[:depth]) if depth else (lambda p: p)
    return adjusted_rand_score([str(cut(labels[i])) for i in items], [str(cut(leaf_id(tree, i))) for i in items])


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--levels", type=int, default=2)
    ap.add_argument("--branching", type=int, default=4)
    ap.add_argument("--items-per-leaf", type=int, default=50)
    ap.add_argument("--users", type=int, default=2000)
    ap.add_argument("--noise", type=float, default=0.0)
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()

    k, c = args.branching, args.items_per_leaf
    print(f"{'seed':>4} {'planted leaf':>12} {'planted L1':>10} {'learned leaf':>12} {'learned L1':>10}")
    for seed in range(args.seeds):
        corpus = synth_corpus(args.levels, args.branching, args.items_per_leaf, args.users,
                              noise_frac=args.noise, seed=seed)
        items = sorted(corpus.labels)
        planted = build_tree(items, corpus.embeddings[items], k, c, seed)
        emb = factorize(build_cooccurrence(corpus.sequences, 5, items), 32, 10, seed)
        learned = build_tree(emb.items, emb.vectors, k, c, seed)
        print(f"{seed:>4} {ari(corpus.labels, planted, items):12.3f} {ari(corpus.labels, planted, items, 1):10.3f} "
              f"{ari(corpus.labels, learned, items):12.3f} {ari(corpus.labels, learned, items, 1):10.3f}")


if __name__ == "__main__":
    main()

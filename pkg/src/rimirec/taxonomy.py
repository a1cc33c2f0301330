"""Hierarchical k-means category tree and semantic category IDs.

A category ID is a tuple of per-layer cluster numbers, ``(2, 4, 4)`` for
layer-1 cluster 2, layer-2 cluster 4, layer-3 cluster 4. Prefixes of a leaf
path name its coarser ancestor circles.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

END = -1  # end-of-path marker returned by valid_continuations

Path_ = tuple[int, ...]


class TaxonomyError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


def format_path(path: Sequence[int]) -> str:
    return "-".join(str(r) for r in path)


def parse_path(text: str) -> Path_:
    return tuple(int(t) for t in text.split("-")) if text else ()


def child_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# -- k-means ------------------------------------------------------------------


def _sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = _sqdist(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than k; remaining seeds duplicate and stay empty
            centers.append(centers[-1])
            continue
        idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, _sqdist(x, x[idx][None])[:, 0])
    return np.array(centers)


def kmeans(points: np.ndarray, k: int, max_iters: int = 50, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding.

    Returns ``(assignments, centroids)``. Empty clusters take the point farthest
    from its centroid in the largest cluster; when every remaining point sits on
    its centroid the cluster is left empty (its centroid row is NaN-free but
    unused). With fewer points than ``k`` each point is its own cluster.
    """
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if n == 0:
        raise ValueError("kmeans needs at least one point")
    if n < k:
        return np.arange(n), x.copy()
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    assign = np.full(n, -1)
    for _ in range(max_iters):
        new = _sqdist(x, centroids).argmin(1)
        new = _repair_empty(x, new, centroids, k)
        if np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            mask = assign == j
            if mask.any():
                centroids[j] = x[mask].mean(0)
    return assign, centroids


def _repair_empty(x, assign, centroids, k):
    assign = assign.copy()
    for j in range(k):
        if (assign == j).any():
            continue
        sizes = np.bincount(assign, minlength=k)
        big = int(sizes.argmax())
        if sizes[big] < 2:
            continue
        members = np.flatnonzero(assign == big)
        d = ((x[members] - centroids[big]) ** 2).sum(1)
        if d.max() <= 0:
            continue
        far = members[int(d.argmax())]
        assign[far] = j
        centroids[j] = x[far]
    return assign


# -- tree ---------------------------------------------------------------------


@dataclass
class Node:
    path: Path_
    centroid: np.ndarray
    children: dict[int, "Node"] = field(default_factory=dict)
    items: list[int] | None = None
    unsplittable: bool = False

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def layer(self) -> int:
        return len(self.path)

    def iter_leaves(self) -> Iterator["Node"]:
        if self.is_leaf:
            yield self
        else:
            for r in sorted(self.children):
                yield from self.children[r].iter_leaves()


@dataclass
class CategoryTree:
    k: int
    c: int
    root: Node
    _leaf_of: dict[int, Path_] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._leaf_of:
            self._leaf_of = {i: leaf.path for leaf in self.root.iter_leaves() for i in leaf.items}

    @property
    def leaves(self) -> list[Node]:
        return list(self.root.iter_leaves())

    @property
    def leaf_paths(self) -> list[Path_]:
        return [n.path for n in self.root.iter_leaves()]

    @property
    def items(self) -> list[int]:
        return sorted(self._leaf_of)

    @property
    def max_depth(self) -> int:
        return max(len(p) for p in self.leaf_paths)

    def node(self, path: Sequence[int]) -> Node:
        node = self.root
        for r in path:
            try:
                node = node.children[int(r)]
            except KeyError:
                raise TaxonomyError(f"invalid category path {format_path(path)!r}") from None
        return node

    def has_path(self, path: Sequence[int]) -> bool:
        try:
            self.node(path)
        except TaxonomyError:
            return False
        return True

    def iter_nodes(self) -> Iterator[Node]:
        stack = [self.root]
        while stack:
            n = stack.pop()
            yield n
            stack.extend(n.children[r] for r in sorted(n.children, reverse=True))

    def to_json(self) -> dict:
        def enc(n: Node) -> dict:
            d = {
                "layer": n.layer,
                "cluster_number": n.path[-1] if n.path else None,
                "centroid": [float(v) for v in n.centroid],
                "unsplittable": n.unsplittable,
            }
            if n.is_leaf:
                d["items"] = [int(i) for i in n.items]
            else:
                d["children"] = [enc(n.children[r]) for r in sorted(n.children)]
            return d

        return {"k": self.k, "c": self.c, "root": enc(self.root)}

    @classmethod
    def from_json(cls, obj: dict) -> "CategoryTree":
        def dec(d: dict, prefix: Path_) -> Node:
            path = prefix if d["cluster_number"] is None else prefix + (int(d["cluster_number"]),)
            node = Node(path, np.asarray(d["centroid"], dtype=np.float64), unsplittable=d.get("unsplittable", False))
            if "children" in d:
                for ch in d["children"]:
                    child = dec(ch, path)
                    node.children[child.path[-1]] = child
            else:
                node.items = list(d["items"])
            return node

        return cls(obj["k"], obj["c"], dec(obj["root"], ()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "CategoryTree":
        return cls.from_json(json.loads(Path(path).read_text()))


def _normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 1e-12)


def build_tree(items: Sequence[int], vectors: np.ndarray, k: int = 4, c: int = 250, seed: int = 0, max_iters: int = 50) -> CategoryTree:
    """Recursive k-means: every cluster holding more than ``c`` items is split again.

    Zero vectors (items with no signal) are left out of each k-means call and
    attached to the nearest centroid afterwards.
    """
    if k < 2 or c < 1:
        raise ValueError("need k >= 2 and c >= 1")
    items = np.asarray(items, dtype=np.int64)
    if len(items) == 0:
        raise ValueError("empty embedding matrix")
    x = _normalize(np.asarray(vectors, dtype=np.float64))
    root = Node((), x.mean(0))
    _split(root, items, x, k, c, seed, max_iters, force=True)
    return CategoryTree(k, c, root)


def _split(node: Node, items, x, k, c, seed, max_iters, force=False):
    if len(items) <= c and not force:
        node.items = sorted(int(i) for i in items)
        return
    live = np.linalg.norm(x, axis=1) > 1e-12
    if live.sum() == 0:
        assign, centroids = np.zeros(len(items), dtype=np.int64), x[:1].copy()
    else:
        a_live, centroids = kmeans(x[live], k, max_iters, seed)
        assign = np.empty(len(items), dtype=np.int64)
        assign[live] = a_live
        if (~live).any():
            # nearest centroid to the origin
            assign[~live] = int((centroids * centroids).sum(1).argmin())
    labels = [j for j in range(len(centroids)) if (assign == j).any()]
    if len(labels) < 2 and not force:
        node.items = sorted(int(i) for i in items)
        node.unsplittable = True
        return
    for j in labels:
        mask = assign == j
        child = Node(node.path + (j,), x[mask].mean(0))
        node.children[j] = child
        if len(labels) < 2:
            # degenerate root: one child that cannot be split further
            child.items = sorted(int(i) for i in items[mask])
            child.unsplittable = bool(mask.sum() > c)
        else:
            _split(child, items[mask], x[mask], k, c, child_seed(seed, j), max_iters)


# -- queries ------------------------------------------------------------------


def leaf_id(tree: CategoryTree, item_id: int) -> Path_:
    try:
        return tree._leaf_of[int(item_id)]
    except KeyError:
        raise TaxonomyError(f"unknown item {item_id}") from None


def sub_library(tree: CategoryTree, path: Sequence[int]) -> list[int]:
    node = tree.node(path)
    return sorted(i for leaf in node.iter_leaves() for i in leaf.items)


def valid_continuations(tree: CategoryTree, prefix: Sequence[int]) -> set[int]:
    """Child cluster numbers under ``prefix``, plus ``END`` for any nonempty prefix."""
    node = tree.node(prefix)
    out = set(node.children)
    if len(prefix) > 0:
        out.add(END)
    return out


def all_paths(tree: CategoryTree) -> list[Path_]:
    """Every nonempty node path, i.e. every decodable category ID."""
    return sorted(n.path for n in tree.iter_nodes() if n.path)


def is_prefix(prefix: Sequence[int], path: Sequence[int]) -> bool:
    return len(prefix) <= len(path) and tuple(path[: len(prefix)]) == tuple(prefix)

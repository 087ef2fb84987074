"""Behavior taxonomy trees grown by agglomerative clustering of text embeddings."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import BehaviorTaxonomy

TREE_VERSION = "tree/v1"
LINKAGES = ("average", "single", "complete")


class TreeError(ValueError):
    """A tree file or tree operation violates the tree invariants."""


@dataclass(frozen=True)
class TextEmbedding:
    label: str
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError(f"embedding for {self.label!r} must be a finite vector")
        if not np.linalg.norm(v) > 0:
            raise ValueError(f"embedding for {self.label!r} is the zero vector")
        object.__setattr__(self, "vector", v)


def load_label_embeddings(path: str | Path, taxonomy: BehaviorTaxonomy) -> list[TextEmbedding]:
    """Read ``{"<label>": [floats], ...}`` and return embeddings in taxonomy order."""
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: expected a JSON object mapping labels to vectors")
    out = []
    width = None
    for label in taxonomy.names:
        if label not in doc:
            raise ValueError(f"{path}: no embedding for label {label!r}")
        vec = np.asarray(doc[label], dtype=np.float64)
        if width is None:
            width = vec.shape
        elif vec.shape != width:
            raise ValueError(f"{path}: width mismatch, {label!r} has {vec.shape[0]} entries, "
                             f"expected {width[0]}")
        out.append(TextEmbedding(label, vec))
    return out


def save_label_embeddings(embeddings: Sequence[TextEmbedding], path: str | Path) -> None:
    doc = {e.label: e.vector.tolist() for e in embeddings}
    Path(path).write_text(json.dumps(doc) + "\n")


def trigrams(text: str) -> list[str]:
    s = f"  {text.lower().strip()} "
    return [s[i:i + 3] for i in range(len(s) - 2)]


def fallback_embed(description: str, width: int = 256, seed: int = 0) -> np.ndarray:
    """Offline text embedding: character trigrams hashed into ``width`` buckets, L2-normalized."""
    if not description or not description.strip():
        raise ValueError("cannot embed an empty description")
    if width < 1:
        raise ValueError("width must be >= 1")
    v = np.zeros(width)
    key = seed.to_bytes(8, "little", signed=True)
    for gram in trigrams(description):
        h = hashlib.blake2b(gram.encode(), digest_size=8, key=key).digest()
        v[int.from_bytes(h, "little") % width] += 1.0
    return v / np.linalg.norm(v)


def embed_taxonomy(taxonomy: BehaviorTaxonomy, width: int = 256, seed: int = 0) -> list[TextEmbedding]:
    return [TextEmbedding(lab, fallback_embed(desc, width, seed)) for lab, desc in taxonomy.labels]


@dataclass(frozen=True)
class TreeNode:
    node_id: int
    kind: str  # "leaf" | "inner" | "root"
    children: tuple[int, ...] = ()
    label: str | None = None
    name: str | None = None


@dataclass(frozen=True)
class Tree:
    nodes: dict[int, TreeNode]
    root_id: int
    M: int

    def __post_init__(self):
        validate(self)

    @property
    def leaf_ids(self) -> list[int]:
        return sorted(n for n, node in self.nodes.items() if node.kind == "leaf")

    @property
    def leaf_labels(self) -> list[str]:
        return [self.nodes[n].label for n in self.leaf_ids]

    def leaf_of(self, label: str) -> int:
        for n in self.leaf_ids:
            if self.nodes[n].label == label:
                return n
        raise KeyError(f"no leaf for label {label!r}")

    def parents(self) -> dict[int, int]:
        return {c: n for n, node in self.nodes.items() for c in node.children}

    def path(self, node_id: int) -> list[int]:
        """Node ids from the root down to ``node_id``."""
        par = self.parents()
        out = [node_id]
        while out[-1] != self.root_id:
            out.append(par[out[-1]])
        return out[::-1]

    def depth(self, node_id: int) -> int:
        return len(self.path(node_id)) - 1

    def postorder(self) -> list[int]:
        out: list[int] = []
        stack = [(self.root_id, False)]
        while stack:
            n, done = stack.pop()
            if done:
                out.append(n)
                continue
            stack.append((n, True))
            for c in reversed(self.nodes[n].children):
                stack.append((c, False))
        return out

    def display_name(self, node_id: int) -> str:
        node = self.nodes[node_id]
        if node.kind == "leaf":
            return node.label
        return node.name or f"node-{node_id}"

    def to_json(self) -> dict:
        nodes = []
        for n in sorted(self.nodes):
            node = self.nodes[n]
            d = {"node_id": n, "kind": node.kind, "children": list(node.children)}
            if node.label is not None:
                d["label"] = node.label
            if node.name is not None:
                d["name"] = node.name
            nodes.append(d)
        return {"version": TREE_VERSION, "root_id": self.root_id, "nodes": nodes}

    @classmethod
    def from_json(cls, doc: dict) -> "Tree":
        if doc.get("version") != TREE_VERSION:
            raise TreeError(f"unsupported tree version {doc.get('version')!r}")
        nodes = {}
        for d in doc["nodes"]:
            n = int(d["node_id"])
            if n in nodes:
                raise TreeError(f"duplicate node_id {n}")
            nodes[n] = TreeNode(n, d["kind"], tuple(int(c) for c in d.get("children", [])),
                                d.get("label"), d.get("name"))
        M = sum(1 for node in nodes.values() if node.kind == "leaf")
        return cls(nodes, int(doc["root_id"]), M)


def validate(tree: Tree) -> None:
    nodes = tree.nodes
    if tree.root_id not in nodes:
        raise TreeError(f"root {tree.root_id} is not a node")
    parent: dict[int, int] = {}
    for n, node in nodes.items():
        if node.node_id != n:
            raise TreeError(f"node key {n} != node_id {node.node_id}")
        if node.kind not in ("leaf", "inner", "root"):
            raise TreeError(f"node {n}: unknown kind {node.kind!r}")
        if node.kind == "leaf":
            if node.children:
                raise TreeError(f"leaf {n} has children")
            if not node.label:
                raise TreeError(f"leaf {n} has no behavior label")
        elif len(node.children) != 2:
            raise TreeError(f"node {n} has {len(node.children)} children; inner nodes must be binary")
        for c in node.children:
            if c not in nodes:
                raise TreeError(f"node {n} lists unknown child {c}")
            if c in parent:
                raise TreeError(f"node {c} has two parents ({parent[c]} and {n})")
            parent[c] = n
    roots = [n for n in nodes if n not in parent]
    if roots != [tree.root_id]:
        raise TreeError(f"expected the single parentless node {tree.root_id}, found {sorted(roots)}")
    if nodes[tree.root_id].kind != "root" and len(nodes) > 1:
        raise TreeError(f"root {tree.root_id} must have kind 'root'")
    for n, node in nodes.items():
        if node.kind == "root" and n != tree.root_id:
            raise TreeError(f"node {n} has kind 'root' but is not the root")
    seen, stack = set(), [tree.root_id]
    while stack:
        n = stack.pop()
        if n in seen:
            raise TreeError("cycle detected")
        seen.add(n)
        stack.extend(nodes[n].children)
    if seen != set(nodes):
        raise TreeError(f"nodes {sorted(set(nodes) - seen)} are unreachable from the root (cycle)")
    leaves = [n for n, node in nodes.items() if node.kind == "leaf"]
    if len(leaves) != tree.M:
        raise TreeError(f"tree declares M={tree.M} but has {len(leaves)} leaves")
    labels = [nodes[n].label for n in leaves]
    if len(set(labels)) != len(labels):
        raise TreeError("leaf labels must be unique")
    if len(nodes) - len(leaves) != tree.M - 1:
        raise TreeError("a binary tree over M leaves needs exactly M-1 inner nodes")


def _linkage_distance(D: np.ndarray, a: list[int], b: list[int], linkage: str) -> float:
    block = D[np.ix_(a, b)]
    if linkage == "average":
        return float(block.mean())
    if linkage == "single":
        return float(block.min())
    return float(block.max())


def cluster_merges(points: np.ndarray, linkage: str = "average") -> list[tuple[int, int, float]]:
    """Agglomerative merge sequence as ``(id_a, id_b, distance)`` with ``id_a < id_b``.

    Singletons carry ids ``0..M-1``; the k-th merge creates id ``M+k``. Ties go
    to the lexicographically smallest id pair.
    """
    if linkage not in LINKAGES:
        raise ValueError(f"linkage must be one of {LINKAGES}")
    M = len(points)
    diff = points[:, None, :] - points[None, :, :]
    D = np.sqrt((diff ** 2).sum(-1))
    members = {i: [i] for i in range(M)}
    merges = []
    for k in range(M - 1):
        best = None
        ids = sorted(members)
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                d = _linkage_distance(D, members[a], members[b], linkage)
                if best is None or d < best[2]:
                    best = (a, b, d)
        a, b, d = best
        members[M + k] = members.pop(a) + members.pop(b)
        merges.append((a, b, d))
    return merges


def build_tree(embeddings: Sequence[TextEmbedding], linkage: str = "average") -> Tree:
    if len(embeddings) < 2:
        raise ValueError("need at least 2 behavior embeddings to build a tree")
    widths = {e.vector.shape for e in embeddings}
    if len(widths) != 1:
        raise ValueError("embeddings must share one width")
    M = len(embeddings)
    points = np.stack([e.vector for e in embeddings])
    nodes = {i: TreeNode(i, "leaf", (), e.label) for i, e in enumerate(embeddings)}
    merges = cluster_merges(points, linkage)
    for k, (a, b, _) in enumerate(merges):
        kind = "root" if k == M - 2 else "inner"
        nodes[M + k] = TreeNode(M + k, kind, (a, b))
    return Tree(nodes, 2 * M - 2, M)


def save_tree(tree: Tree, path: str | Path) -> None:
    Path(path).write_text(json.dumps(tree.to_json(), indent=1) + "\n")


def load_tree(path: str | Path) -> Tree:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise TreeError(f"{path}: {exc.msg}") from None
    return Tree.from_json(doc)


def annotate_node(tree: Tree, node_id: int, name: str) -> Tree:
    """Return a copy of ``tree`` with ``name`` attached to an inner or root node."""
    if node_id not in tree.nodes:
        raise TreeError(f"unknown node {node_id}")
    node = tree.nodes[node_id]
    if node.kind == "leaf":
        raise TreeError(f"node {node_id} is a leaf; its behavior label cannot be renamed")
    if not name:
        raise TreeError("name must be non-empty")
    nodes = dict(tree.nodes)
    nodes[node_id] = replace(node, name=name)
    return Tree(nodes, tree.root_id, tree.M)


def tree_depth(tree: Tree) -> int:
    return max(tree.depth(n) for n in tree.leaf_ids)


def balanced_tree(labels: Sequence[str]) -> Tree:
    """Binary tree over ``labels`` whose leaf depths differ by at most one.

    Leaves keep ids ``0..M-1``; inner nodes are numbered as they are closed,
    so the root is ``2M-2`` as in ``build_tree``.
    """
    M = len(labels)
    if M < 2:
        raise ValueError("need at least 2 labels")
    nodes = {i: TreeNode(i, "leaf", (), lab) for i, lab in enumerate(labels)}
    next_id = [M]

    def grow(lo: int, hi: int) -> int:
        if hi - lo == 1:
            return lo
        mid = (lo + hi + 1) // 2
        left, right = grow(lo, mid), grow(mid, hi)
        n = next_id[0]
        next_id[0] += 1
        nodes[n] = TreeNode(n, "inner", (left, right))
        return n

    root = grow(0, M)
    nodes[root] = replace(nodes[root], kind="root")
    return Tree(nodes, root, M)

"""Memory-implanted neural decision tree head.

Each leaf owns a two-layer transform ``H``. A leaf scores an instance
embedding by ``rho * cos(H(g), H(e_k))`` aggregated over its stored
prototypes ``e_k``; inner nodes take the mean of their children's scores.
Leaf probabilities are products of per-node softmaxes along root-to-leaf
paths, trained with negative log-likelihood on the ground-truth leaf.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, EdgePolicy, Instance, InteractionGraph
from .encoder import EncoderParams, embed, embed_instance
from .layers import Adam, GradCheckResult, NumericError, check_gradients, log_softmax
from .memory import LeafMemoryBank, MemoryBankSet, MemoryPrototype
from .tree import Tree, TreeError

log = logging.getLogger(__name__)

MODEL_VERSION = "emem-ndt/v1"
AGGREGATIONS = ("max", "mean")
_NORM_EPS = 1e-12


@dataclass(frozen=True)
class NdtTrainConfig:
    epochs: int = 5
    lr: float = 5e-5
    weight_decay: float = 1e-6
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0 or self.weight_decay < 0:
            raise ValueError("epochs, batch_size and lr must be positive; weight_decay >= 0")


def transform_prefix(leaf_id: int, shared: bool) -> str:
    return "shared." if shared else f"leaf{leaf_id}."


def init_transforms(leaf_ids: Sequence[int], d_in: int, hidden: int = 64, out: int = 32,
                    seed: int = 0, shared: bool = False, gain: float = 0.01) -> dict[str, np.ndarray]:
    """Identical per-leaf transforms that start close to a constant map.

    W1 is uniform in +-1/sqrt(d_in), W2 uniform in +-gain/sqrt(hidden), b1 is
    zero and b2 is the unit vector along the all-ones direction. Every output
    is then near b2, all cosines are near 1 and each node splits its mass
    roughly evenly between its children. ``gain=0`` gives the exact constant
    map, which is a stationary point of the loss, so keep it small but nonzero.
    """
    if gain < 0:
        raise ValueError("gain must be >= 0")
    rng = np.random.default_rng(seed)
    b1, b2 = 1.0 / math.sqrt(d_in), gain / math.sqrt(hidden)
    W1 = rng.uniform(-b1, b1, size=(d_in, hidden))
    W2 = rng.uniform(-b2, b2, size=(hidden, out))
    params = {}
    for leaf in ([None] if shared else leaf_ids):
        p = "shared." if shared else f"leaf{leaf}."
        params[p + "W1"] = W1.copy()
        params[p + "b1"] = np.zeros(hidden)
        params[p + "W2"] = W2.copy()
        params[p + "b2"] = np.full(out, 1.0 / math.sqrt(out))
    return params


@dataclass
class EMemNdtModel:
    tree: Tree
    banks: MemoryBankSet
    params: dict[str, np.ndarray]
    rho: float = 30.0
    aggregation: str = "max"
    shared_transform: bool = False
    encoder_hash: str = ""

    def __post_init__(self):
        if not self.rho > 1:
            raise ValueError(f"rho must be > 1, got {self.rho}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        for leaf in self.tree.leaf_ids:
            if leaf not in self.banks.banks:
                raise ValueError(f"leaf {leaf} has no memory bank")
            p = transform_prefix(leaf, self.shared_transform)
            for k in ("W1", "b1", "W2", "b2"):
                if p + k not in self.params:
                    raise ValueError(f"missing transform parameter {p + k}")
        for name, arr in self.params.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"transform parameter {name} has non-finite entries")

    @classmethod
    def create(cls, tree: Tree, banks: MemoryBankSet, rho: float = 30.0, aggregation: str = "max",
               hidden: int = 64, out: int = 32, seed: int = 0, shared_transform: bool = False,
               encoder_hash: str = "", init_gain: float = 0.01) -> "EMemNdtModel":
        d_in = next(iter(banks.banks.values())).prototypes[0].feature.shape[0]
        params = init_transforms(tree.leaf_ids, d_in, hidden, out, seed, shared_transform, init_gain)
        return cls(tree, banks, params, rho, aggregation, shared_transform, encoder_hash)

    @property
    def labels(self) -> list[str]:
        return self.tree.leaf_labels

    def prefix(self, leaf_id: int) -> str:
        return transform_prefix(leaf_id, self.shared_transform)

    def transform(self, leaf_id: int, A: np.ndarray) -> np.ndarray:
        p = self.prefix(leaf_id)
        h = np.tanh(A @ self.params[p + "W1"] + self.params[p + "b1"])
        return h @ self.params[p + "W2"] + self.params[p + "b2"]


# --------------------------------------------------------------- containers

@dataclass
class NodeScores:
    gamma: dict[int, float]
    best_index: dict[int, int] = field(default_factory=dict)


@dataclass
class LeafDistribution:
    s: dict[int, float]
    child_probs: dict[int, dict[int, float]] = field(default_factory=dict)

    def vector(self) -> np.ndarray:
        return np.array([self.s[k] for k in sorted(self.s)])


@dataclass
class MatchedPrototype:
    leaf_id: int
    index: int
    instance_id: str
    label: str
    similarity: float  # rho * cosine in the leaf's transformed space
    instance: Instance
    graphs: list[InteractionGraph]


@dataclass
class ExplanationTrace:
    instance_id: str
    predicted_label: str
    path: list[int]
    path_names: list[str]
    path_probs: list[dict[int, float]]  # child distribution at each non-leaf path node
    leaf_probability: float
    prototype: MatchedPrototype

    def to_json(self) -> dict:
        p = self.prototype
        return {
            "instance_id": self.instance_id,
            "predicted_label": self.predicted_label,
            "leaf_probability": self.leaf_probability,
            "path": [{"node_id": n, "name": name} for n, name in zip(self.path, self.path_names)],
            "child_probabilities": [
                {"node_id": n, "children": {str(c): pr for c, pr in probs.items()}}
                for n, probs in zip(self.path[:-1], self.path_probs)
            ],
            "prototype": {
                "leaf_id": p.leaf_id,
                "index": p.index,
                "instance_id": p.instance_id,
                "label": p.label,
                "similarity": p.similarity,
                "instance": p.instance.to_dict(),
                "graphs": [[list(e) for e in g.edges] for g in p.graphs],
            },
        }


# ------------------------------------------------------------------ forward

@dataclass
class _LeafCache:
    G: np.ndarray
    E: np.ndarray
    hg: np.ndarray
    he: np.ndarray
    Hg: np.ndarray
    He: np.ndarray
    ng: np.ndarray
    ne: np.ndarray
    C: np.ndarray
    best: np.ndarray


def _leaf_forward(model: EMemNdtModel, leaf: int, G: np.ndarray) -> tuple[np.ndarray, _LeafCache]:
    p = model.prefix(leaf)
    W1, b1, W2, b2 = (model.params[p + k] for k in ("W1", "b1", "W2", "b2"))
    E = model.banks.banks[leaf].features
    hg = np.tanh(G @ W1 + b1)
    he = np.tanh(E @ W1 + b1)
    Hg = hg @ W2 + b2
    He = he @ W2 + b2
    ng = np.linalg.norm(Hg, axis=1)
    ne = np.linalg.norm(He, axis=1)
    if (ng < _NORM_EPS).any() or (ne < _NORM_EPS).any():
        raise NumericError(f"leaf {leaf}: transformed feature has numerically zero norm")
    C = (Hg / ng[:, None]) @ (He / ne[:, None]).T
    best = np.argmax(C, axis=1)  # first index on ties
    if model.aggregation == "max":
        gamma = model.rho * C[np.arange(len(G)), best]
    else:
        gamma = model.rho * C.mean(axis=1)
    return gamma, _LeafCache(G, E, hg, he, Hg, He, ng, ne, C, best)


def _leaf_backward(model: EMemNdtModel, leaf: int, d_gamma: np.ndarray, c: _LeafCache,
                   grads: dict[str, np.ndarray]) -> None:
    p = model.prefix(leaf)
    W2 = model.params[p + "W2"]
    B, K = c.C.shape
    dC = np.zeros_like(c.C)
    if model.aggregation == "max":
        dC[np.arange(B), c.best] = model.rho * d_gamma
    else:
        dC[:] = (model.rho / K) * d_gamma[:, None]
    ug, ue = c.Hg / c.ng[:, None], c.He / c.ne[:, None]
    dug = dC @ ue
    due = dC.T @ ug
    dHg = (dug - ug * (ug * dug).sum(1, keepdims=True)) / c.ng[:, None]
    dHe = (due - ue * (ue * due).sum(1, keepdims=True)) / c.ne[:, None]
    for A, h, dH in ((c.G, c.hg, dHg), (c.E, c.he, dHe)):
        grads[p + "W2"] += h.T @ dH
        grads[p + "b2"] += dH.sum(0)
        dpre = (dH @ W2.T) * (1.0 - h ** 2)
        grads[p + "W1"] += A.T @ dpre
        grads[p + "b1"] += dpre.sum(0)


@dataclass
class BatchScores:
    node_ids: list[int]
    gamma: np.ndarray  # (B, n_nodes) columns ordered like node_ids
    log_probs: dict[int, np.ndarray]  # node -> (B,) log path probability
    child_probs: dict[int, np.ndarray]  # inner node -> (B, n_children)
    leaf_cache: dict[int, _LeafCache]

    def col(self, node_id: int) -> int:
        return self.node_ids.index(node_id)

    def leaf_log_probs(self, leaf_ids: Sequence[int]) -> np.ndarray:
        return np.stack([self.log_probs[n] for n in leaf_ids], axis=1)

    def best_index(self, leaf: int) -> np.ndarray:
        return self.leaf_cache[leaf].best


def mpm_batch(model: EMemNdtModel, G: np.ndarray) -> tuple[dict[int, np.ndarray], dict[int, _LeafCache]]:
    """Bottom-up scores for every node: leaves by prototype similarity, parents by the mean of children."""
    tree = model.tree
    gamma: dict[int, np.ndarray] = {}
    caches = {}
    for n in tree.postorder():
        node = tree.nodes[n]
        if node.kind == "leaf":
            gamma[n], caches[n] = _leaf_forward(model, n, G)
        else:
            if len(node.children) < 2:
                raise TreeError(f"node {n} has a single child")
            gamma[n] = np.mean([gamma[c] for c in node.children], axis=0)
    return gamma, caches


def lla_batch(tree: Tree, gamma: dict[int, np.ndarray]) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Top-down log path probabilities from per-node softmaxes over children's scores."""
    B = len(next(iter(gamma.values())))
    log_probs = {tree.root_id: np.zeros(B)}
    child_probs = {}
    for n in reversed(tree.postorder()):
        node = tree.nodes[n]
        if node.kind == "leaf":
            continue
        z = np.stack([gamma[c] for c in node.children], axis=1)
        ls = log_softmax(z, axis=1)
        child_probs[n] = np.exp(ls)
        for j, c in enumerate(node.children):
            log_probs[c] = log_probs[n] + ls[:, j]
    return log_probs, child_probs


def score_batch(model: EMemNdtModel, G: np.ndarray) -> BatchScores:
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    gamma, caches = mpm_batch(model, G)
    log_probs, child_probs = lla_batch(model.tree, gamma)
    ids = sorted(gamma)
    return BatchScores(ids, np.stack([gamma[n] for n in ids], axis=1), log_probs, child_probs, caches)


def leaf_probabilities(model: EMemNdtModel, G: np.ndarray) -> np.ndarray:
    """``(B, M)`` leaf distribution, columns in leaf-id order."""
    sc = score_batch(model, G)
    return np.exp(sc.leaf_log_probs(model.tree.leaf_ids))


def loss_and_grads(model: EMemNdtModel, G: np.ndarray,
                   targets: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean NLL of the ground-truth leaves (``targets`` are leaf node ids) and its gradient."""
    tree = model.tree
    G = np.atleast_2d(G)
    B = len(G)
    gamma, caches = mpm_batch(model, G)
    log_probs, child_probs = lla_batch(tree, gamma)
    leaf_ids = tree.leaf_ids
    LP = np.stack([log_probs[n] for n in leaf_ids], axis=1)
    col = {n: j for j, n in enumerate(leaf_ids)}
    tcols = np.array([col[int(t)] for t in targets])
    loss = -float(LP[np.arange(B), tcols].mean())

    d_lp = {n: np.zeros(B) for n in tree.nodes}
    for j, n in enumerate(leaf_ids):
        d_lp[n] = -(tcols == j).astype(np.float64) / B
    d_gamma = {n: np.zeros(B) for n in tree.nodes}
    for n in tree.postorder():
        node = tree.nodes[n]
        if node.kind == "leaf":
            continue
        S = sum(d_lp[c] for c in node.children)
        d_lp[n] += S
        P = child_probs[n]
        for j, c in enumerate(node.children):
            d_gamma[c] += d_lp[c] - P[:, j] * S
    for n in reversed(tree.postorder()):
        node = tree.nodes[n]
        if node.kind != "leaf":
            share = d_gamma[n] / len(node.children)
            for c in node.children:
                d_gamma[c] += share
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    for n in leaf_ids:
        _leaf_backward(model, n, d_gamma[n], caches[n], grads)
    return loss, grads


def ndt_loss(G: np.ndarray, targets: Sequence[int], model: EMemNdtModel) -> float:
    loss = loss_and_grads(model, np.atleast_2d(G), np.asarray(targets))[0]
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    return loss


def nll_from_probs(probs: np.ndarray, targets: Sequence[int]) -> float:
    """Mean ``-log s[target]`` for rows of leaf probabilities (targets are column indices)."""
    probs = np.atleast_2d(probs)
    return float(-np.mean(np.log(probs[np.arange(len(probs)), np.asarray(targets)])))


# ------------------------------------------------------- single-instance API

def leaf_similarity(g: np.ndarray, leaf_id: int, model: EMemNdtModel) -> tuple[float, int]:
    gamma, cache = _leaf_forward(model, leaf_id, np.atleast_2d(g))
    return float(gamma[0]), int(cache.best[0])


def mpm(g: np.ndarray, model: EMemNdtModel) -> NodeScores:
    gamma, caches = mpm_batch(model, np.atleast_2d(g))
    return NodeScores({n: float(v[0]) for n, v in gamma.items()},
                      {n: int(c.best[0]) for n, c in caches.items()})


def lla(scores: NodeScores, model: EMemNdtModel | Tree) -> LeafDistribution:
    tree = model.tree if isinstance(model, EMemNdtModel) else model
    missing = set(tree.nodes) - set(scores.gamma)
    if missing:
        raise ValueError(f"scores missing for nodes {sorted(missing)}")
    gamma = {n: np.array([v]) for n, v in scores.gamma.items()}
    log_probs, child_probs = lla_batch(tree, gamma)
    s = {n: float(np.exp(log_probs[n][0])) for n in tree.leaf_ids}
    cp = {n: {c: float(p) for c, p in zip(tree.nodes[n].children, child_probs[n][0])}
          for n in child_probs}
    return LeafDistribution(s, cp)


def argmax_leaf(dist: LeafDistribution) -> int:
    """Most probable leaf; exact ties go to the smallest node id."""
    return max(sorted(dist.s), key=lambda n: (dist.s[n], -n))


def predict(g: np.ndarray, model: EMemNdtModel) -> tuple[str, LeafDistribution]:
    dist = lla(mpm(g, model), model)
    return model.tree.nodes[argmax_leaf(dist)].label, dist


def predict_batch(model: EMemNdtModel, G: np.ndarray, track_usage: bool = False) -> tuple[list[str], np.ndarray]:
    """Labels and ``(B, M)`` leaf probabilities for a batch of embeddings."""
    sc = score_batch(model, G)
    leaf_ids = model.tree.leaf_ids
    P = np.exp(sc.leaf_log_probs(leaf_ids))
    winners = np.argmax(P, axis=1)
    labels = [model.tree.nodes[leaf_ids[w]].label for w in winners]
    if track_usage:
        for b, w in enumerate(winners):
            leaf = leaf_ids[w]
            model.banks.banks[leaf].usage_counts[int(sc.best_index(leaf)[b])] += 1
    return labels, P


def explain_embedding(g: np.ndarray, model: EMemNdtModel, instance_id: str = "",
                      track_usage: bool = False) -> ExplanationTrace:
    scores = mpm(g, model)
    dist = lla(scores, model)
    leaf = argmax_leaf(dist)
    tree = model.tree
    path = tree.path(leaf)
    k = scores.best_index[leaf]
    bank = model.banks.banks[leaf]
    proto = bank.prototypes[k]
    # the matched prototype's own similarity, independent of the aggregation mode
    sim = model.rho * float(_leaf_forward(model, leaf, np.atleast_2d(g))[1].C[0, k])
    if track_usage:
        bank.usage_counts[k] += 1
    return ExplanationTrace(
        instance_id=instance_id,
        predicted_label=tree.nodes[leaf].label,
        path=path,
        path_names=[tree.display_name(n) for n in path],
        path_probs=[dist.child_probs[n] for n in path[:-1]],
        leaf_probability=dist.s[leaf],
        prototype=MatchedPrototype(leaf, k, proto.instance_id, proto.label, sim, proto.instance,
                                   proto.graphs),
    )


def explain(instance: Instance, encoder: EncoderParams, model: EMemNdtModel,
            edge_policy: EdgePolicy | None = None, track_usage: bool = False) -> ExplanationTrace:
    g = embed_instance(encoder, instance, edge_policy).g
    return explain_embedding(g, model, instance.instance_id, track_usage)


# ----------------------------------------------------------------- training

def train_ndt(model: EMemNdtModel, train: Dataset, encoder: EncoderParams | None,
              config: NdtTrainConfig, edge_policy: EdgePolicy | None = None,
              features: np.ndarray | None = None,
              history: list[float] | None = None) -> EMemNdtModel:
    """Fit the leaf transforms with the encoder (and stored features) frozen.

    Returns a new model; the input model is left untouched.
    """
    model = copy.deepcopy(model)
    if features is None:
        features = embed(encoder, train.instances, edge_policy)
    targets = np.array([model.tree.leaf_of(inst.label) for inst in train.instances])
    opt = Adam({k: config.lr for k in model.params}, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    n = len(train)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            loss, grads = loss_and_grads(model, features[idx], targets[idx])
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericError(f"epoch {epoch}, batch {b}: non-finite loss or gradient")
            opt.step(model.params, grads)
            total += loss * len(idx)
        if history is not None:
            history.append(total / n)
        log.info("ndt epoch %d/%d loss %.4f", epoch + 1, config.epochs, total / n)
    return model


def grad_check(model: EMemNdtModel, G: np.ndarray, targets: Sequence[int], epsilon: float = 1e-5,
               n_coords: int = 100, seed: int = 0) -> GradCheckResult:
    """Finite-difference check of the NLL gradient over the leaf-transform parameters."""
    work = copy.deepcopy(model)
    G = np.atleast_2d(G)
    targets = np.asarray(targets)
    _, analytic = loss_and_grads(work, G, targets)
    return check_gradients(lambda: loss_and_grads(work, G, targets)[0], work.params, analytic,
                           epsilon, n_coords, seed)


# --------------------------------------------------------------- model file

def _graphs_to_json(graphs: Sequence[InteractionGraph]) -> list[list[list[int]]]:
    return [[list(e) for e in g.edges] for g in graphs]


def _graphs_from_json(instance: Instance, doc) -> list[InteractionGraph]:
    if len(doc) != instance.T:
        raise ValueError(f"prototype {instance.instance_id!r}: {len(doc)} graphs for {instance.T} frames")
    return [InteractionGraph(fr.agents, tuple((int(a), int(b)) for a, b in edges), fr.target_uid)
            for fr, edges in zip(instance.frames, doc)]


def model_to_json(model: EMemNdtModel) -> dict:
    banks = []
    for leaf, bank in sorted(model.banks.banks.items()):
        banks.append({
            "leaf_id": leaf,
            "label": bank.label,
            "eta": bank.eta,
            "usage_counts": list(bank.usage_counts),
            "prototypes": [
                {"instance_id": p.instance_id, "feature": p.feature.tolist(),
                 "instance": p.instance.to_dict(), "graphs": _graphs_to_json(p.graphs)}
                for p in bank.prototypes
            ],
        })
    return {
        "version": MODEL_VERSION,
        "rho": model.rho,
        "aggregation": model.aggregation,
        "shared_transform": model.shared_transform,
        "encoder_hash": model.encoder_hash,
        "tree": model.tree.to_json(),
        "banks": banks,
        "transforms": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                       for k, v in sorted(model.params.items())},
    }


def model_from_json(doc: dict) -> EMemNdtModel:
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {doc.get('version')!r}, expected {MODEL_VERSION!r}")
    tree = Tree.from_json(doc["tree"])
    banks = {}
    for bd in doc["banks"]:
        protos = []
        for pd in bd["prototypes"]:
            inst = Instance.from_dict(pd["instance"])
            if inst.instance_id != pd["instance_id"]:
                raise ValueError(f"prototype id {pd['instance_id']!r} does not match its instance")
            protos.append(MemoryPrototype(np.asarray(pd["feature"], dtype=np.float64), inst,
                                          _graphs_from_json(inst, pd["graphs"])))
        leaf = int(bd["leaf_id"])
        if leaf not in tree.nodes or tree.nodes[leaf].kind != "leaf":
            raise ValueError(f"bank attached to non-leaf node {leaf}")
        if tree.nodes[leaf].label != bd["label"]:
            raise ValueError(f"bank label {bd['label']!r} does not match leaf {leaf}")
        banks[leaf] = LeafMemoryBank(leaf, bd["label"], float(bd["eta"]), protos,
                                     [int(c) for c in bd["usage_counts"]])
    params = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
              for k, v in doc["transforms"].items()}
    return EMemNdtModel(tree, MemoryBankSet(banks), params, float(doc["rho"]), doc["aggregation"],
                        bool(doc["shared_transform"]), doc.get("encoder_hash", ""))


def dumps_model(model: EMemNdtModel) -> str:
    return json.dumps(model_to_json(model), separators=(",", ":"))


def save_model(model: EMemNdtModel, path: str | Path) -> None:
    Path(path).write_text(dumps_model(model) + "\n")


def load_model(path: str | Path) -> EMemNdtModel:
    return model_from_json(json.loads(Path(path).read_text()))

"""Per-leaf episodic memory banks built by leaf-node memory filtering."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, EdgePolicy, Instance, InteractionGraph, build_interaction_graphs
from .encoder import EncoderParams, embed
from .tree import Tree


def unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if not n > 0:
        raise ValueError("cannot normalize a zero-norm feature")
    return v / n


def filter_stream(features: np.ndarray, eta: float) -> list[int]:
    """Indices admitted by the similarity filter, in stream order.

    The first feature is always admitted; later ones only when their largest
    cosine similarity against everything already admitted is ``<= eta``.
    Rounding can push the dot product of parallel unit vectors just above 1,
    so it is clipped there and ``eta = 1`` admits everything.
    """
    if not -1.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [-1, 1], got {eta}")
    admitted: list[int] = []
    units: list[np.ndarray] = []
    for i, f in enumerate(features):
        u = unit(np.asarray(f, dtype=np.float64))
        if units:
            v_max = -1.0
            for e in units:
                v = min(float(np.dot(e, u)), 1.0)
                if v >= v_max:
                    v_max = v
            if v_max > eta:
                continue
        admitted.append(i)
        units.append(u)
    return admitted


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity computed exactly as the admission filter does."""
    v = float(np.dot(unit(np.asarray(a, dtype=np.float64)), unit(np.asarray(b, dtype=np.float64))))
    return max(min(v, 1.0), -1.0)


@dataclass
class MemoryPrototype:
    feature: np.ndarray
    instance: Instance
    graphs: list[InteractionGraph]

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.float64)
        if not np.all(np.isfinite(self.feature)) or not np.linalg.norm(self.feature) > 0:
            raise ValueError(f"prototype {self.instance.instance_id!r}: feature must be finite and nonzero")

    @property
    def instance_id(self) -> str:
        return self.instance.instance_id

    @property
    def label(self) -> str:
        return self.instance.label


@dataclass
class LeafMemoryBank:
    leaf_id: int
    label: str
    eta: float
    prototypes: list[MemoryPrototype]
    usage_counts: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.prototypes:
            raise ValueError(f"leaf {self.leaf_id} ({self.label!r}) has an empty memory bank")
        if not self.usage_counts:
            self.usage_counts = [0] * len(self.prototypes)
        if len(self.usage_counts) != len(self.prototypes):
            raise ValueError(f"leaf {self.leaf_id}: usage_counts length differs from bank size")
        if any(c < 0 for c in self.usage_counts):
            raise ValueError(f"leaf {self.leaf_id}: negative usage count")

    @property
    def K(self) -> int:
        return len(self.prototypes)

    @property
    def features(self) -> np.ndarray:
        return np.stack([p.feature for p in self.prototypes])

    def reset_usage(self) -> None:
        self.usage_counts = [0] * self.K


@dataclass
class MemoryBankSet:
    banks: dict[int, LeafMemoryBank]

    @property
    def sizes(self) -> dict[int, int]:
        return {leaf: bank.K for leaf, bank in sorted(self.banks.items())}

    @property
    def total(self) -> int:
        return sum(b.K for b in self.banks.values())

    def reset_usage(self) -> None:
        for bank in self.banks.values():
            bank.reset_usage()


def implant(train: Dataset, encoder: EncoderParams, tree: Tree, eta: float,
            edge_policy: EdgePolicy | None = None,
            features: np.ndarray | None = None) -> MemoryBankSet:
    """Route every training instance to its label's leaf and filter it into that leaf's bank.

    ``features`` may carry precomputed encoder embeddings (one row per instance).
    """
    if not -1.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [-1, 1], got {eta}")
    leaf_for = {tree.nodes[n].label: n for n in tree.leaf_ids}
    for inst in train.instances:
        if inst.label not in leaf_for:
            raise ValueError(f"instance {inst.instance_id!r}: label {inst.label!r} has no leaf")
    if features is None:
        features = embed(encoder, train.instances, edge_policy)
    by_leaf: dict[int, list[int]] = {n: [] for n in tree.leaf_ids}
    for i, inst in enumerate(train.instances):
        by_leaf[leaf_for[inst.label]].append(i)
    empty = [tree.nodes[n].label for n, idx in by_leaf.items() if not idx]
    if empty:
        raise ValueError(f"no training instances for labels {empty}; every leaf needs a prototype")
    banks = {}
    for leaf, idx in by_leaf.items():
        kept = filter_stream(features[idx], eta)
        protos = []
        for k in kept:
            inst = train.instances[idx[k]]
            protos.append(MemoryPrototype(features[idx[k]].copy(), inst,
                                          build_interaction_graphs(inst, edge_policy)))
        banks[leaf] = LeafMemoryBank(leaf, tree.nodes[leaf].label, eta, protos)
    return MemoryBankSet(banks)


@dataclass(frozen=True)
class BankStats:
    leaf_id: int
    label: str
    K: int
    mean_pairwise_cosine: float | None  # None when the bank holds a single prototype


def bank_stats(banks: MemoryBankSet) -> tuple[list[BankStats], int]:
    """Per-leaf size and mean pairwise cosine, plus the total bank size."""
    rows = []
    for leaf, bank in sorted(banks.banks.items()):
        mean = None
        if bank.K > 1:
            U = np.stack([unit(p.feature) for p in bank.prototypes])
            C = U @ U.T
            iu = np.triu_indices(bank.K, 1)
            mean = float(C[iu].mean())
        rows.append(BankStats(leaf, bank.label, bank.K, mean))
    return rows, banks.total


def utilization_entropy(counts: Sequence[int] | LeafMemoryBank) -> float:
    """Entropy (nats) of a bank's prototype usage frequencies."""
    if isinstance(counts, LeafMemoryBank):
        counts = counts.usage_counts
    c = np.asarray(counts, dtype=np.float64)
    total = c.sum()
    if not total > 0:
        raise ValueError("no prototype usage recorded")
    p = c[c > 0] / total
    return float(-(p * np.log(p)).sum()) + 0.0


def max_entropy(K: int) -> float:
    return math.log(K) if K > 0 else 0.0

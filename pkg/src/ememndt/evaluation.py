"""Confusion matrices, precision/recall/F1 reports, eta sweeps and usage summaries."""

from __future__ import annotations

import io
import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, EdgePolicy
from .encoder import EncoderParams, embed, predict_base
from .memory import implant, max_entropy, utilization_entropy
from .ndt import EMemNdtModel, NdtTrainConfig, predict_batch, train_ndt
from .tree import Tree

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    """Evaluation inputs are inconsistent with the taxonomy or model."""


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions, both in ``labels`` order."""

    labels: list[str]
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        M = len(self.labels)
        if self.counts.shape != (M, M):
            raise EvaluationError(f"counts must be {M}x{M}, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise EvaluationError("confusion counts must be nonnegative")

    @classmethod
    def from_predictions(cls, labels: Sequence[str], truth: Sequence[str],
                         predicted: Sequence[str]) -> "ConfusionMatrix":
        if len(truth) != len(predicted):
            raise EvaluationError(f"{len(truth)} ground-truth labels but {len(predicted)} predictions")
        index = {lab: i for i, lab in enumerate(labels)}
        counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
        for t, p in zip(truth, predicted):
            for lab in (t, p):
                if lab not in index:
                    raise EvaluationError(f"label {lab!r} is outside the taxonomy")
            counts[index[t], index[p]] += 1
        return cls(list(labels), counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.labels != other.labels:
            raise EvaluationError("cannot add confusion matrices over different label orders")
        return ConfusionMatrix(self.labels, self.counts + other.counts)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("truth\\predicted," + ",".join(self.labels) + "\n")
        for lab, row in zip(self.labels, self.counts):
            buf.write(lab + "," + ",".join(str(int(c)) for c in row) + "\n")
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"labels": list(self.labels), "counts": self.counts.tolist()}


@dataclass(frozen=True)
class ClassMetrics:
    label: str
    precision: float
    recall: float
    f1: float
    support: int


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


@dataclass
class MetricsReport:
    per_class: list[ClassMetrics]
    macro: dict[str, float]
    micro: dict[str, float]
    accuracy: float
    total: int
    excluded: list[str] = field(default_factory=list)  # zero-support labels left out of macro

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix) -> "MetricsReport":
        C = cm.counts.astype(np.float64)
        tp = np.diag(C)
        pred = C.sum(axis=0)
        true = C.sum(axis=1)
        rows = []
        for i, lab in enumerate(cm.labels):
            p, r = _ratio(tp[i], pred[i]), _ratio(tp[i], true[i])
            rows.append(ClassMetrics(lab, p, r, _f1(p, r), int(true[i])))
        kept = [row for row in rows if row.support > 0]
        excluded = [row.label for row in rows if row.support == 0]
        if excluded:
            warnings.warn(f"classes without test support left out of macro averages: {excluded}",
                          stacklevel=2)
        if kept:
            macro = {k: float(np.mean([getattr(row, k) for row in kept]))
                     for k in ("precision", "recall", "f1")}
        else:
            macro = {"precision": 0.0, "recall": 0.0, "f1": 0.0}
        # pooled counts; every instance is one true and one predicted label
        mp = _ratio(tp.sum(), pred.sum())
        mr = _ratio(tp.sum(), true.sum())
        micro = {"precision": mp, "recall": mr, "f1": _f1(mp, mr)}
        return cls(rows, macro, micro, _ratio(tp.sum(), C.sum()), cm.total, excluded)

    def row(self, label: str) -> ClassMetrics:
        for r in self.per_class:
            if r.label == label:
                return r
        raise KeyError(f"unknown label {label!r}")

    def to_json(self) -> dict:
        return {
            "per_class": [vars(r) for r in self.per_class],
            "macro": self.macro,
            "micro": self.micro,
            "accuracy": self.accuracy,
            "total": self.total,
            "excluded_from_macro": self.excluded,
        }

    def to_text(self) -> str:
        width = max([len(r.label) for r in self.per_class] + [len("micro avg")])
        lines = [f"{'label':<{width}}  precision  recall      f1  support"]
        for r in self.per_class:
            lines.append(f"{r.label:<{width}}  {r.precision:9.4f}  {r.recall:6.4f}  {r.f1:6.4f}  {r.support:7d}")
        for name, agg in (("macro avg", self.macro), ("micro avg", self.micro)):
            lines.append(f"{name:<{width}}  {agg['precision']:9.4f}  {agg['recall']:6.4f}  "
                         f"{agg['f1']:6.4f}  {self.total:7d}")
        lines.append(f"accuracy {self.accuracy:.4f} over {self.total} instances")
        return "\n".join(lines) + "\n"


def report_from_predictions(labels: Sequence[str], truth: Sequence[str],
                            predicted: Sequence[str]) -> tuple[ConfusionMatrix, MetricsReport]:
    cm = ConfusionMatrix.from_predictions(labels, truth, predicted)
    return cm, MetricsReport.from_confusion(cm)


def _check_test(test: Dataset, labels: Sequence[str]) -> None:
    if len(test) == 0:
        raise EvaluationError("test set is empty")
    known = set(labels)
    for inst in test.instances:
        if inst.label not in known:
            raise EvaluationError(f"instance {inst.instance_id!r}: label {inst.label!r} is outside the taxonomy")


def evaluate(model: EMemNdtModel, encoder: EncoderParams, test: Dataset,
             edge_policy: EdgePolicy | None = None, features: np.ndarray | None = None,
             track_usage: bool = False) -> tuple[ConfusionMatrix, MetricsReport]:
    """Predict every test instance with the tree and score it against the ground truth.

    Label order follows the test taxonomy. ``features`` may carry precomputed
    embeddings; ``track_usage`` adds this pass to the prototype usage counts.
    """
    labels = test.taxonomy.names
    _check_test(test, labels)
    missing = set(model.labels) - set(labels)
    if missing:
        raise EvaluationError(f"model leaves {sorted(missing)} are outside the test taxonomy")
    if features is None:
        features = embed(encoder, test.instances, edge_policy)
    predicted, _ = predict_batch(model, features, track_usage=track_usage)
    return report_from_predictions(labels, test.labels, predicted)


def evaluate_base(encoder: EncoderParams, test: Dataset,
                  edge_policy: EdgePolicy | None = None) -> tuple[ConfusionMatrix, MetricsReport]:
    """Same report for the encoder's own softmax head."""
    labels = test.taxonomy.names
    _check_test(test, labels)
    if encoder.config.M != len(labels):
        raise EvaluationError(f"encoder has {encoder.config.M} classes, taxonomy has {len(labels)}")
    predicted = predict_base(encoder, test.instances, labels, edge_policy)
    return report_from_predictions(labels, test.labels, predicted)


def few_shot_report(report: MetricsReport, few_shot_labels: Sequence[str]) -> list[ClassMetrics]:
    """Per-class rows for ``few_shot_labels``, in the order given."""
    known = {r.label: r for r in report.per_class}
    out = []
    for lab in few_shot_labels:
        if lab not in known:
            raise EvaluationError(f"unknown label {lab!r}")
        out.append(known[lab])
    return out


@dataclass(frozen=True)
class EtaRow:
    eta: float
    precision: float
    recall: float
    f1: float
    total_emb: int


def sweep_eta(train: Dataset, test: Dataset, encoder: EncoderParams, tree: Tree,
              etas: Sequence[float], ndt_config: NdtTrainConfig,
              edge_policy: EdgePolicy | None = None, rho: float = 30.0,
              aggregation: str = "max", hidden: int = 64, out: int = 32,
              init_gain: float = 0.01) -> list[EtaRow]:
    """Implant, train and evaluate once per threshold; rows carry macro metrics."""
    for eta in etas:
        if not -1.0 <= eta <= 1.0:
            raise ValueError(f"eta must lie in [-1, 1], got {eta}")
    G_train = embed(encoder, train.instances, edge_policy)
    G_test = embed(encoder, test.instances, edge_policy)
    rows = []
    for eta in etas:
        banks = implant(train, encoder, tree, eta, edge_policy, features=G_train)
        model = EMemNdtModel.create(tree, banks, rho, aggregation, hidden, out, ndt_config.seed,
                                    encoder_hash=encoder.content_hash(), init_gain=init_gain)
        model = train_ndt(model, train, encoder, ndt_config, edge_policy, features=G_train)
        _, rep = evaluate(model, encoder, test, edge_policy, features=G_test)
        rows.append(EtaRow(float(eta), rep.macro["precision"], rep.macro["recall"], rep.macro["f1"],
                           banks.total))
        log.info("eta %.3f: total EMB %d, macro F1 %.4f", eta, banks.total, rep.macro["f1"])
    return rows


def eta_table_text(rows: Sequence[EtaRow]) -> str:
    lines = ["   eta  precision  recall      f1  total_emb"]
    for r in rows:
        lines.append(f"{r.eta:6.3f}  {r.precision:9.4f}  {r.recall:6.4f}  {r.f1:6.4f}  {r.total_emb:9d}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class UtilizationRow:
    leaf_id: int
    label: str
    K: int
    uses: int
    entropy: float | None  # None when the leaf was never used
    max_entropy: float
    top: list[tuple[int, str, int]]  # (index, instance id, count), most used first
    zero_usage_fraction: float


def utilization_report(model: EMemNdtModel) -> list[UtilizationRow]:
    """Per-leaf prototype usage summary from the counts accumulated so far."""
    banks = model.banks.banks
    if sum(sum(b.usage_counts) for b in banks.values()) == 0:
        raise EvaluationError("no prototype usage recorded; run predict or explain with usage tracking")
    rows = []
    for leaf, bank in sorted(banks.items()):
        counts = bank.usage_counts
        uses = sum(counts)
        order = sorted(range(bank.K), key=lambda k: (-counts[k], k))[:3]
        top = [(k, bank.prototypes[k].instance_id, counts[k]) for k in order if counts[k] > 0]
        rows.append(UtilizationRow(
            leaf, bank.label, bank.K, uses,
            utilization_entropy(counts) if uses else None,
            max_entropy(bank.K), top,
            sum(1 for c in counts if c == 0) / bank.K,
        ))
    return rows


def utilization_to_json(rows: Sequence[UtilizationRow]) -> list[dict]:
    return [{
        "leaf_id": r.leaf_id, "label": r.label, "K": r.K, "uses": r.uses,
        "entropy": r.entropy, "max_entropy": r.max_entropy,
        "top": [{"index": k, "instance_id": i, "count": c} for k, i, c in r.top],
        "zero_usage_fraction": r.zero_usage_fraction,
    } for r in rows]


def utilization_text(rows: Sequence[UtilizationRow]) -> str:
    width = max(len(r.label) for r in rows)
    lines = [f"{'leaf':>4}  {'label':<{width}}  {'K':>4}  {'uses':>6}  entropy  zero-use  top"]
    for r in rows:
        ent = "-" if r.entropy is None else f"{r.entropy:.4f}"
        top = " ".join(f"{i}({c})" for _, i, c in r.top)
        lines.append(f"{r.leaf_id:>4}  {r.label:<{width}}  {r.K:>4}  {r.uses:>6}  {ent:>7}  "
                     f"{r.zero_usage_fraction:8.3f}  {top}")
    return "\n".join(lines) + "\n"


def dumps_report(cm: ConfusionMatrix, report: MetricsReport) -> str:
    """Canonical JSON for a confusion matrix plus its metrics."""
    return json.dumps({"confusion": cm.to_json(), "metrics": report.to_json()}, indent=1, sort_keys=True)

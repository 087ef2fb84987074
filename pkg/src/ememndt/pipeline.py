"""Run configuration and the end-to-end experiment steps shared by the CLI and scripts."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import BehaviorTaxonomy, Dataset, EdgePolicy, load_taxonomy, save_dataset, split
from .encoder import BaseTrainConfig, EncoderConfig, EncoderParams, embed, train_base
from .evaluation import ConfusionMatrix, MetricsReport, dumps_report, evaluate, evaluate_base
from .memory import implant
from .ndt import EMemNdtModel, NdtTrainConfig, save_model, train_ndt
from .synthetic import SyntheticConfig, generate_synthetic
from .tree import Tree, build_tree, embed_taxonomy, load_label_embeddings, save_tree

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ENCODER_KEYS = ("d_model", "n_heads", "n_layers", "d_graph", "d_ff", "class_emb_dim", "pe_dim",
                "coord_scale")
PATH_KEYS = ("data", "train", "test", "taxonomy", "label_embeddings", "encoder", "tree", "banks",
             "model", "report")


class ConfigError(ValueError):
    """A run configuration is malformed."""


def _only(d: dict, allowed, where: str) -> dict:
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    return d


@dataclass(frozen=True)
class RunConfig:
    """Everything one experiment needs besides the data itself.

    ``base`` and ``ndt`` inherit ``seed`` unless they set their own. Relative
    ``paths`` resolve against ``root`` (the config file's directory when loaded).
    """

    seed: int
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    encoder: dict = field(default_factory=dict)
    base: BaseTrainConfig = field(default_factory=BaseTrainConfig)
    ndt: NdtTrainConfig = field(default_factory=NdtTrainConfig)
    eta: float = 0.7
    rho: float = 30.0
    aggregation: str = "max"
    hidden: int = 64
    out: int = 32
    init_gain: float = 0.01
    shared_transform: bool = False
    linkage: str = "average"
    embedding_width: int = 256
    edge_policy: str = "complete"
    train_fraction: float = 0.8
    paths: dict = field(default_factory=dict)
    root: str = "."
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}, expected {SCHEMA_VERSION}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an integer")
        _only(self.encoder, ENCODER_KEYS, "encoder")
        _only(self.paths, PATH_KEYS, "paths")
        if not -1.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [-1, 1], got {self.eta}")
        if not self.rho > 1:
            raise ConfigError(f"rho must be > 1, got {self.rho}")
        EdgePolicy.parse(self.edge_policy)

    @property
    def policy(self) -> EdgePolicy:
        return EdgePolicy.parse(self.edge_policy)

    def encoder_config(self, T: int, M: int) -> EncoderConfig:
        return EncoderConfig(T=T, M=M, **self.encoder)

    def path(self, key: str) -> Path | None:
        if key not in self.paths:
            return None
        p = Path(self.paths[key])
        return p if p.is_absolute() else Path(self.root) / p

    def to_json(self) -> dict:
        d = {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "synthetic": asdict(self.synthetic),
            "encoder": dict(self.encoder),
            "base": asdict(self.base),
            "ndt": asdict(self.ndt),
            "paths": dict(self.paths),
        }
        for f in fields(self):
            if f.name not in d and f.name != "root":
                d[f.name] = getattr(self, f.name)
        d["synthetic"]["neighbor_range"] = list(self.synthetic.neighbor_range)
        return d

    @classmethod
    def from_json(cls, doc: dict, root: str | Path = ".") -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        names = {f.name for f in fields(cls)} - {"root"}
        _only(doc, names, "config")
        if "seed" not in doc:
            raise ConfigError("config needs a seed")
        if "schema_version" not in doc:
            raise ConfigError("config needs a schema_version")
        d = dict(doc)
        seed = d["seed"]
        try:
            d["synthetic"] = SyntheticConfig.from_dict(d.get("synthetic", {}))
            d["base"] = BaseTrainConfig(**{"seed": seed, **d.get("base", {})})
            d["ndt"] = NdtTrainConfig(**{"seed": seed, **d.get("ndt", {})})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cls(root=str(root), **d)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc.msg} at line {exc.lineno}") from None
    return RunConfig.from_json(doc, path.parent)


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_json(), indent=1) + "\n")


def desk_scale_config(seed: int = 7) -> RunConfig:
    """The scaled-down synthetic setting: 8 classes x 100, 30 base epochs, 5 NDT epochs."""
    return RunConfig(
        seed=seed,
        synthetic=SyntheticConfig(n_per_class=100),
        base=BaseTrainConfig(epochs=30, seed=seed),
        ndt=NdtTrainConfig(epochs=5, lr=1e-3, seed=seed),
        eta=0.7,
        rho=30.0,
    )


# ------------------------------------------------------------------- steps

def make_data(config: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    data = generate_synthetic(config.synthetic, config.seed)
    train, test = split(data, config.train_fraction, config.seed)
    return data, train, test


def fit_encoder(train: Dataset, config: RunConfig, history: list[float] | None = None) -> EncoderParams:
    enc_cfg = config.encoder_config(train.observation_length, train.taxonomy.M)
    return train_base(train, config.base, enc_cfg, config.policy, history)


def grow_tree(taxonomy: BehaviorTaxonomy, config: RunConfig,
              embeddings_path: str | Path | None = None) -> Tree:
    if embeddings_path is not None:
        emb = load_label_embeddings(embeddings_path, taxonomy)
    else:
        emb = embed_taxonomy(taxonomy, config.embedding_width)
    return build_tree(emb, config.linkage)


def make_model(train: Dataset, encoder: EncoderParams, tree: Tree, config: RunConfig,
               features: np.ndarray | None = None) -> EMemNdtModel:
    banks = implant(train, encoder, tree, config.eta, config.policy, features)
    return EMemNdtModel.create(tree, banks, config.rho, config.aggregation, config.hidden, config.out,
                               config.ndt.seed, config.shared_transform, encoder.content_hash(),
                               config.init_gain)


@dataclass
class PipelineResult:
    train: Dataset
    test: Dataset
    encoder: EncoderParams
    tree: Tree
    model: EMemNdtModel
    confusion: ConfusionMatrix
    report: MetricsReport
    base_confusion: ConfusionMatrix
    base_report: MetricsReport
    timings: dict[str, float]
    files: dict[str, Path] = field(default_factory=dict)


def run_pipeline(config: RunConfig, outdir: str | Path | None = None) -> PipelineResult:
    """Generate, train, grow the tree, implant, train the tree and evaluate.

    With ``outdir`` every artifact is written there under fixed names.
    """
    timings = {}
    t0 = time.perf_counter()
    _, train, test = make_data(config)
    timings["data"] = time.perf_counter() - t0

    t = time.perf_counter()
    encoder = fit_encoder(train, config)
    timings["base"] = time.perf_counter() - t

    taxonomy = train.taxonomy
    if config.path("taxonomy") is not None:
        taxonomy = load_taxonomy(config.path("taxonomy"))
    tree = grow_tree(taxonomy, config, config.path("label_embeddings"))

    t = time.perf_counter()
    G_train = embed(encoder, train.instances, config.policy)
    model = make_model(train, encoder, tree, config, G_train)
    model = train_ndt(model, train, encoder, config.ndt, config.policy, features=G_train)
    timings["ndt"] = time.perf_counter() - t

    t = time.perf_counter()
    cm, report = evaluate(model, encoder, test, config.policy)
    base_cm, base_report = evaluate_base(encoder, test, config.policy)
    timings["eval"] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - t0

    files: dict[str, Path] = {}
    if outdir is not None:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        files = {name: out / name for name in ("train.jsonl", "test.jsonl", "encoder.json", "tree.json",
                                               "model.json", "report.json", "base_report.json",
                                               "confusion.csv")}
        save_dataset(train, files["train.jsonl"])
        save_dataset(test, files["test.jsonl"])
        encoder.save(files["encoder.json"])
        save_tree(tree, files["tree.json"])
        save_model(model, files["model.json"])
        files["report.json"].write_text(dumps_report(cm, report) + "\n")
        files["base_report.json"].write_text(dumps_report(base_cm, base_report) + "\n")
        files["confusion.csv"].write_text(cm.to_csv())
    return PipelineResult(train, test, encoder, tree, model, cm, report, base_cm, base_report,
                          timings, files)


def with_overrides(config: RunConfig, **kw) -> RunConfig:
    """Copy with top-level fields replaced; ``None`` values are ignored."""
    return replace(config, **{k: v for k, v in kw.items() if v is not None})


"""Base behavior-prediction encoder.

A small transformer over the target's state sequence and a one-layer GCN whose
weight matrix is evolved frame to frame by a matrix GRU. Per-frame graph
embeddings go through a per-frame attention block and then self-attention
over time; the two summaries are fused into the instance embedding ``g``,
which a linear classifier with softmax turns into behavior probabilities.

All gradients are written out by hand and validated by finite differences.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import AGENT_CLASSES, Dataset, EdgePolicy, Instance, InteractionGraph, build_interaction_graphs
from .layers import (
    Adam,
    GradCheckResult,
    NumericError,
    attention_backward,
    attention_forward,
    check_gradients,
    log_softmax,
    sigmoid,
    sinusoidal_encoding,
    softmax,
)

log = logging.getLogger(__name__)

ENCODER_VERSION = "encoder/v1"
N_NUMERIC = 5  # uid, x, y, z, orientation
N_CLASSES = len(AGENT_CLASSES)


@dataclass(frozen=True)
class EncoderConfig:
    T: int
    M: int
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    d_graph: int = 32
    d_ff: int = 64
    class_emb_dim: int = 4
    pe_dim: int = 8
    coord_scale: float = 4.0

    def __post_init__(self):
        for name in ("T", "M", "d_model", "n_heads", "n_layers", "d_graph", "d_ff",
                     "class_emb_dim", "pe_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"EncoderConfig.{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not self.coord_scale > 0:
            raise ValueError("coord_scale must be positive")

    @property
    def state_in(self) -> int:
        return N_NUMERIC + self.class_emb_dim + self.pe_dim

    @property
    def graph_in(self) -> int:
        return N_NUMERIC + self.class_emb_dim


@dataclass(frozen=True)
class BaseTrainConfig:
    epochs: int = 80
    lr_state: float = 0.0005
    lr_graph: float = 0.005
    weight_decay: float = 1e-5
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not (self.lr_state > 0 and self.lr_graph > 0) or self.weight_decay < 0:
            raise ValueError("learning rates must be positive and weight decay non-negative")


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, dg, fg = cfg.d_model, cfg.d_graph, cfg.graph_in
    shapes: dict[str, tuple[int, ...]] = {
        "class_emb": (N_CLASSES, cfg.class_emb_dim),
        "state.W_in": (cfg.state_in, d),
    }
    for i in range(cfg.n_layers):
        p = f"state.l{i}."
        shapes.update({
            p + "Wq": (d, d), p + "Wk": (d, d), p + "Wv": (d, d), p + "Wo": (d, d),
            p + "alpha_attn": (1,),
            p + "W1": (d, cfg.d_ff), p + "b1": (cfg.d_ff,),
            p + "W2": (cfg.d_ff, d), p + "b2": (d,),
            p + "alpha_ffn": (1,),
        })
    shapes.update({
        "graph.W0": (fg, dg),
        "graph.Uz": (fg, fg), "graph.Bz": (fg, dg),
        "graph.Ur": (fg, fg), "graph.Br": (fg, dg),
        "graph.Uh": (fg, fg), "graph.Bh": (fg, dg),
        "graph.inner.Wv": (dg, dg),
        "graph.outer.Wq": (dg, dg), "graph.outer.Wk": (dg, dg), "graph.outer.Wv": (dg, dg),
        "fuse.W": (d + dg, d), "fuse.b": (d,),
        "cls.W": (d, cfg.M), "cls.b": (cfg.M,),
    })
    return shapes


def is_graph_param(name: str) -> bool:
    return name.startswith("graph.")


@dataclass
class EncoderParams:
    config: EncoderConfig
    weights: dict[str, np.ndarray]

    @classmethod
    def init(cls, config: EncoderConfig, seed: int = 0) -> "EncoderParams":
        rng = np.random.default_rng(seed)
        weights = {}
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.startswith("alpha"):
                weights[name] = np.ones(shape)
            elif leaf.startswith(("b", "B")):
                weights[name] = np.zeros(shape)
            elif name == "class_emb":
                weights[name] = rng.uniform(-0.5, 0.5, size=shape)
            else:
                bound = 1.0 / math.sqrt(shape[0])
                weights[name] = rng.uniform(-bound, bound, size=shape)
        return cls(config, weights)

    @classmethod
    def zeros(cls, config: EncoderConfig) -> "EncoderParams":
        return cls(config, {n: np.zeros(s) for n, s in param_shapes(config).items()})

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.weights.items()})

    def to_json(self) -> dict:
        return {
            "version": ENCODER_VERSION,
            "config": asdict(self.config),
            "weights": {
                name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                for name, arr in self.weights.items()
            },
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EncoderParams":
        if doc.get("version") != ENCODER_VERSION:
            raise ValueError(f"unsupported encoder version {doc.get('version')!r}")
        config = EncoderConfig(**doc["config"])
        shapes = param_shapes(config)
        weights = {}
        for name, shape in shapes.items():
            if name not in doc["weights"]:
                raise ValueError(f"encoder file lacks weight {name!r}")
            entry = doc["weights"][name]
            if tuple(entry["shape"]) != shape:
                raise ValueError(f"weight {name!r}: shape {entry['shape']} != {list(shape)}")
            arr = np.asarray(entry["data"], dtype=np.float64).reshape(shape)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"weight {name!r} has non-finite entries")
            weights[name] = arr
        return cls(config, weights)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))

    def content_hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EncoderParams":
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- features

@dataclass
class Features:
    """Array view of a batch of instances, ready for the forward pass."""

    state_num: np.ndarray  # (B, T, 5)
    state_cls: np.ndarray  # (B, T) agent-class index of the target
    graph_num: np.ndarray  # (B, T, 5) mean over the target's closed neighborhood
    graph_hist: np.ndarray  # (B, T, C) class fractions over the same neighborhood

    def __len__(self) -> int:
        return self.state_num.shape[0]

    def take(self, idx) -> "Features":
        return Features(self.state_num[idx], self.state_cls[idx], self.graph_num[idx],
                        self.graph_hist[idx])


def _numeric(agent, scale: float) -> list[float]:
    return [float(agent.uid), agent.x / scale, agent.y / scale, agent.z / scale, agent.orientation]


def featurize(instances: Sequence[Instance], config: EncoderConfig,
              edge_policy: EdgePolicy | None = None,
              graphs: Sequence[Sequence[InteractionGraph]] | None = None) -> Features:
    B, T = len(instances), config.T
    state_num = np.zeros((B, T, N_NUMERIC))
    state_cls = np.zeros((B, T), dtype=np.int64)
    graph_num = np.zeros((B, T, N_NUMERIC))
    graph_hist = np.zeros((B, T, N_CLASSES))
    cls_index = {c: i for i, c in enumerate(AGENT_CLASSES)}
    for b, inst in enumerate(instances):
        if inst.T != T:
            raise ValueError(f"instance {inst.instance_id!r} has T={inst.T}, encoder expects {T}")
        gs = graphs[b] if graphs is not None else build_interaction_graphs(inst, edge_policy)
        for t, (frame, graph) in enumerate(zip(inst.frames, gs)):
            target = frame.target
            state_num[b, t] = _numeric(target, config.coord_scale)
            state_cls[b, t] = cls_index[target.cls]
            by_uid = {a.uid: a for a in graph.vertices}
            hood = [target.uid] + graph.neighbors(target.uid)
            for uid in hood:
                graph_num[b, t] += _numeric(by_uid[uid], config.coord_scale)
                graph_hist[b, t, cls_index[by_uid[uid].cls]] += 1.0
            graph_num[b, t] /= len(hood)
            graph_hist[b, t] /= len(hood)
    return Features(state_num, state_cls, graph_num, graph_hist)


# ----------------------------------------------------------------- forward

def _evolve(W, w):
    Z = sigmoid(w["graph.Uz"] @ W + w["graph.Bz"])
    R = sigmoid(w["graph.Ur"] @ W + w["graph.Br"])
    RW = R * W
    Hc = np.tanh(w["graph.Uh"] @ RW + w["graph.Bh"])
    return (1.0 - Z) * W + Z * Hc, (W, Z, R, RW, Hc)


def _evolve_backward(dWn, cache, w, grads):
    W, Z, R, RW, Hc = cache
    dW = dWn * (1.0 - Z)
    dZpre = dWn * (Hc - W) * Z * (1.0 - Z)
    dHpre = dWn * Z * (1.0 - Hc ** 2)
    grads["graph.Uh"] += dHpre @ RW.T
    grads["graph.Bh"] += dHpre
    dRW = w["graph.Uh"].T @ dHpre
    dW += dRW * R
    dRpre = dRW * W * R * (1.0 - R)
    grads["graph.Uz"] += dZpre @ W.T
    grads["graph.Bz"] += dZpre
    dW += w["graph.Uz"].T @ dZpre
    grads["graph.Ur"] += dRpre @ W.T
    grads["graph.Br"] += dRpre
    dW += w["graph.Ur"].T @ dRpre
    return dW


def evolved_weights(params: EncoderParams, T: int, evolve: bool = True) -> list[np.ndarray]:
    """GCN weights per frame: ``W_1`` is the initial matrix, ``W_t`` evolves from ``W_{t-1}``."""
    w = params.weights
    Ws = [w["graph.W0"]]
    for _ in range(1, T):
        Ws.append(_evolve(Ws[-1], w)[0] if evolve else Ws[-1])
    return Ws


def _state_forward(feats: Features, w, cfg: EncoderConfig):
    B, T = feats.state_cls.shape
    emb = w["class_emb"][feats.state_cls]
    pe = np.broadcast_to(sinusoidal_encoding(T, cfg.pe_dim), (B, T, cfg.pe_dim))
    X_in = np.concatenate([feats.state_num, emb, pe], axis=-1)
    X = X_in @ w["state.W_in"]
    caches = []
    for i in range(cfg.n_layers):
        p = f"state.l{i}."
        A, acache = attention_forward(X, w[p + "Wq"], w[p + "Wk"], w[p + "Wv"], cfg.n_heads, w[p + "Wo"])
        X1 = X + w[p + "alpha_attn"][0] * A
        Hh = np.tanh(X1 @ w[p + "W1"] + w[p + "b1"])
        F = Hh @ w[p + "W2"] + w[p + "b2"]
        X2 = X1 + w[p + "alpha_ffn"][0] * F
        caches.append((X1, A, acache, Hh, F))
        X = X2
    return X.mean(axis=1), (X_in, caches)


def _state_backward(d_f, cache, feats, w, cfg, grads):
    X_in, caches = cache
    T = feats.state_cls.shape[1]
    dX = np.repeat(d_f[:, None, :], T, axis=1) / T
    for i in reversed(range(cfg.n_layers)):
        p = f"state.l{i}."
        X1, A, acache, Hh, F = caches[i]
        a_ffn, a_attn = w[p + "alpha_ffn"][0], w[p + "alpha_attn"][0]
        grads[p + "alpha_ffn"] += np.sum(dX * F)
        dF = dX * a_ffn
        grads[p + "W2"] += Hh.reshape(-1, Hh.shape[-1]).T @ dF.reshape(-1, dF.shape[-1])
        grads[p + "b2"] += dF.sum(axis=(0, 1))
        dHpre = (dF @ w[p + "W2"].T) * (1.0 - Hh ** 2)
        grads[p + "W1"] += X1.reshape(-1, X1.shape[-1]).T @ dHpre.reshape(-1, dHpre.shape[-1])
        grads[p + "b1"] += dHpre.sum(axis=(0, 1))
        dX1 = dX + dHpre @ w[p + "W1"].T
        grads[p + "alpha_attn"] += np.sum(dX1 * A)
        dXa, ag = attention_backward(dX1 * a_attn, acache)
        for k, v in ag.items():
            grads[p + k] += v
        dX = dX1 + dXa
    grads["state.W_in"] += X_in.reshape(-1, X_in.shape[-1]).T @ dX.reshape(-1, dX.shape[-1])
    dX_in = dX @ w["state.W_in"].T
    d_emb = dX_in[..., N_NUMERIC:N_NUMERIC + cfg.class_emb_dim]
    np.add.at(grads["class_emb"], feats.state_cls.ravel(), d_emb.reshape(-1, d_emb.shape[-1]))


def _graph_forward(feats: Features, w, cfg: EncoderConfig, evolve: bool = True):
    T = feats.graph_num.shape[1]
    Ws, evo_caches = [w["graph.W0"]], []
    for _ in range(1, T):
        if evolve:
            Wn, c = _evolve(Ws[-1], w)
        else:
            Wn, c = Ws[-1], None
        Ws.append(Wn)
        evo_caches.append(c)
    agg = np.concatenate([feats.graph_num, feats.graph_hist @ w["class_emb"]], axis=-1)
    Wstack = np.stack(Ws)  # (T, F_g, d_g)
    h = np.tanh(np.einsum("btf,tfd->btd", agg, Wstack))
    U = h @ w["graph.inner.Wv"]
    O, acache = attention_forward(U, w["graph.outer.Wq"], w["graph.outer.Wk"], w["graph.outer.Wv"], 1)
    return O.mean(axis=1), (agg, Wstack, evo_caches, h, U, acache, evolve)


def _graph_backward(d_f, cache, feats, w, cfg, grads):
    agg, Wstack, evo_caches, h, U, acache, evolve = cache
    T = h.shape[1]
    dO = np.repeat(d_f[:, None, :], T, axis=1) / T
    dU, ag = attention_backward(dO, acache)
    for k, v in ag.items():
        grads["graph.outer." + k] += v
    grads["graph.inner.Wv"] += h.reshape(-1, h.shape[-1]).T @ dU.reshape(-1, dU.shape[-1])
    dpre = (dU @ w["graph.inner.Wv"].T) * (1.0 - h ** 2)
    dWs = np.einsum("btf,btd->tfd", agg, dpre)
    dagg = np.einsum("btd,tfd->btf", dpre, Wstack)
    d_emb = dagg[..., N_NUMERIC:]
    grads["class_emb"] += np.einsum("btc,bte->ce", feats.graph_hist, d_emb)
    dW = dWs[T - 1]
    for t in range(T - 1, 0, -1):
        dprev = _evolve_backward(dW, evo_caches[t - 1], w, grads) if evolve else dW
        dW = dWs[t - 1] + dprev
    grads["graph.W0"] += dW


@dataclass
class ForwardResult:
    f_state: np.ndarray
    f_graph: np.ndarray
    g: np.ndarray
    logits: np.ndarray
    cache: tuple

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)


def forward(params: EncoderParams, feats: Features) -> ForwardResult:
    w, cfg = params.weights, params.config
    f_state, scache = _state_forward(feats, w, cfg)
    f_graph, gcache = _graph_forward(feats, w, cfg)
    z = np.concatenate([f_state, f_graph], axis=-1)
    g = z @ w["fuse.W"] + w["fuse.b"]
    logits = g @ w["cls.W"] + w["cls.b"]
    return ForwardResult(f_state, f_graph, g, logits, (scache, gcache, z))


def backward(params: EncoderParams, feats: Features, res: ForwardResult,
             d_logits: np.ndarray) -> dict[str, np.ndarray]:
    w, cfg = params.weights, params.config
    scache, gcache, z = res.cache
    grads = {k: np.zeros_like(v) for k, v in w.items()}
    grads["cls.W"] += res.g.T @ d_logits
    grads["cls.b"] += d_logits.sum(axis=0)
    dg = d_logits @ w["cls.W"].T
    grads["fuse.W"] += z.T @ dg
    grads["fuse.b"] += dg.sum(axis=0)
    dz = dg @ w["fuse.W"].T
    d = cfg.d_model
    _state_backward(dz[:, :d], scache, feats, w, cfg, grads)
    _graph_backward(dz[:, d:], gcache, feats, w, cfg, grads)
    return grads


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    B = logits.shape[0]
    lp = log_softmax(logits)
    loss = -float(lp[np.arange(B), targets].mean())
    d = np.exp(lp)
    d[np.arange(B), targets] -= 1.0
    return loss, d / B


def loss_and_grads(params: EncoderParams, feats: Features,
                   targets: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    res = forward(params, feats)
    loss, d_logits = cross_entropy(res.logits, targets)
    return loss, backward(params, feats, res, d_logits)


# ------------------------------------------------------- single-instance API

def state_array(instance: Instance, config: EncoderConfig | None = None) -> np.ndarray:
    """Target state sequence as a ``T x 6`` array ``[uid, class, x, y, z, orientation]``."""
    cls_index = {c: i for i, c in enumerate(AGENT_CLASSES)}
    rows = []
    for fr in instance.frames:
        a = fr.target
        rows.append([a.uid, cls_index[a.cls], a.x, a.y, a.z, a.orientation])
    return np.array(rows, dtype=np.float64)


def encode_states(states: np.ndarray, params: EncoderParams) -> np.ndarray:
    """``f_state`` for one ``T x 6`` state array (class column integer-coded, raw units)."""
    cfg = params.config
    states = np.asarray(states, dtype=np.float64)
    if states.shape != (cfg.T, 6):
        raise ValueError(f"states must have shape ({cfg.T}, 6), got {states.shape}")
    num = np.column_stack([states[:, 0], states[:, 2:5] / cfg.coord_scale, states[:, 5]])
    feats = Features(num[None], states[None, :, 1].astype(np.int64),
                     np.zeros((1, cfg.T, N_NUMERIC)), np.zeros((1, cfg.T, N_CLASSES)))
    return _state_forward(feats, params.weights, cfg)[0][0]


def encode_graphs(graphs: Sequence[InteractionGraph], params: EncoderParams,
                  evolve: bool = True) -> np.ndarray:
    """``f_graph`` for one instance's per-frame interaction graphs.

    ``evolve=False`` freezes the weight-evolution cell so every frame uses ``W_1``.
    """
    if not graphs:
        raise ValueError("encode_graphs needs at least one graph")
    cfg = params.config
    if len(graphs) != cfg.T:
        raise ValueError(f"expected {cfg.T} graphs, got {len(graphs)}")
    num = np.zeros((1, cfg.T, N_NUMERIC))
    hist = np.zeros((1, cfg.T, N_CLASSES))
    cls_index = {c: i for i, c in enumerate(AGENT_CLASSES)}
    for t, gr in enumerate(graphs):
        by_uid = {a.uid: a for a in gr.vertices}
        hood = [gr.target_uid] + gr.neighbors(gr.target_uid)
        for uid in hood:
            num[0, t] += _numeric(by_uid[uid], cfg.coord_scale)
            hist[0, t, cls_index[by_uid[uid].cls]] += 1.0
        num[0, t] /= len(hood)
        hist[0, t] /= len(hood)
    feats = Features(np.zeros((1, cfg.T, N_NUMERIC)), np.zeros((1, cfg.T), dtype=np.int64), num, hist)
    return _graph_forward(feats, params.weights, cfg, evolve)[0][0]


def fuse_and_classify(f_state: np.ndarray, f_graph: np.ndarray,
                      params: EncoderParams) -> tuple[np.ndarray, np.ndarray]:
    w = params.weights
    z = np.concatenate([f_state, f_graph])
    g = z @ w["fuse.W"] + w["fuse.b"]
    return g, softmax(g @ w["cls.W"] + w["cls.b"])


@dataclass
class InstanceEmbedding:
    g: np.ndarray
    f_state: np.ndarray
    f_graph: np.ndarray


def embed_features(params: EncoderParams, feats: Features, batch_size: int = 256) -> ForwardResult:
    parts = []
    for start in range(0, len(feats), batch_size):
        parts.append(forward(params, feats.take(slice(start, start + batch_size))))
    cat = lambda attr: np.concatenate([getattr(p, attr) for p in parts])  # noqa: E731
    return ForwardResult(cat("f_state"), cat("f_graph"), cat("g"), cat("logits"), ())


def embed(params: EncoderParams, instances: Sequence[Instance],
          edge_policy: EdgePolicy | None = None) -> np.ndarray:
    """Instance embeddings ``g`` (one row per instance)."""
    if not instances:
        return np.zeros((0, params.config.d_model))
    return embed_features(params, featurize(instances, params.config, edge_policy)).g


def embed_instance(params: EncoderParams, instance: Instance,
                   edge_policy: EdgePolicy | None = None) -> InstanceEmbedding:
    res = forward(params, featurize([instance], params.config, edge_policy))
    return InstanceEmbedding(res.g[0], res.f_state[0], res.f_graph[0])


def predict_base(params: EncoderParams, instances: Sequence[Instance], labels: Sequence[str],
                 edge_policy: EdgePolicy | None = None) -> list[str]:
    """Labels predicted by the base softmax head (``labels`` in class-index order)."""
    res = embed_features(params, featurize(instances, params.config, edge_policy))
    return [labels[int(k)] for k in np.argmax(res.logits, axis=1)]


# ---------------------------------------------------------------- training

def targets_of(dataset: Dataset) -> np.ndarray:
    index = {lab: i for i, lab in enumerate(dataset.taxonomy.names)}
    return np.array([index[inst.label] for inst in dataset.instances], dtype=np.int64)


def make_optimizer(params: EncoderParams, config: BaseTrainConfig) -> Adam:
    lrs = {n: (config.lr_graph if is_graph_param(n) else config.lr_state) for n in params.weights}
    return Adam(lrs, weight_decay=config.weight_decay)


def base_step(params: EncoderParams, feats: Features, targets: np.ndarray, opt: Adam) -> float:
    """One optimizer step on a batch; returns the pre-step loss."""
    loss, grads = loss_and_grads(params, feats, targets)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    opt.step(params.weights, grads)
    return loss


def train_base(train: Dataset, config: BaseTrainConfig, enc_config: EncoderConfig | None = None,
               edge_policy: EdgePolicy | None = None,
               history: list[float] | None = None) -> EncoderParams:
    """Train the encoder with cross-entropy and Adam; deterministic for a fixed seed."""
    if len(train) == 0:
        raise ValueError("cannot train on an empty dataset")
    T = train.observation_length
    if enc_config is None:
        enc_config = EncoderConfig(T=T, M=train.taxonomy.M)
    if enc_config.T != T or enc_config.M != train.taxonomy.M:
        raise ValueError(f"encoder config (T={enc_config.T}, M={enc_config.M}) does not match "
                         f"data (T={T}, M={train.taxonomy.M})")
    params = EncoderParams.init(enc_config, config.seed)
    feats = featurize(train.instances, enc_config, edge_policy)
    targets = targets_of(train)
    opt = make_optimizer(params, config)
    rng = np.random.default_rng(config.seed + 1)
    n = len(train)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            try:
                loss = base_step(params, feats.take(idx), targets[idx], opt)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from None
            total += loss * len(idx)
        mean = total / n
        if history is not None:
            history.append(mean)
        log.info("base epoch %d/%d loss %.4f", epoch + 1, config.epochs, mean)
    return params


def grad_check(params: EncoderParams, instance: Instance | Sequence[Instance], epsilon: float = 1e-5,
               n_coords: int = 100, seed: int = 0, labels: Sequence[str] | None = None,
               edge_policy: EdgePolicy | None = None, grad_fn=None,
               names: list[str] | None = None) -> GradCheckResult:
    """Central-difference check of the cross-entropy gradient on sampled coordinates.

    ``grad_fn(params, feats, targets)`` may replace the analytic gradient, which
    is how fault-injection tests confirm the checker notices wrong gradients.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    instances = [instance] if isinstance(instance, Instance) else list(instance)
    feats = featurize(instances, params.config, edge_policy)
    if labels is None:
        targets = np.zeros(len(instances), dtype=np.int64)
    else:
        targets = np.array([list(labels).index(i.label) for i in instances], dtype=np.int64)
    work = params.copy()
    if grad_fn is None:
        _, analytic = loss_and_grads(work, feats, targets)
    else:
        analytic = grad_fn(work, feats, targets)

    def loss_fn():
        return cross_entropy(forward(work, feats).logits, targets)[0]

    return check_gradients(loss_fn, work.weights, analytic, epsilon, n_coords, seed, names)

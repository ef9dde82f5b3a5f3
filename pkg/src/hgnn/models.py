"""HGNN model: embedding adapter, prototype GNN, instance GNN, losses.

Also hosts the label-propagation GNN baseline, where label embeddings ride on
graph nodes and a linear layer reads the query node out as class scores.
"""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Param, Tensor
from .graph import (AdjacencyKind, GraphLayerParams, MaskMode, build_full_mask,
                    build_ignn_mask, receive_from, residual_update)

PROB_FLOOR = 1e-12


class Variant(str, enum.Enum):
    PROTONET = "protonet"
    PGNN_ONLY = "pgnn"
    IGNN_ONLY = "ignn"
    HGNN = "hgnn"
    LABELPROP = "labelprop"

    @property
    def uses_pgnn(self) -> bool:
        return self in (Variant.PGNN_ONLY, Variant.HGNN)

    @property
    def uses_ignn(self) -> bool:
        return self in (Variant.IGNN_ONLY, Variant.HGNN)


class Consistency(str, enum.Enum):
    NONE = "none"
    L1DIST = "l1"
    MSE = "mse"
    KL = "kl"


@dataclass
class ModelConfig:
    d_in: int
    d: int | None = None
    adapter: bool = False
    operator: AdjacencyKind = AdjacencyKind.INNER_PRODUCT
    depth: int = 1
    slope: float = 0.2
    squared_distance: bool = True
    variant: Variant = Variant.HGNN
    n_way: int = 5  # width of the label-propagation classifier

    def __post_init__(self):
        if self.d is None:
            self.d = self.d_in
        self.operator = AdjacencyKind(self.operator)
        self.variant = Variant(self.variant)
        if not self.adapter and self.d != self.d_in:
            raise ValueError(f"without an adapter the graph dim must equal d_in ({self.d} != {self.d_in})")
        if self.d_in < 1 or self.depth < 1:
            raise ValueError("d_in and depth must be positive")


@dataclass
class ModelParams:
    theta: dict[str, Param] = field(default_factory=dict)
    pgnn: list[GraphLayerParams] = field(default_factory=list)
    ignn: list[GraphLayerParams] = field(default_factory=list)
    baseline: list[GraphLayerParams] = field(default_factory=list)
    baseline_w: Param | None = None

    def embedding_params(self) -> list[Param]:
        return list(self.theta.values())

    def gnn_params(self) -> list[Param]:
        out = [p for layer in self.pgnn + self.ignn + self.baseline for p in layer.params()]
        if self.baseline_w is not None:
            out.append(self.baseline_w)
        return out

    def all(self) -> list[Param]:
        return self.embedding_params() + self.gnn_params()

    def named(self) -> dict[str, Param]:
        named = {p.name: p for p in self.all()}
        if len(named) != len(self.all()):
            raise ValueError("duplicate parameter names")
        return named


@dataclass
class PredictionPair:
    """Per-query class probabilities, one row per query.

    Single-head variants leave the head they lack as ``None``; ``p_combined``
    is always set and is what accuracy is computed from.
    """

    p_combined: Tensor
    p_pgnn: Tensor | None = None
    p_ignn: Tensor | None = None


@dataclass
class LossBreakdown:
    l1: Tensor
    l2: Tensor
    l3: Tensor
    total: Tensor

    def floats(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("l1", "l2", "l3", "total")}


# ------------------------------------------------------------------ embedding

def init_theta(d_in: int, d: int, rng: np.random.Generator) -> dict[str, Param]:
    return {
        "w1": Param("theta.w1", rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, d))),
        "b1": Param("theta.b1", np.zeros(d)),
        "w2": Param("theta.w2", rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))),
        "b2": Param("theta.b2", np.zeros(d)),
    }


def embed(x, theta: dict[str, Param], slope: float = 0.2) -> Tensor:
    """``f_theta``: identity when ``theta`` is empty, else ``leaky(x W1 + b1) W2 + b2``."""
    x = dc.as_tensor(x)
    if not theta:
        return x
    if x.shape[-1] != theta["w1"].shape[0]:
        raise dc.ShapeError(f"embed: input dim {x.shape[-1]} != adapter input {theta['w1'].shape[0]}")
    h = dc.leaky_relu(dc.matmul(x, theta["w1"]) + theta["b1"], slope)
    return dc.matmul(h, theta["w2"]) + theta["b2"]


# ----------------------------------------------------------------- prototypes

def averaging_matrix(labels, n_way: int | None = None) -> np.ndarray:
    """``[N, n]`` matrix whose row c averages the instances labelled c (equal shots required)."""
    labels = np.asarray(labels, dtype=int)
    n_way = int(labels.max()) + 1 if n_way is None else n_way
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= n_way:
        raise ValueError(f"labels must lie in [0, {n_way})")
    counts = np.bincount(labels, minlength=n_way)
    if counts.min() == 0 or (counts != counts[0]).any():
        raise ValueError(f"every class needs the same positive number of shots, got counts {counts.tolist()}")
    avg = np.zeros((n_way, labels.size))
    avg[labels, np.arange(labels.size)] = 1.0 / counts[0]
    return avg


def compute_prototypes(features, labels, n_way: int | None = None) -> Tensor:
    features = dc.as_tensor(features)
    if features.shape[0] != len(labels):
        raise dc.ShapeError(f"{features.shape[0]} features but {len(labels)} labels")
    return dc.matmul(averaging_matrix(labels, n_way), features)


def distances(query: Tensor, protos: Tensor, squared: bool = True) -> Tensor:
    d2 = dc.pairwise_sq_dist(query, protos)
    return d2 if squared else dc.sqrt(d2, eps=1e-12)


def classify_by_prototypes(query, protos, squared: bool = True) -> Tensor:
    """Row i: softmax over classes of minus the distance from query i to each prototype."""
    query, protos = dc.as_tensor(query), dc.as_tensor(protos)
    return dc.softmax_rows(-distances(query, protos, squared))


# ----------------------------------------------------------------------- GNNs

def pgnn_forward(support, labels, layers: list[GraphLayerParams], n_way: int | None = None) -> Tensor:
    """Adapted prototypes: class means refined over a fully connected prototype graph."""
    f = compute_prototypes(support, labels, n_way)
    mask = build_full_mask(f.shape[0])
    for layer in layers:
        f = residual_update(f, layer, mask)
    return f


def ignn_forward(support, query, layers: list[GraphLayerParams], mode=MaskMode.INDUCTIVE,
                 labels=None) -> tuple[Tensor, Tensor]:
    """Update support and query instances over the instance graph.

    Inductive: every query conceptually owns a graph of all supports plus
    itself, with messages flowing support -> query only. Supports are
    therefore updated once and shared; each query row is computed from the
    supports and itself.
    Transductive: a single graph holding every query; queries also exchange
    messages with each other, supports still never listen to queries.
    """
    s, q = dc.as_tensor(support), dc.as_tensor(query)
    ns = s.shape[0]
    if MaskMode(mode) is MaskMode.TRANSDUCTIVE:
        if labels is None:
            n_way, k_shot = ns, 1
        else:
            n_way = int(np.max(labels)) + 1
            k_shot = ns // n_way
        mask = build_ignn_mask(n_way, k_shot, MaskMode.TRANSDUCTIVE, q.shape[0])
        f = dc.concat([s, q], axis=0)
        for layer in layers:
            f = residual_update(f, layer, mask)
        return f[:ns], f[ns:]
    mask = build_full_mask(ns)
    for layer in layers:
        s, q = residual_update(s, layer, mask), receive_from(q, s, layer)
    return s, q


def ignn_prototypes(support_updated, labels, n_way: int | None = None) -> Tensor:
    return compute_prototypes(support_updated, labels, n_way)


# --------------------------------------------------------------------- losses

def cross_entropy(p: Tensor, labels) -> Tensor:
    """``sum_i -log p[i, y_i]`` with probabilities clamped at ``PROB_FLOOR``."""
    labels = np.asarray(labels, dtype=int)
    if labels.size != p.shape[0]:
        raise ValueError(f"{p.shape[0]} predictions but {labels.size} labels")
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= p.shape[1]:
        raise ValueError(f"labels out of range for {p.shape[1]} classes")
    picked = p[np.arange(labels.size), labels]
    return -dc.sum(dc.log(picked, floor=PROB_FLOOR))


def consistency_loss(p_ignn: Tensor, p_pgnn: Tensor, kind=Consistency.KL) -> Tensor:
    kind = Consistency(kind)
    if kind is Consistency.NONE:
        return Tensor(0.0)
    if kind is Consistency.L1DIST:
        return dc.sum(dc.absolute(p_ignn - p_pgnn))
    if kind is Consistency.MSE:
        return dc.sum(dc.square(p_ignn - p_pgnn))
    log_i = dc.log(p_ignn, floor=PROB_FLOOR)
    log_p = dc.log(p_pgnn, floor=PROB_FLOOR)
    diff = log_i - log_p
    # KL(pI || pP) + KL(pP || pI), summed over queries
    return dc.sum(p_ignn * diff) - dc.sum(p_pgnn * diff)


def loss_total(pred: PredictionPair, labels, consistency=Consistency.KL) -> LossBreakdown:
    if pred.p_pgnn is None or pred.p_ignn is None:
        raise ValueError("loss_total needs both PGNN and IGNN predictions")
    l1 = cross_entropy(pred.p_pgnn, labels)
    l2 = cross_entropy(pred.p_ignn, labels)
    l3 = consistency_loss(pred.p_ignn, pred.p_pgnn, consistency)
    return LossBreakdown(l1, l2, l3, l1 + l2 + l3)


# -------------------------------------------------------------------- model

def _make_layers(n: int, d: int, rng, prefix: str, cfg: ModelConfig, residual: bool = True):
    return [GraphLayerParams.create(d, rng, f"{prefix}.{i}", residual=residual,
                                    operator=cfg.operator, slope=cfg.slope)
            for i in range(n)]


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng([seed, 1])
    params = ModelParams()
    if cfg.adapter:
        params.theta = init_theta(cfg.d_in, cfg.d, rng)
    if cfg.variant.uses_pgnn:
        params.pgnn = _make_layers(cfg.depth, cfg.d, rng, "pgnn", cfg)
    if cfg.variant.uses_ignn:
        params.ignn = _make_layers(cfg.depth, cfg.d, rng, "ignn", cfg)
    if cfg.variant is Variant.LABELPROP:
        width = cfg.d + cfg.n_way
        params.baseline = _make_layers(cfg.depth, width, rng, "baseline", cfg, residual=False)
        params.baseline_w = Param("baseline.w", rng.normal(0.0, 1.0 / np.sqrt(width), (width, cfg.n_way)))
    return params


def label_embedding(labels, n_way: int) -> np.ndarray:
    return np.eye(n_way)[np.asarray(labels, dtype=int)]


def labelprop_forward(episode, model: "HGNNModel") -> Tensor:
    """Label-propagation GNN: one graph of all supports plus one query per query.

    Node inputs concatenate the feature with a label embedding (one-hot for
    supports, uniform ``1/N`` for the query). After the graph layers the
    query node is read out by the linear classifier ``w`` and softmaxed.
    Queries are batched along a leading axis, each in its own graph.
    """
    params = model.params
    if params.baseline_w is None or not params.baseline:
        raise ValueError("model has no label-propagation parameters")
    n_way = params.baseline_w.shape[1]
    fs = embed(episode.support_x, params.theta, model.config.slope)
    fq = embed(episode.query_x, params.theta, model.config.slope)
    n_q, ns = fq.shape[0], fs.shape[0]
    sup = dc.concat([fs, Tensor(label_embedding(episode.support_y, n_way))], axis=1)
    qry = dc.concat([fq, Tensor(np.full((n_q, n_way), 1.0 / n_way))], axis=1)
    width = sup.shape[1]
    nodes = dc.concat([
        dc.mul(dc.reshape(sup, (1, ns, width)), np.ones((n_q, 1, 1))),
        dc.reshape(qry, (n_q, 1, width)),
    ], axis=1)
    for layer in params.baseline:
        phi = layer.transform(nodes)
        a = dc.softmax_rows(layer.adjacency.pair_scores(phi, phi))
        nodes = dc.leaky_relu(dc.matmul(a, phi), layer.slope)
    query_out = nodes[:, ns, :]
    return dc.softmax_rows(dc.matmul(query_out, params.baseline_w))


@dataclass
class HGNNModel:
    config: ModelConfig
    params: ModelParams

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "HGNNModel":
        return cls(config, init_params(config, seed))

    @property
    def variant(self) -> Variant:
        return self.config.variant

    def named_params(self) -> dict[str, Param]:
        return self.params.named()

    def embed(self, x) -> Tensor:
        return embed(x, self.params.theta, self.config.slope)

    def forward(self, episode, mode=MaskMode.INDUCTIVE) -> PredictionPair:
        variant = self.variant
        if variant is Variant.LABELPROP:
            if MaskMode(mode) is not MaskMode.INDUCTIVE:
                raise ValueError("the label-propagation baseline is inductive only")
            return PredictionPair(labelprop_forward(episode, self))
        n_way = episode.n_way
        squared = self.config.squared_distance
        fs = self.embed(episode.support_x)
        fq = self.embed(episode.query_x)
        if variant is Variant.PROTONET:
            protos = compute_prototypes(fs, episode.support_y, n_way)
            return PredictionPair(classify_by_prototypes(fq, protos, squared))
        p_pgnn = p_ignn = None
        if variant.uses_pgnn:
            adapted = pgnn_forward(fs, episode.support_y, self.params.pgnn, n_way)
            p_pgnn = classify_by_prototypes(fq, adapted, squared)
        if variant.uses_ignn:
            s_hat, q_hat = ignn_forward(fs, fq, self.params.ignn, mode, episode.support_y)
            protos = ignn_prototypes(s_hat, episode.support_y, n_way)
            p_ignn = classify_by_prototypes(q_hat, protos, squared)
        if p_pgnn is not None and p_ignn is not None:
            combined = (p_pgnn + p_ignn) * 0.5
        else:
            combined = p_pgnn if p_pgnn is not None else p_ignn
        return PredictionPair(combined, p_pgnn, p_ignn)

    def loss(self, episode, consistency=Consistency.KL, mode=MaskMode.INDUCTIVE
             ) -> tuple[LossBreakdown, PredictionPair]:
        """Training objective for this variant.

        HGNN: both cross-entropies plus the consistency term. Single-head
        variants put their cross-entropy in ``l1`` (PGNN, ProtoNet, baseline)
        or ``l2`` (IGNN).
        """
        pred = self.forward(episode, mode)
        y = episode.query_y
        if self.variant is Variant.HGNN:
            return loss_total(pred, y, consistency), pred
        ce = cross_entropy(pred.p_combined, y)
        zero = Tensor(0.0)
        if self.variant is Variant.IGNN_ONLY:
            return LossBreakdown(zero, ce, zero, zero + ce + zero), pred
        return LossBreakdown(ce, zero, zero, ce + zero + zero), pred

    def predict_proba(self, episode, mode=MaskMode.INDUCTIVE) -> np.ndarray:
        return self.forward(episode, mode).p_combined.values

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_params().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.values).tobytes())
        return h.hexdigest()

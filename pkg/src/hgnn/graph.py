"""Graph layers shared by the prototype GNN, the instance GNN and the
label-propagation baseline.

A layer transforms node features with ``phi``, scores every (receiver,
sender) pair with an adjacency operator, row-normalises the scores with a
masked softmax and aggregates. The residual variant adds a linear output
projection, a skip connection and layer norm.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Param, Tensor


class AdjacencyKind(str, enum.Enum):
    INNER_PRODUCT = "inner_product"
    CONCAT_MLP = "concat_mlp"
    SUBTRACT_MLP = "subtract_mlp"


class MaskMode(str, enum.Enum):
    INDUCTIVE = "inductive"
    TRANSDUCTIVE = "transductive"


@dataclass
class AdjacencyOperator:
    """Pairwise scorer ``psi``. MLP variants: one hidden layer of width d, scalar output."""

    kind: AdjacencyKind = AdjacencyKind.INNER_PRODUCT
    params: dict[str, Param] = field(default_factory=dict)
    slope: float = 0.2

    def __post_init__(self):
        self.kind = AdjacencyKind(self.kind)
        if self.kind is AdjacencyKind.INNER_PRODUCT and self.params:
            raise ValueError("inner-product adjacency carries no parameters")

    @classmethod
    def create(cls, kind, d: int, rng: np.random.Generator, prefix: str = "adj",
               slope: float = 0.2) -> "AdjacencyOperator":
        kind = AdjacencyKind(kind)
        if kind is AdjacencyKind.INNER_PRODUCT:
            return cls(kind, {}, slope)
        fan_in = 2 * d if kind is AdjacencyKind.CONCAT_MLP else d
        params = {
            "hidden_w": Param(f"{prefix}.hidden_w", rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, d))),
            # non-zero so self-pairs (zero difference) do not sit on the rectifier kink
            "hidden_b": Param(f"{prefix}.hidden_b", rng.normal(0.0, 0.1, d)),
            "out_w": Param(f"{prefix}.out_w", rng.normal(0.0, 1.0 / np.sqrt(d), (d, 1))),
            "out_b": Param(f"{prefix}.out_b", np.zeros(1)),
        }
        return cls(kind, params, slope)

    def _head(self, hidden: Tensor) -> Tensor:
        p = self.params
        h = dc.leaky_relu(hidden + p["hidden_b"], self.slope)
        score = dc.matmul(h, p["out_w"]) + p["out_b"]
        return dc.reshape(score, score.shape[:-1])

    def pair_scores(self, x: Tensor, y: Tensor) -> Tensor:
        """Scores ``[a, b]`` between receivers ``x [a, d]`` and senders ``y [b, d]``."""
        if self.kind is AdjacencyKind.INNER_PRODUCT:
            return dc.matmul(x, dc.transpose(y))
        w = self.params["hidden_w"]
        d = x.shape[-1]
        if self.kind is AdjacencyKind.CONCAT_MLP:
            left = dc.matmul(x, w[:d])
            right = dc.matmul(y, w[d:])
            hidden = dc.reshape(left, left.shape[:-1] + (1, left.shape[-1])) + \
                dc.reshape(right, right.shape[:-2] + (1,) + right.shape[-2:])
        else:
            diff = dc.reshape(x, x.shape[:-1] + (1, d)) - dc.reshape(y, y.shape[:-2] + (1,) + y.shape[-2:])
            hidden = dc.matmul(diff, w)
        return self._head(hidden)

    def self_scores(self, x: Tensor) -> Tensor:
        """Score of each node with itself, ``[a, 1]``; matches the diagonal of ``pair_scores(x, x)``."""
        if self.kind is AdjacencyKind.INNER_PRODUCT:
            return dc.rowdot(x, x)
        w = self.params["hidden_w"]
        d = x.shape[-1]
        if self.kind is AdjacencyKind.CONCAT_MLP:
            hidden = dc.matmul(x, w[:d]) + dc.matmul(x, w[d:])
        else:
            hidden = dc.matmul(x - x, w)
        score = self._head(hidden)
        return dc.reshape(score, score.shape + (1,))


@dataclass
class EdgeMask:
    """``allowed[i, j]`` lets node i receive a message from node j."""

    allowed: np.ndarray

    def __post_init__(self):
        self.allowed = np.asarray(self.allowed, dtype=bool)
        if self.allowed.ndim != 2 or self.allowed.shape[0] != self.allowed.shape[1]:
            raise ValueError(f"edge mask must be square, got {self.allowed.shape}")
        if not self.allowed.any(axis=1).all():
            raise dc.DegenerateRowError("edge mask has a node that receives from nobody")

    @property
    def size(self) -> int:
        return self.allowed.shape[0]

    def permuted(self, perm) -> "EdgeMask":
        perm = np.asarray(perm)
        return EdgeMask(self.allowed[np.ix_(perm, perm)])


def build_full_mask(m: int) -> EdgeMask:
    if m < 1:
        raise ValueError(f"graph needs at least one node, got {m}")
    return EdgeMask(np.ones((m, m), dtype=bool))


def build_ignn_mask(n_way: int, k_shot: int, mode=MaskMode.INDUCTIVE, n_queries: int = 1) -> EdgeMask:
    """Instance-graph mask: supports first (N*K nodes), then the query node(s).

    Supports exchange messages freely but never receive from a query. A query
    receives from every support and itself; transductive queries also receive
    from each other.
    """
    mode = MaskMode(mode)
    if mode is MaskMode.INDUCTIVE and n_queries != 1:
        raise ValueError(f"inductive instance graph holds exactly one query, got {n_queries}")
    if n_queries < 1 or n_way < 1 or k_shot < 1:
        raise ValueError("n_way, k_shot and n_queries must be positive")
    ns = n_way * k_shot
    m = ns + n_queries
    allowed = np.zeros((m, m), dtype=bool)
    allowed[:ns, :ns] = True
    allowed[ns:, :ns] = True
    if mode is MaskMode.TRANSDUCTIVE:
        allowed[ns:, ns:] = True
    else:
        allowed[ns:, ns:] = np.eye(n_queries, dtype=bool)
    return EdgeMask(allowed)


@dataclass
class GraphLayerParams:
    """One graph layer: ``phi`` (transform), adjacency ``psi``, optional residual head.

    ``out_w``/``out_b`` and the layer-norm pair are ``None`` for the plain
    graph convolution of the label-propagation baseline.
    """

    phi_w: Param
    phi_b: Param
    adjacency: AdjacencyOperator
    out_w: Param | None = None
    out_b: Param | None = None
    ln_scale: Param | None = None
    ln_shift: Param | None = None
    slope: float = 0.2

    @classmethod
    def create(cls, d: int, rng: np.random.Generator, prefix: str, *, residual: bool = True,
               operator=AdjacencyKind.INNER_PRODUCT, slope: float = 0.2,
               phi_scale: float = 0.5, out_scale: float = 0.1) -> "GraphLayerParams":
        layer = cls(
            phi_w=Param(f"{prefix}.phi_w", rng.normal(0.0, phi_scale / np.sqrt(d), (d, d))),
            phi_b=Param(f"{prefix}.phi_b", np.zeros(d)),
            adjacency=AdjacencyOperator.create(operator, d, rng, f"{prefix}.adj", slope),
            slope=slope,
        )
        if residual:
            layer.out_w = Param(f"{prefix}.out_w", rng.normal(0.0, out_scale / np.sqrt(d), (d, d)))
            layer.out_b = Param(f"{prefix}.out_b", np.zeros(d))
            layer.ln_scale = Param(f"{prefix}.ln_scale", np.ones(d))
            layer.ln_shift = Param(f"{prefix}.ln_shift", np.zeros(d))
        return layer

    @property
    def dim(self) -> int:
        return self.phi_w.shape[0]

    @property
    def residual(self) -> bool:
        return self.out_w is not None

    def params(self) -> list[Param]:
        out = [self.phi_w, self.phi_b]
        if self.residual:
            out += [self.out_w, self.out_b, self.ln_scale, self.ln_shift]
        return out + list(self.adjacency.params.values())

    def transform(self, f: Tensor) -> Tensor:
        return dc.matmul(f, self.phi_w) + self.phi_b

    def project(self, h: Tensor) -> Tensor:
        return dc.matmul(h, self.out_w) + self.out_b

    def norm(self, f: Tensor) -> Tensor:
        return dc.layer_norm(f, self.ln_scale, self.ln_shift)


def _check_nodes(f: Tensor, layer: GraphLayerParams, mask: EdgeMask | None = None) -> None:
    if f.ndim != 2 or f.shape[1] != layer.dim:
        raise dc.ShapeError(f"node features {f.shape} do not match layer dim {layer.dim}")
    if mask is not None and mask.size != f.shape[0]:
        raise dc.ShapeError(f"mask covers {mask.size} nodes, features have {f.shape[0]}")


def _adjacency_from_transformed(phi_f: Tensor, layer: GraphLayerParams, mask: EdgeMask) -> Tensor:
    scores = layer.adjacency.pair_scores(phi_f, phi_f)
    return dc.softmax_rows(scores, mask.allowed)


def compute_adjacency(f: Tensor, layer: GraphLayerParams, mask: EdgeMask) -> Tensor:
    """Row-normalised adjacency ``A[i, j] = softmax_j psi(phi(f_i), phi(f_j))`` over allowed j."""
    _check_nodes(f, layer, mask)
    if f.shape[0] < 2:
        raise ValueError("adjacency needs at least two nodes")
    return _adjacency_from_transformed(layer.transform(f), layer, mask)


def graph_conv(f: Tensor, a: Tensor, layer: GraphLayerParams) -> Tensor:
    """``rho(A @ phi(F))`` with a leaky rectifier as ``rho``."""
    _check_nodes(f, layer)
    if a.shape != (f.shape[0], f.shape[0]):
        raise dc.ShapeError(f"adjacency {a.shape} does not match {f.shape[0]} nodes")
    return dc.leaky_relu(dc.matmul(a, layer.transform(f)), layer.slope)


def propagate(f: Tensor, layer: GraphLayerParams, mask: EdgeMask) -> Tensor:
    """Adjacency + convolution with ``phi(F)`` computed once."""
    _check_nodes(f, layer, mask)
    phi_f = layer.transform(f)
    a = _adjacency_from_transformed(phi_f, layer, mask)
    return dc.leaky_relu(dc.matmul(a, phi_f), layer.slope)


def residual_update(f: Tensor, layer: GraphLayerParams, mask: EdgeMask) -> Tensor:
    """``LayerNorm(F + out_proj(graph_conv(F, A(F))))``."""
    if not layer.residual:
        raise ValueError("residual_update needs a layer with an output projection and layer norm")
    return layer.norm(f + layer.project(propagate(f, layer, mask)))


def receive_from(x: Tensor, senders: Tensor, layer: GraphLayerParams) -> Tensor:
    """Residual update of receiver nodes ``x`` that listen to ``senders`` and themselves.

    Row i equals the row of node i in a graph made of ``senders`` plus node i
    alone (senders first), bitwise. This is how one-directional support->query
    messages are batched over queries.
    """
    _check_nodes(x, layer)
    _check_nodes(senders, layer)
    phi_x = layer.transform(x)
    phi_s = layer.transform(senders)
    scores = dc.concat([layer.adjacency.pair_scores(phi_x, phi_s),
                        layer.adjacency.self_scores(phi_x)], axis=1)
    a = dc.softmax_rows(scores)
    ns = senders.shape[0]
    agg = dc.matmul(a[:, :ns], phi_s) + a[:, ns:] * phi_x
    h = dc.leaky_relu(agg, layer.slope)
    return layer.norm(x + layer.project(h))

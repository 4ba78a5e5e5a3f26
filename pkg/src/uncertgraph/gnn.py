"""Refinement network: two PNA blocks, one GCN layer, focal loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DomainError, ShapeError, UncertGraphError
from .neighbors import NeighborConfig, rewire
from .tensor import Tensor
from .uncertainty import EdgeWeightConfig, RefinementGraph

AGGREGATORS = ("mean", "min", "max", "std")
SCALERS = ("identity", "amplification", "attenuation")
STD_EPS = 1e-8


@dataclass(frozen=True)
class FocalLossConfig:
    gamma: float = 2.0
    alpha: float = 1.0

    def validate(self) -> None:
        if self.gamma < 0 or self.alpha <= 0:
            raise DomainError("focal loss needs gamma >= 0 and alpha > 0")


@dataclass
class EdgeIndex:
    """Edges sorted by destination with CSR boundaries and row-normalised weights."""

    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    indptr: np.ndarray
    num_nodes: int

    @classmethod
    def build(cls, src, dst, weight, num_nodes: int) -> "EdgeIndex":
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        weight = np.asarray(weight, dtype=np.float32)
        order = np.argsort(dst, kind="stable")
        src, dst, weight = src[order], dst[order], weight[order]
        indptr = np.searchsorted(dst, np.arange(num_nodes + 1)).astype(np.int64)
        return cls(src, dst, weight, indptr, num_nodes)

    @property
    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def normalized_weight(self) -> np.ndarray:
        total = np.add.reduceat(self.weight.astype(np.float64), self.indptr[:-1])
        return (self.weight / total[self.dst]).astype(np.float32)


def with_self_loops(src, dst, weight, num_nodes: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    loops = np.arange(num_nodes)
    return (
        np.concatenate([src, loops]),
        np.concatenate([dst, loops]),
        np.concatenate([weight, np.ones(num_nodes, dtype=np.float32)]),
    )


def degree_normalizer(graphs) -> float:
    """Mean of log(d + 1) over all nodes, degrees counting the self-loop."""
    logs = []
    for g in graphs:
        deg = np.bincount(g.dst, minlength=g.num_nodes) + 1
        logs.append(np.log(deg + 1.0))
    return float(np.mean(np.concatenate(logs)))


def pna_aggregate(x: Tensor, edges: EdgeIndex, delta: float) -> Tensor:
    """Concatenated [aggregator x scaler] features, shape (n, 12 * F).

    Layout is scaler-major: all four aggregators under the identity scaler,
    then under amplification, then attenuation.
    """
    if np.any(edges.degree == 0):
        raise UncertGraphError("every node needs at least one in-edge (add self-loops)")
    if delta <= 0:
        raise DomainError("degree normalizer must be positive")
    wn = edges.normalized_weight()[:, None]
    msgs = T.take(x, edges.src, axis=0)
    mean = T.segment_sum(T.mul_const(msgs, wn), edges.indptr)
    dev = T.sub(msgs, T.take(mean, edges.dst, axis=0))
    var = T.segment_sum(T.mul_const(T.square(dev), wn), edges.indptr)
    std = T.sqrt(T.add_const(var, STD_EPS))
    lo = T.segment_min(msgs, edges.indptr)
    hi = T.segment_max(msgs, edges.indptr)
    aggs = [mean, lo, hi, std]
    logd = np.log(edges.degree.astype(np.float64) + 1.0)[:, None]
    amp = (logd / delta).astype(np.float32)
    att = (delta / logd).astype(np.float32)
    scaled = aggs + [T.mul_const(a, amp) for a in aggs] + [T.mul_const(a, att) for a in aggs]
    return T.concat(scaled, axis=1)


def pna_block(x: Tensor, edges: EdgeIndex, delta: float, weight: Tensor, bias: Tensor, root: Tensor | None = None) -> Tensor:
    """relu(aggregates @ weight + x @ root + bias).

    The root map passes the node's own features past the aggregators, so a
    node with many dissimilar neighbours still sees itself.
    """
    out = T.matmul(pna_aggregate(x, edges, delta), weight)
    if root is not None:
        out = T.add(out, T.matmul(x, root))
    return T.relu(T.add_bias(out, bias))


def gcn_norm(src, dst, weight, num_nodes: int) -> EdgeIndex:
    """Symmetric normalisation of (weighted adjacency + I) as an edge list."""
    deg = np.bincount(dst, weights=weight.astype(np.float64), minlength=num_nodes) + 1.0
    s, d, w = with_self_loops(src, dst, weight, num_nodes)
    norm = w.astype(np.float64) / np.sqrt(deg[s] * deg[d])
    return EdgeIndex.build(s, d, norm.astype(np.float32), num_nodes)


def gcn_layer(h: Tensor, src, dst, weight, w: Tensor, b: Tensor) -> Tensor:
    """D^-1/2 (A + I) D^-1/2 H W + b with A[dst, src] = edge weight."""
    n = h.shape[0]
    if n == 0:
        raise UncertGraphError("gcn_layer on an empty graph")
    norm = gcn_norm(np.asarray(src), np.asarray(dst), np.asarray(weight, dtype=np.float32), n)
    hw = T.matmul(h, w)
    msgs = T.mul_const(T.take(hw, norm.src, axis=0), norm.weight[:, None])
    return T.add_bias(T.segment_sum(msgs, norm.indptr), b)


def focal_loss(logits: Tensor, labels: np.ndarray, mask: np.ndarray, cfg: FocalLossConfig = FocalLossConfig()) -> Tensor:
    """Mean over masked rows of -alpha (1 - p_t)^gamma ln p_t."""
    cfg.validate()
    rows = np.flatnonzero(np.asarray(mask, dtype=bool))
    if len(rows) == 0:
        raise UncertGraphError("focal loss needs at least one node in the mask")
    n, m = logits.shape
    y = np.asarray(labels, dtype=np.int64)[rows]
    if y.min() < 0 or y.max() >= m:
        raise DomainError("masked labels must be valid class indices")
    logp = T.reshape(T.log_softmax(logits, axis=1), (n * m,))
    logp_t = T.take(logp, rows * m + y, axis=0)
    if cfg.gamma == 0:
        per_node = logp_t
    else:
        # exp of a non-positive float32 never exceeds 1, so this stays >= 0
        one_minus = T.add_const(T.scale(T.exp(logp_t), -1.0), 1.0)
        per_node = T.mul(T.pow_const(one_minus, cfg.gamma), logp_t)
    return T.scale(T.mean(per_node), -cfg.alpha)


@dataclass
class GnnOutput:
    probs: Tensor
    logits: Tensor
    graph: RefinementGraph  # graph carrying the final dynamic edge set
    hidden: list = field(default_factory=list)


class GnnModel:
    def __init__(
        self,
        in_width: int = 3,
        hidden: int = 32,
        classes: int = 2,
        delta: float = 1.0,
        seed: int = 0,
    ):
        if delta <= 0:
            raise DomainError("degree normalizer must be positive")
        rng = np.random.default_rng(seed)
        n_mix = len(AGGREGATORS) * len(SCALERS)

        def glorot(fan_in, fan_out):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return Tensor(rng.uniform(-lim, lim, (fan_in, fan_out)), True)

        self.params = {
            "pna1.w": glorot(n_mix * in_width, hidden),
            "pna1.root": glorot(in_width, hidden),
            "pna1.b": Tensor(np.zeros(hidden), True),
            "pna2.w": glorot(n_mix * hidden, hidden),
            "pna2.root": glorot(hidden, hidden),
            "pna2.b": Tensor(np.zeros(hidden), True),
            "gcn.w": glorot(hidden, classes),
            "gcn.b": Tensor(np.zeros(classes), True),
        }
        self.delta = float(delta)
        self.config = {"in_width": in_width, "hidden": hidden, "classes": classes, "seed": seed}

    @property
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def copy(self) -> "GnnModel":
        other = GnnModel.__new__(GnnModel)
        other.params = {k: Tensor(v.data.copy(), True) for k, v in self.params.items()}
        other.delta = self.delta
        other.config = dict(self.config)
        return other


# Recently built edge indices; entries hold the edge arrays themselves, so an
# ``id`` in a key can never be recycled while its entry is alive.
_EDGE_CACHE: list[tuple[tuple, tuple, EdgeIndex]] = []
_EDGE_CACHE_SIZE = 8


def _pna_edges(graph: RefinementGraph) -> EdgeIndex:
    arrays = (graph.src, graph.dst, graph.weight)
    key = tuple(id(a) for a in arrays) + (graph.num_nodes,)
    for k, _, edges in _EDGE_CACHE:
        if k == key:
            return edges
    s, d, w = with_self_loops(graph.src, graph.dst, graph.weight, graph.num_nodes)
    edges = EdgeIndex.build(s, d, w, graph.num_nodes)
    _EDGE_CACHE.append((key, arrays, edges))
    del _EDGE_CACHE[:-_EDGE_CACHE_SIZE]
    return edges


def gnn_forward(
    model: GnnModel,
    graph: RefinementGraph,
    cfg: NeighborConfig = NeighborConfig(),
    weight_cfg: EdgeWeightConfig = EdgeWeightConfig(),
) -> GnnOutput:
    """block1 -> rewire -> block2 -> rewire -> GCN -> softmax.

    Re-wiring only happens for per-block policies; the returned graph holds
    the edge set the GCN layer actually used.
    """
    if graph.features.shape[1] != model.config["in_width"]:
        raise ShapeError(f"graph has {graph.features.shape[1]} features, model expects {model.config['in_width']}")
    p = model.params
    x = Tensor(graph.features)
    h1 = pna_block(x, _pna_edges(graph), model.delta, p["pna1.w"], p["pna1.b"], p["pna1.root"])
    graph = rewire(graph, h1.data, cfg, weight_cfg)
    h2 = pna_block(h1, _pna_edges(graph), model.delta, p["pna2.w"], p["pna2.b"], p["pna2.root"])
    graph = rewire(graph, h2.data, cfg, weight_cfg)
    logits = gcn_layer(h2, graph.src, graph.dst, graph.weight, p["gcn.w"], p["gcn.b"])
    return GnnOutput(T.softmax(logits, axis=1), logits, graph, [h1, h2])

"""Neighbour selection: feature-space kNN, farthest point sampling, intra-graph,
inter-graph and random edges, and per-block re-wiring."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DomainError, UncertGraphError
from .uncertainty import (
    DYNAMIC_KINDS,
    INTER,
    INTRA,
    RANDOM,
    SIX,
    EdgeWeightConfig,
    RefinementGraph,
    graph_edge_weights,
)

MODES = ("six_only", "random16", "intra", "inter")
REWIRE = ("static", "per_block")


@dataclass(frozen=True)
class NeighborConfig:
    mode: str = "intra"
    k: int = 5
    fps_ratio: float = 1.0 / 40.0
    rewire: str | None = None  # None picks the mode's default
    random_count: int = 16

    def validate(self) -> None:
        if self.mode not in MODES:
            raise DomainError(f"unknown neighbour mode {self.mode!r}")
        if self.k < 1:
            raise DomainError("k must be at least 1")
        if not 0.0 < self.fps_ratio <= 1.0:
            raise DomainError("fps_ratio must lie in (0, 1]")
        if self.rewire is not None and self.rewire not in REWIRE:
            raise DomainError(f"unknown rewire policy {self.rewire!r}")

    @property
    def rewire_policy(self) -> str:
        if self.rewire is not None:
            return self.rewire
        return "per_block" if self.mode == "inter" else "static"

    @property
    def dynamic(self) -> bool:
        return self.mode in ("intra", "inter") and self.rewire_policy == "per_block"


# ---------------------------------------------------------------- kNN


def _pair_sqdist(q: np.ndarray, c: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    diff = q[rows] - c[cols]
    return np.einsum("ij,ij->i", diff, diff)


def _first_k(rows: np.ndarray, cols: np.ndarray, d: np.ndarray, n_rows: int, k: int) -> np.ndarray:
    """Per row, the ``k`` candidates of smallest (distance, index); -1 pads."""
    out = np.full((n_rows, k), -1, dtype=np.int64)
    keep = np.isfinite(d)
    rows, cols, d = rows[keep], cols[keep], d[keep]
    order = np.lexsort((cols, d, rows))
    rows, cols = rows[order], cols[order]
    starts = np.searchsorted(rows, np.arange(n_rows + 1))
    rank = np.arange(len(rows)) - starts[rows]
    sel = rank < k
    out[rows[sel], rank[sel]] = cols[sel]
    return out


def knn_select(
    query: np.ndarray,
    candidates: np.ndarray,
    k: int,
    banned: Sequence[np.ndarray] | None = None,
    chunk: int = 1024,
) -> np.ndarray:
    """Indices of the ``k`` nearest candidates per query row.

    Distances are Euclidean in float64, ties go to the lower candidate index,
    and ``banned[i]`` lists candidates query ``i`` may not pick. Rows with
    fewer than ``k`` admissible candidates are padded with -1.

    A float32 Gram-matrix pass shortlists candidates, which are ranked on
    exact float64 differences. Where the shortlist cannot be proven to hold
    the answer (near-ties, duplicates), every candidate within the Gram error
    bound of the current k-th distance is re-ranked exactly.
    """
    q = np.asarray(query, dtype=np.float64)
    c = np.asarray(candidates, dtype=np.float64)
    nq, nc = len(q), len(c)
    out = np.full((nq, k), -1, dtype=np.int64)
    if nq == 0 or nc == 0:
        return out
    q32, c32 = q.astype(np.float32), c.astype(np.float32)
    q_sq = np.einsum("ij,ij->i", q, q)
    c_sq = np.einsum("ij,ij->i", c, c)
    c_sq32 = c_sq.astype(np.float32)
    # bound on the float32 Gram error relative to |q|^2 + |c|^2, with a 4x margin
    tol = 4.0 * (q.shape[1] + 4) * float(np.finfo(np.float32).eps)
    width = min(nc, k + 8)
    for start in range(0, nq, chunk):
        stop = min(start + chunk, nq)
        nb = stop - start
        # squared distance minus the per-row constant |q|^2
        approx = q32[start:stop] @ c32.T
        approx *= -2.0
        approx += c_sq32[None, :]
        if banned is not None:
            for r in range(nb):
                b = banned[start + r]
                if len(b):
                    approx[r, b] = np.inf
        eps = tol * (q_sq[start:stop] + c_sq.max() + 1.0)
        row_ids = np.repeat(np.arange(nb), width)
        short = np.argpartition(approx, width - 1, axis=1)[:, :width]
        boundary = np.take_along_axis(approx, short, axis=1).max(axis=1).astype(np.float64)
        cols = short.ravel()
        d = _pair_sqdist(q, c, start + row_ids, cols)
        d[~np.isfinite(approx[row_ids, cols])] = np.inf
        pick = _first_k(row_ids, cols, d, nb, k)
        kth = np.full(nb, np.inf)
        full = pick[:, -1] >= 0
        kth[full] = _pair_sqdist(q, c, start + np.flatnonzero(full), pick[full, -1])
        # a candidate off the shortlist has exact distance >= boundary + |q|^2 - eps
        if width < nc:
            unsafe = np.flatnonzero(~(kth - q_sq[start:stop] + 2 * eps < boundary))
        else:
            unsafe = np.zeros(0, dtype=np.int64)
        if len(unsafe):
            limit = kth[unsafe] - q_sq[start + unsafe] + 2 * eps[unsafe]
            sub = approx[unsafe]
            r, col = np.nonzero((sub <= limit[:, None]) & np.isfinite(sub))
            pick[unsafe] = _first_k(r, col, _pair_sqdist(q, c, start + unsafe[r], col), len(unsafe), k)
        out[start:stop] = pick
    return out


def knn_feature(query_features: np.ndarray, candidate_features: np.ndarray, k: int, exclude_self: bool = False) -> np.ndarray:
    """k nearest candidates per query; with ``exclude_self`` row i skips candidate i."""
    n_cand = len(candidate_features)
    avail = n_cand - 1 if exclude_self else n_cand
    if k < 1 or k > avail:
        raise DomainError(f"k={k} exceeds the {avail} available candidates")
    banned = [np.array([i]) for i in range(len(query_features))] if exclude_self else None
    return knn_select(query_features, candidate_features, k, banned)


# ---------------------------------------------------------------- FPS


def fps_count(n: int, ratio: float) -> int:
    return max(1, math.ceil(round(n * ratio, 9)))


def farthest_point_sample(features: np.ndarray, ratio: float, seed: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; ``ceil(N * ratio)`` indices in pick order.

    The first index is drawn from ``seed``; every later pick maximises the
    squared distance to the chosen set (lowest index on ties).
    """
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if n == 0:
        raise UncertGraphError("farthest point sampling on an empty set")
    if not 0.0 < ratio <= 1.0:
        raise DomainError(f"ratio must lie in (0, 1], got {ratio}")
    m = fps_count(n, ratio)
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = np.random.default_rng(seed).integers(n)
    dist = np.full(n, np.inf)
    for t in range(1, m):
        d = x - x[chosen[t - 1]]
        dist = np.minimum(dist, np.sum(d * d, axis=1))
        chosen[t] = int(np.argmax(dist))
    return chosen


@dataclass
class TrainGraphBank:
    graphs: list[RefinementGraph]
    samples: list[np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for g, s in zip(self.graphs, self.samples):
            if len(s) and (s.min() < 0 or s.max() >= g.num_nodes):
                raise DomainError("bank sample index out of range")

    @classmethod
    def build(cls, graphs: Sequence[RefinementGraph], ratio: float = 1.0 / 40.0, seed: int = 0) -> "TrainGraphBank":
        samples = [farthest_point_sample(g.features, ratio, seed + i) for i, g in enumerate(graphs)]
        return cls(list(graphs), samples, {"fps_ratio": ratio, "seed": seed})

    def __len__(self) -> int:
        return int(sum(len(s) for s in self.samples))

    def pooled(self, exclude: str | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Concatenated (features, labels, coords, source graph) of all samples."""
        feats, labels, coords, origin = [], [], [], []
        for gi, (g, s) in enumerate(zip(self.graphs, self.samples)):
            if exclude is not None and g.volume_id == exclude:
                continue
            feats.append(g.features[s])
            labels.append(g.labels[s])
            coords.append(g.coords[s])
            origin.append(np.full(len(s), gi))
        if not feats:
            raise UncertGraphError("train-graph bank is empty")
        return (np.concatenate(feats), np.concatenate(labels), np.concatenate(coords), np.concatenate(origin))


# ---------------------------------------------------------------- edge builders


def _in_neighbors(graph: RefinementGraph, kinds=(SIX,)) -> list[np.ndarray]:
    sel = graph.edges_of(kinds)
    src, dst = graph.src[sel], graph.dst[sel]
    order = np.argsort(dst, kind="stable")
    bounds = np.searchsorted(dst[order], np.arange(graph.num_nodes + 1))
    s = src[order]
    return [s[bounds[i] : bounds[i + 1]] for i in range(graph.num_nodes)]


def _append(graph: RefinementGraph, src, dst, w, kind: int) -> RefinementGraph:
    return graph.with_edges(
        np.concatenate([graph.src, src]),
        np.concatenate([graph.dst, dst]),
        np.concatenate([graph.weight, w]),
        np.concatenate([graph.kind, np.full(len(src), kind, dtype=np.uint8)]),
    )


def strip_dynamic(graph: RefinementGraph) -> RefinementGraph:
    keep = ~graph.edges_of(DYNAMIC_KINDS)
    return graph.with_edges(graph.src[keep], graph.dst[keep], graph.weight[keep], graph.kind[keep])


def add_intra_edges(
    graph: RefinementGraph,
    features: np.ndarray | None = None,
    k: int = 5,
    weight_cfg: EdgeWeightConfig = EdgeWeightConfig(),
) -> RefinementGraph:
    """Give every own node ``k`` in-edges from its nearest nodes in feature space.

    Candidates exclude the node itself and nodes already linked to it by a
    6-neighbourhood edge. Imported bank nodes neither query nor get picked.
    """
    feats = graph.features if features is None else np.asarray(features)
    own = np.flatnonzero(graph.own)
    n = len(own)
    if n < k + 1:
        warnings.warn(f"graph has {n} nodes; using k={n - 1}", stacklevel=2)
        k = n - 1
    if k < 1:
        return graph
    local = np.full(graph.num_nodes, -1, dtype=np.int64)
    local[own] = np.arange(n)
    existing = _in_neighbors(graph)
    banned = []
    for i in own:
        nb = local[existing[i]]
        banned.append(np.concatenate([[local[i]], nb[nb >= 0]]))
    picks = knn_select(feats[own], feats[own], k, banned)
    dst = np.repeat(own, k)
    src_local = picks.reshape(-1)
    ok = src_local >= 0
    src, dst = own[src_local[ok]], dst[ok]
    w = graph_edge_weights(graph, src, dst, weight_cfg)
    return _append(graph, src, dst, w, INTRA)


def import_bank(graph: RefinementGraph, bank: TrainGraphBank, exclude_volume: str | None = None) -> RefinementGraph:
    """Append every FPS-sampled bank node to ``graph`` as an imported, labelled node."""
    if len(bank) == 0:
        raise UncertGraphError("train-graph bank is empty")
    feats, labels, coords, _ = bank.pooled(exclude=exclude_volume)
    m = len(feats)
    return replace(
        graph,
        coords=np.concatenate([graph.coords, coords]),
        features=np.concatenate([graph.features, feats.astype(np.float32)]),
        uncertain=np.concatenate([graph.uncertain, np.zeros(m, dtype=bool)]),
        labels=np.concatenate([graph.labels, labels.astype(np.int8)]),
        imported=np.concatenate([graph.imported, np.ones(m, dtype=bool)]),
    )


def connect_inter(
    graph: RefinementGraph,
    features: np.ndarray | None = None,
    k: int = 5,
    weight_cfg: EdgeWeightConfig = EdgeWeightConfig(),
) -> RefinementGraph:
    """Link each own node to its ``k`` nearest imported nodes (edges bank -> own)."""
    feats = graph.features if features is None else np.asarray(features)
    own = np.flatnonzero(graph.own)
    bank = np.flatnonzero(graph.imported)
    if len(bank) == 0:
        raise UncertGraphError("no imported bank nodes to connect")
    k = min(k, len(bank))
    picks = knn_select(feats[own], feats[bank], k)
    src = bank[picks.reshape(-1)]
    dst = np.repeat(own, k)
    w = graph_edge_weights(graph, src, dst, weight_cfg, use_position=False)
    return _append(graph, src, dst, w, INTER)


def add_inter_edges(
    graph: RefinementGraph,
    bank: TrainGraphBank,
    k: int = 5,
    weight_cfg: EdgeWeightConfig = EdgeWeightConfig(),
    exclude_volume: str | None = None,
) -> RefinementGraph:
    """Import the pooled bank samples and add ``k`` bank -> node edges per own node."""
    return connect_inter(import_bank(graph, bank, exclude_volume), None, k, weight_cfg)


def add_random_edges(
    graph: RefinementGraph,
    count: int = 16,
    seed: int = 0,
    weight_cfg: EdgeWeightConfig = EdgeWeightConfig(),
) -> RefinementGraph:
    """Give every own node ``count`` in-edges from distinct, uniformly drawn partners.

    Partners exclude the node itself and its existing 6-neighbours.
    """
    own = np.flatnonzero(graph.own)
    n = len(own)
    if n <= count:
        warnings.warn(f"graph has {n} nodes; drawing {n - 1} random partners", stacklevel=2)
        count = n - 1
    if count < 1:
        return graph
    rng = np.random.default_rng(seed)
    existing = _in_neighbors(graph)
    src = np.empty(n * count, dtype=np.int64)
    for r, i in enumerate(own):
        taken = {int(i), *existing[i].tolist()}
        need = min(count, n - len(taken))
        picked: list[int] = []
        seen = set(taken)
        while len(picked) < need:
            for j in own[rng.integers(0, n, size=2 * (need - len(picked)) + 2)]:
                j = int(j)
                if j not in seen:
                    seen.add(j)
                    picked.append(j)
                    if len(picked) == need:
                        break
        src[r * count : r * count + need] = picked
        src[r * count + need : (r + 1) * count] = -1
    dst = np.repeat(own, count)
    ok = src >= 0
    src, dst = src[ok], dst[ok]
    w = graph_edge_weights(graph, src, dst, weight_cfg)
    return _append(graph, src, dst, w, RANDOM)


def augment(
    graph: RefinementGraph,
    cfg: NeighborConfig,
    bank: TrainGraphBank | None = None,
    seed: int = 0,
    weight_cfg: EdgeWeightConfig = EdgeWeightConfig(),
    exclude_volume: str | None = None,
) -> RefinementGraph:
    """Initial neighbour augmentation for ``cfg.mode`` on input node features."""
    cfg.validate()
    if cfg.mode == "six_only":
        return graph
    if cfg.mode == "random16":
        return add_random_edges(graph, cfg.random_count, seed, weight_cfg)
    if cfg.mode == "intra":
        return add_intra_edges(graph, None, cfg.k, weight_cfg)
    if bank is None:
        raise UncertGraphError("inter mode needs a train-graph bank")
    return add_inter_edges(graph, bank, cfg.k, weight_cfg, exclude_volume)


def rewire(
    graph: RefinementGraph,
    hidden: np.ndarray,
    cfg: NeighborConfig,
    weight_cfg: EdgeWeightConfig = EdgeWeightConfig(),
) -> RefinementGraph:
    """Replace intra/inter edges with kNN edges in the space of ``hidden``.

    6-neighbourhood and random edges persist. Static policies and modes
    without feature-space neighbours leave the graph untouched.
    """
    if not cfg.dynamic:
        return graph
    keep = ~graph.edges_of((INTRA, INTER))
    base = graph.with_edges(graph.src[keep], graph.dst[keep], graph.weight[keep], graph.kind[keep])
    if cfg.mode == "intra":
        return add_intra_edges(base, hidden, cfg.k, weight_cfg)
    return connect_inter(base, hidden, cfg.k, weight_cfg)


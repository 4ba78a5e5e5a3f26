"""MCDO expectation/entropy fields and refinement-graph construction.

Voxel coordinates are (z, y, x) integer triples in voxel units. Graph edges
are directed ``src -> dst`` (messages flow from ``src`` into ``dst``); the
6-neighbourhood builder emits both directions of every spatial adjacency.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.special import entr

from .errors import DomainError, ShapeError, UncertGraphError

PROB_FLOOR = 1e-7

# edge kinds
SIX = 0
INTRA = 1
INTER = 2
RANDOM = 3
DYNAMIC_KINDS = (INTRA, INTER, RANDOM)

UNLABELED = -1

_OFFSETS = np.array([(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)], dtype=np.int64)


class EmptyUncertaintyWarning(UserWarning):
    """No voxel exceeded the entropy threshold; the volume passes through."""


@dataclass
class ProbabilityStack:
    """T stochastic passes of per-voxel class probabilities, shape (T, D, H, W, M)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs)
        if p.ndim != 5:
            raise ShapeError(f"probability stack must be (T, D, H, W, M), got {p.shape}")
        if p.shape[0] < 2:
            raise DomainError(f"MCDO needs at least 2 passes, got T={p.shape[0]}")
        if not np.allclose(p.sum(axis=-1, dtype=np.float64), 1.0, atol=1e-5):
            raise DomainError("each pass must hold class simplices summing to 1")
        self.probs = p

    @property
    def passes(self) -> int:
        return self.probs.shape[0]


@dataclass
class UncertaintyField:
    expectation: np.ndarray  # (D, H, W, M)
    entropy: np.ndarray  # (D, H, W), nats

    @property
    def foreground(self) -> np.ndarray:
        return self.expectation[..., 1]

    def prediction(self) -> np.ndarray:
        return (self.expectation.argmax(axis=-1) == 1).astype(np.uint8)


@dataclass(frozen=True)
class EdgeWeightConfig:
    sigma_int: float = 1.0
    sigma_pos: float = 1.0
    lam_div: float = 1.0 / 3.0
    lam_int: float = 1.0 / 3.0
    lam_pos: float = 1.0 / 3.0

    def validate(self) -> None:
        if self.sigma_int <= 0 or self.sigma_pos <= 0:
            raise DomainError("kernel bandwidths sigma_int, sigma_pos must be positive")
        lams = (self.lam_div, self.lam_int, self.lam_pos)
        if min(lams) < 0 or not math.isclose(sum(lams), 1.0, abs_tol=1e-9):
            raise DomainError(f"mixing coefficients lam_div, lam_int, lam_pos must be non-negative and sum to 1, got {lams}")


@dataclass
class NodeSelection:
    coords: np.ndarray  # (n, 3) int64, raster order
    uncertain: np.ndarray  # (n,) bool
    passthrough: bool = False

    def __len__(self) -> int:
        return len(self.coords)


@dataclass
class RefinementGraph:
    coords: np.ndarray  # (n, 3) int64
    features: np.ndarray  # (n, F) float32: [E foreground.., U, V]
    uncertain: np.ndarray  # (n,) bool
    labels: np.ndarray  # (n,) int8, UNLABELED where unknown
    src: np.ndarray  # (e,) int64
    dst: np.ndarray  # (e,) int64
    weight: np.ndarray  # (e,) float32
    kind: np.ndarray  # (e,) uint8
    imported: np.ndarray = None  # (n,) bool, nodes copied in from a train-graph bank
    volume_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.imported is None:
            self.imported = np.zeros(len(self.coords), dtype=bool)

    @property
    def num_nodes(self) -> int:
        return len(self.coords)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def own(self) -> np.ndarray:
        return ~self.imported

    def expectation(self) -> np.ndarray:
        """Full class simplices reconstructed from the stored M-1 values."""
        m1 = self.features.shape[1] - 2
        rest = self.features[:, :m1].astype(np.float64)
        return np.concatenate([1.0 - rest.sum(axis=1, keepdims=True), rest], axis=1)

    @property
    def entropy(self) -> np.ndarray:
        return self.features[:, -2]

    @property
    def intensity(self) -> np.ndarray:
        return self.features[:, -1]

    def with_edges(self, src, dst, weight, kind) -> "RefinementGraph":
        return replace(
            self,
            src=np.asarray(src, dtype=np.int64),
            dst=np.asarray(dst, dtype=np.int64),
            weight=np.asarray(weight, dtype=np.float32),
            kind=np.asarray(kind, dtype=np.uint8),
        )

    def edges_of(self, kinds) -> np.ndarray:
        return np.isin(self.kind, kinds)


# ---------------------------------------------------------------- fields


def mcdo_expectation(stack: ProbabilityStack | np.ndarray) -> np.ndarray:
    """Mean of the T stochastic class-probability passes (float64)."""
    if not isinstance(stack, ProbabilityStack):
        stack = ProbabilityStack(stack)
    return stack.probs.astype(np.float64).mean(axis=0)


def entropy(expectation: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats over the last axis, with 0 ln 0 = 0."""
    e = np.asarray(expectation, dtype=np.float64)
    if np.any(e < 0):
        raise DomainError("probabilities must be non-negative")
    return entr(e).sum(axis=-1)


def uncertainty_field(stack: ProbabilityStack | np.ndarray) -> UncertaintyField:
    e = mcdo_expectation(stack)
    return UncertaintyField(expectation=e, entropy=entropy(e))


def select_nodes(entropy_field: np.ndarray, prediction_mask: np.ndarray, tau: float, classes: int = 2) -> NodeSelection:
    """Uncertain voxels (entropy > tau) plus their certain 6-neighbour ring.

    Both sets are clipped to the bounding box of (prediction | uncertain)
    grown by two voxels. An empty uncertain set yields a pass-through
    selection and an :class:`EmptyUncertaintyWarning`.
    """
    u = np.asarray(entropy_field)
    if not 0.0 < tau < math.log(classes):
        raise DomainError(f"entropy threshold must lie in (0, ln {classes}), got {tau}")
    if prediction_mask.shape != u.shape:
        raise ShapeError(f"prediction mask {prediction_mask.shape} does not match field {u.shape}")
    uncertain = u > tau
    if not uncertain.any():
        warnings.warn("no uncertain voxels; graph skipped", EmptyUncertaintyWarning, stacklevel=2)
        return NodeSelection(np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=bool), passthrough=True)
    ring = ndimage.binary_dilation(uncertain, structure=ndimage.generate_binary_structure(3, 1))
    certain = ring & ~uncertain & (u <= tau)

    box = np.zeros_like(uncertain)
    pts = np.argwhere(uncertain | (prediction_mask > 0))
    lo = np.maximum(pts.min(axis=0) - 2, 0)
    hi = np.minimum(pts.max(axis=0) + 3, u.shape)
    box[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = True

    keep = (uncertain | certain) & box
    coords = np.argwhere(keep).astype(np.int64)
    return NodeSelection(coords, uncertain[tuple(coords.T)])


# ---------------------------------------------------------------- edge kernels


def edge_diversity(p_i: np.ndarray, p_j: np.ndarray) -> np.ndarray:
    """Symmetric KL divergence between class simplices (last axis)."""
    a = np.maximum(np.asarray(p_i, dtype=np.float64), PROB_FLOOR)
    b = np.maximum(np.asarray(p_j, dtype=np.float64), PROB_FLOOR)
    return np.sum((a - b) * (np.log(a) - np.log(b)), axis=-1)


def edge_intensity(v_i, v_j, sigma_int: float) -> np.ndarray:
    if sigma_int <= 0:
        raise DomainError("sigma_int must be positive")
    d = np.asarray(v_i, dtype=np.float64) - np.asarray(v_j, dtype=np.float64)
    return np.exp(-(d * d) / (2.0 * sigma_int))


def edge_position(x_i, x_j, sigma_pos: float) -> np.ndarray:
    if sigma_pos <= 0:
        raise DomainError("sigma_pos must be positive")
    d = np.asarray(x_i, dtype=np.float64) - np.asarray(x_j, dtype=np.float64)
    return np.exp(-np.sum(d * d, axis=-1) / (2.0 * sigma_pos))


def edge_weight(cfg: EdgeWeightConfig, p_i, p_j, v_i, v_j, x_i=None, x_j=None) -> np.ndarray:
    """Mix of exp(-div), intensity and position kernels; all terms in (0, 1].

    Without coordinates the position weight is spread over the other two
    terms in proportion to their coefficients.
    """
    div = np.exp(-edge_diversity(p_i, p_j))
    inten = edge_intensity(v_i, v_j, cfg.sigma_int)
    if x_i is None:
        rest = cfg.lam_div + cfg.lam_int
        ld, li = (cfg.lam_div / rest, cfg.lam_int / rest) if rest > 0 else (0.5, 0.5)
        return ld * div + li * inten
    return cfg.lam_div * div + cfg.lam_int * inten + cfg.lam_pos * edge_position(x_i, x_j, cfg.sigma_pos)


def graph_edge_weights(graph: RefinementGraph, src: np.ndarray, dst: np.ndarray, cfg: EdgeWeightConfig, use_position: bool = True) -> np.ndarray:
    e = graph.expectation()
    v = graph.intensity
    if use_position:
        w = edge_weight(cfg, e[src], e[dst], v[src], v[dst], graph.coords[src], graph.coords[dst])
    else:
        w = edge_weight(cfg, e[src], e[dst], v[src], v[dst])
    return w.astype(np.float32)


# ---------------------------------------------------------------- graph


def node_index_volume(coords: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    index = np.full(shape, -1, dtype=np.int64)
    index[tuple(coords.T)] = np.arange(len(coords))
    return index


def six_neighbor_edges(coords: np.ndarray, shape: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Directed edges j -> i for every face-adjacent node pair, grouped by i."""
    index = node_index_volume(coords, shape)
    n = len(coords)
    nbr = np.full((n, 6), -1, dtype=np.int64)
    for k, off in enumerate(_OFFSETS):
        q = coords + off
        inside = np.all((q >= 0) & (q < np.array(shape)), axis=1)
        nbr[inside, k] = index[tuple(q[inside].T)]
    dst = np.repeat(np.arange(n), 6)
    src = nbr.reshape(-1)
    keep = src >= 0
    return src[keep], dst[keep]


def build_graph(
    field: UncertaintyField,
    intensities: np.ndarray,
    nodes: NodeSelection,
    cfg: EdgeWeightConfig = EdgeWeightConfig(),
    labels: np.ndarray | None = None,
    volume_id: str = "",
) -> RefinementGraph:
    """Graph over the selected voxels with weighted 6-neighbourhood edges.

    Node features are [E(x) for classes 1..M-1, U(x), V(x)]; node labels come
    from ``labels`` when a ground-truth volume is supplied.
    """
    if nodes.passthrough or len(nodes) == 0:
        raise UncertGraphError("cannot build a graph from an empty node selection")
    cfg.validate()
    shape = field.entropy.shape
    if intensities.shape != shape:
        raise ShapeError(f"intensities {intensities.shape} do not match field {shape}")
    idx = tuple(nodes.coords.T)
    features = np.column_stack(
        [field.expectation[idx][:, 1:], field.entropy[idx][:, None], intensities[idx][:, None]]
    ).astype(np.float32)
    node_labels = np.full(len(nodes), UNLABELED, dtype=np.int8)
    if labels is not None:
        node_labels = labels[idx].astype(np.int8)
    graph = RefinementGraph(
        coords=nodes.coords.astype(np.int64),
        features=features,
        uncertain=nodes.uncertain.copy(),
        labels=node_labels,
        src=np.zeros(0, dtype=np.int64),
        dst=np.zeros(0, dtype=np.int64),
        weight=np.zeros(0, dtype=np.float32),
        kind=np.zeros(0, dtype=np.uint8),
        volume_id=volume_id,
        meta={"edge_weights": {k: float(v) for k, v in vars(cfg).items()}, "shape": list(shape)},
    )
    src, dst = six_neighbor_edges(graph.coords, shape)
    w = graph_edge_weights(graph, src, dst, cfg)
    return graph.with_edges(src, dst, w, np.full(len(src), SIX, dtype=np.uint8))

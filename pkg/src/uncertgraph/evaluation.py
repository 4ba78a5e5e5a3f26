"""Dice scoring, result tables, neighbour-agreement analysis and overlays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .uncertainty import INTER, INTRA, RefinementGraph

# overlay colours: false positive, true positive, false negative
FP_RGB = (255, 0, 0)
TP_RGB = (0, 255, 0)
FN_RGB = (0, 0, 255)


def dice_score(pred: np.ndarray, truth: np.ndarray) -> float:
    """2|A & B| / (|A| + |B|); 1.0 when both masks are empty."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"dice_score: shapes {pred.shape} and {truth.shape} differ")
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, truth).sum()) / total


@dataclass
class DiceReport:
    experiment: str
    seeds: list[int]
    rows: list[tuple[int, str, float]] = field(default_factory=list)  # (seed, volume_id, dice)

    def add(self, seed: int, volume_id: str, dice: float) -> None:
        if not 0.0 <= dice <= 1.0:
            raise ValueError(f"dice {dice} outside [0, 1]")
        self.rows.append((seed, volume_id, float(dice)))

    @property
    def scores(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows], dtype=np.float64)

    @property
    def mean(self) -> float:
        return float(self.scores.mean()) if self.rows else float("nan")

    @property
    def std(self) -> float:
        return float(self.scores.std()) if self.rows else float("nan")

    def seed_means(self) -> dict[int, float]:
        return {s: float(np.mean([r[2] for r in self.rows if r[0] == s])) for s in sorted({r[0] for r in self.rows})}

    def summary(self) -> dict:
        return {
            "experiment": self.experiment,
            "seeds": list(self.seeds),
            "n": len(self.rows),
            "mean": self.mean,
            "std": self.std,
            "seed_means": {str(k): v for k, v in self.seed_means().items()},
        }


# ---------------------------------------------------------------- neighbours


@dataclass
class NeighborReport:
    agreement: float
    baseline: float
    edges: int
    samples: list[dict] = field(default_factory=list)


def edge_label_agreement(labels: np.ndarray, src: np.ndarray, dst: np.ndarray) -> float:
    ok = (labels[src] >= 0) & (labels[dst] >= 0)
    if not ok.any():
        return float("nan")
    return float(np.mean(labels[src][ok] == labels[dst][ok]))


def random_edge_baseline(labels: np.ndarray, src: np.ndarray, dst: np.ndarray, seed: int = 0, rounds: int = 20) -> float:
    """Agreement after randomly permuting the source endpoints, averaged over rounds."""
    rng = np.random.default_rng(seed)
    pool = np.flatnonzero(labels >= 0)
    vals = []
    for _ in range(rounds):
        fake_src = rng.choice(pool, size=len(dst))
        vals.append(edge_label_agreement(labels, fake_src, dst))
    return float(np.mean(vals))


def neighbor_inspect(
    graph: RefinementGraph,
    labels_volume: np.ndarray | None = None,
    kinds=(INTRA, INTER),
    n_samples: int = 4,
    patch: int = 7,
    seed: int = 0,
) -> NeighborReport:
    """Label agreement of dynamic edges versus a random-edge permutation baseline.

    For a few sampled nodes the report also carries the label patch around one
    of their selected neighbours (the neighbour must lie in the same volume
    for a patch to be cut).
    """
    sel = graph.edges_of(kinds)
    src, dst = graph.src[sel], graph.dst[sel]
    labels = graph.labels.astype(np.int64)
    report = NeighborReport(
        agreement=edge_label_agreement(labels, src, dst),
        baseline=random_edge_baseline(labels, src, dst, seed),
        edges=int(sel.sum()),
    )
    if len(dst) == 0:
        return report
    rng = np.random.default_rng(seed)
    half = patch // 2
    for e in rng.choice(len(dst), size=min(n_samples, len(dst)), replace=False):
        s, d = int(src[e]), int(dst[e])
        entry = {"node": d, "neighbor": s, "node_label": int(labels[d]), "neighbor_label": int(labels[s])}
        if labels_volume is not None and not graph.imported[s]:
            z, y, x = graph.coords[s]
            padded = np.pad(labels_volume[z], half)
            entry["neighbor_patch"] = padded[y : y + patch, x : x + patch].tolist()
        report.samples.append(entry)
    return report


# ---------------------------------------------------------------- overlays


def overlay(intensity_slice: np.ndarray, pred_slice: np.ndarray, truth_slice: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """RGB uint8 image: grey intensities tinted red (FP), green (TP), blue (FN)."""
    grey = np.clip(intensity_slice, 0, 1)[..., None] * 255.0 * np.ones(3)
    out = grey.copy()
    pred = pred_slice.astype(bool)
    truth = truth_slice.astype(bool)
    for region, colour in ((pred & ~truth, FP_RGB), (pred & truth, TP_RGB), (~pred & truth, FN_RGB)):
        out[region] = (1 - alpha) * grey[region] + alpha * np.asarray(colour, dtype=float)
    return out.round().astype(np.uint8)

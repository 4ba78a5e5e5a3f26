"""End procedures: U-Net pretraining, MCDO analysis, per-volume Refinement,
Uncertainty-Aware Training, and the experiment matrix."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import DomainError, UncertGraphError
from .evaluation import DiceReport, dice_score
from .gnn import FocalLossConfig, GnnModel, degree_normalizer, focal_loss, gnn_forward
from .neighbors import NeighborConfig, TrainGraphBank, augment
from .optim import Adam
from .segnet import SegNet, SliceBatch, predict_probabilities, train_step
from .synth import Volume
from .uncertainty import (
    EdgeWeightConfig,
    EmptyUncertaintyWarning,
    ProbabilityStack,
    RefinementGraph,
    UncertaintyField,
    build_graph,
    select_nodes,
    uncertainty_field,
)

log = logging.getLogger(__name__)

EXPERIMENTS = {
    "six_connectivity": ("six_only", False),
    "random16_baseline": ("random16", False),
    "inter": ("inter", False),
    "intra": ("intra", False),
    "inter_uat": ("inter", True),
    "intra_uat": ("intra", True),
}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "intra"
    seeds: tuple[int, ...] = (0, 1, 2)
    gcn_lr: float = 1e-2
    unet_lr: float = 1e-5
    refine_epochs: int = 200
    patience: int = 30
    uat_iterations: int = 30
    mcdo_passes: int = 10
    mcdo_seed: int = 0
    tau: float = 0.05
    hidden: int = 32

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise DomainError(f"unknown experiment {self.experiment!r}")
        # zero freezes a model; only negative rates are rejected
        if self.gcn_lr < 0 or self.unet_lr < 0:
            raise DomainError("learning rates gcn_lr, unet_lr must be non-negative")
        if not 0.0 < self.tau < math.log(2):
            raise DomainError(f"tau must lie in (0, ln 2) nats, got {self.tau}")
        if self.mcdo_passes < 2:
            raise DomainError("MCDO needs at least two passes")
        if self.refine_epochs < 1 or self.patience < 1 or self.uat_iterations < 0:
            raise DomainError("epoch budgets must be positive")

    @property
    def mode(self) -> str:
        return EXPERIMENTS[self.experiment][0]

    @property
    def uat(self) -> bool:
        return EXPERIMENTS[self.experiment][1]


@dataclass(frozen=True)
class PipelineConfig:
    """Everything below the experiment choice that shapes a run."""

    edge: EdgeWeightConfig = EdgeWeightConfig()
    neighbor: NeighborConfig = NeighborConfig()
    focal: FocalLossConfig = FocalLossConfig()

    def neighbor_for(self, exp: ExperimentConfig) -> NeighborConfig:
        return replace(self.neighbor, mode=exp.mode)


# ---------------------------------------------------------------- U-Net


def train_segnet(
    net: SegNet,
    volumes: list[Volume],
    epochs: int = 10,
    lr: float = 1e-3,
    batch_size: int = 16,
    seed: int = 0,
    empty_fraction: float = 0.25,
) -> list[float]:
    """Supervised slice-wise pretraining; returns the mean loss per epoch.

    Each epoch visits every slice containing foreground plus a random
    ``empty_fraction`` share of the empty ones.
    """
    rng = np.random.default_rng(seed)
    slices = np.concatenate([v.intensities for v in volumes])
    labels = np.concatenate([v.labels for v in volumes])
    has_fg = labels.reshape(len(labels), -1).any(axis=1)
    fg_idx, bg_idx = np.flatnonzero(has_fg), np.flatnonzero(~has_fg)
    optimizer = Adam(net.parameters, lr=lr)
    history = []
    step = 0
    for epoch in range(epochs):
        n_bg = int(round(empty_fraction * len(bg_idx)))
        pool = np.concatenate([fg_idx, rng.choice(bg_idx, n_bg, replace=False) if n_bg else bg_idx[:0]])
        rng.shuffle(pool)
        losses = []
        for start in range(0, len(pool), batch_size):
            idx = np.sort(pool[start : start + batch_size])
            batch = SliceBatch(slices[idx], labels[idx])
            losses.append(train_step(net, batch, lr, optimizer, seed=seed, step=step))
            step += 1
        history.append(float(np.mean(losses)))
        log.info("segnet epoch %d loss %.4f", epoch, history[-1])
    return history


def cnn_mask(net: SegNet, volume: Volume) -> np.ndarray:
    probs = predict_probabilities(net, volume.intensities, stochastic=False)
    return (probs.argmax(axis=1) == 1).astype(np.uint8)


# ---------------------------------------------------------------- MCDO analysis


def mcdo(net: SegNet, volume: Volume, passes: int = 10, seed: int = 0) -> ProbabilityStack:
    """T dropout-active passes over every slice, stacked as (T, D, H, W, M)."""
    if passes < 2:
        raise DomainError("MCDO needs at least two passes")
    stack = [predict_probabilities(net, volume.intensities, True, seed, t).transpose(0, 2, 3, 1) for t in range(passes)]
    return ProbabilityStack(np.stack(stack))


@dataclass
class Analysis:
    volume: Volume
    field: UncertaintyField
    graph: RefinementGraph | None  # None when nothing is uncertain

    @property
    def cnn_mask(self) -> np.ndarray:
        return self.field.prediction()


def analyze(
    net: SegNet,
    volume: Volume,
    exp: ExperimentConfig,
    cfg: PipelineConfig,
    seed: int | None = None,
) -> Analysis:
    """MCDO -> uncertainty field -> node selection -> 6-neighbourhood graph."""
    mcdo_seed = exp.mcdo_seed if seed is None else seed
    fld = uncertainty_field(mcdo(net, volume, exp.mcdo_passes, _volume_seed(mcdo_seed, volume.id)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyUncertaintyWarning)
        nodes = select_nodes(fld.entropy, fld.prediction(), exp.tau, net.config.classes)
    if nodes.passthrough:
        return Analysis(volume, fld, None)
    graph = build_graph(fld, volume.intensities, nodes, cfg.edge, volume.labels, volume.id)
    return Analysis(volume, fld, graph)


def _volume_seed(seed: int, volume_id: str) -> int:
    digest = np.frombuffer(volume_id.encode().ljust(8, b"\0")[:8], dtype=np.uint64)[0]
    return int(np.random.SeedSequence([seed, int(digest) & 0x7FFFFFFF]).generate_state(1)[0])


def build_bank(analyses: list[Analysis], neighbor: NeighborConfig, seed: int = 0) -> TrainGraphBank:
    graphs = [a.graph for a in analyses if a.graph is not None]
    return TrainGraphBank.build(graphs, neighbor.fps_ratio, seed)


# ---------------------------------------------------------------- GNN training


def pseudo_labels(graph: RefinementGraph) -> np.ndarray:
    return (graph.expectation()[:, 1] > 0.5).astype(np.int64)


@dataclass
class GnnFit:
    model: GnnModel
    epochs: int
    best_accuracy: float
    losses: list[float] = field(default_factory=list)


def fit_refinement_gnn(
    graph: RefinementGraph,
    exp: ExperimentConfig,
    cfg: PipelineConfig,
    seed: int,
) -> GnnFit:
    """Semi-supervised fit on certain own nodes against binarised expectation.

    Early stopping tracks pseudo-label accuracy on those nodes and the best
    parameters are kept.
    """
    neighbor = cfg.neighbor_for(exp)
    labels = pseudo_labels(graph)
    mask = graph.own & ~graph.uncertain
    if not mask.any():
        raise UncertGraphError("graph has no certain nodes to learn from")
    model = GnnModel(graph.features.shape[1], exp.hidden, 2, degree_normalizer([graph]), seed)
    opt = Adam(model.parameters, lr=exp.gcn_lr)
    best, best_params, since, losses = -1.0, None, 0, []
    epoch = 0
    for epoch in range(exp.refine_epochs):
        out = gnn_forward(model, graph, neighbor, cfg.edge)
        loss = focal_loss(out.logits, labels, mask, cfg.focal)
        acc = float(np.mean(out.logits.data[mask].argmax(axis=1) == labels[mask]))
        if acc > best:
            best, since = acc, 0
            best_params = {k: v.data.copy() for k, v in model.params.items()}
        else:
            since += 1
            if since >= exp.patience:
                break
        T.backward(loss)
        opt.step()
        losses.append(loss.item())
    for k, v in best_params.items():
        model.params[k].data = v
    return GnnFit(model, epoch + 1, best, losses)


def predict_nodes(model: GnnModel, graph: RefinementGraph, neighbor: NeighborConfig, edge: EdgeWeightConfig):
    with T.no_grad():
        out = gnn_forward(model, graph, neighbor, edge)
    return out.probs.data.argmax(axis=1).astype(np.uint8), out.graph


def apply_refinement(base_mask: np.ndarray, graph: RefinementGraph, node_pred: np.ndarray) -> np.ndarray:
    refined = base_mask.copy()
    own = graph.own
    refined[tuple(graph.coords[own].T)] = node_pred[own]
    return refined


# ---------------------------------------------------------------- Refinement


@dataclass
class RefineResult:
    volume_id: str
    mask: np.ndarray
    cnn_mask: np.ndarray
    dice: float
    cnn_dice: float
    passthrough: bool
    graph: RefinementGraph | None = None  # with the final dynamic edges
    epochs: int = 0


def refine_volume(
    net: SegNet,
    volume: Volume,
    exp: ExperimentConfig,
    cfg: PipelineConfig = PipelineConfig(),
    bank: TrainGraphBank | None = None,
    seed: int = 0,
    analysis: Analysis | None = None,
) -> RefineResult:
    """Semi-supervised graph refinement of one volume; ``net`` is only read."""
    exp.validate()
    if analysis is None:
        analysis = analyze(net, volume, exp, cfg)
    base = analysis.cnn_mask
    truth = volume.labels
    cnn_d = dice_score(base, truth) if truth is not None else float("nan")
    if analysis.graph is None:
        return RefineResult(volume.id, base.copy(), base, cnn_d, cnn_d, True)
    neighbor = cfg.neighbor_for(exp)
    graph = augment(analysis.graph, neighbor, bank, seed, cfg.edge)
    fit = fit_refinement_gnn(graph, exp, cfg, seed)
    node_pred, final_graph = predict_nodes(fit.model, graph, neighbor, cfg.edge)
    mask = apply_refinement(base, graph, node_pred)
    d = dice_score(mask, truth) if truth is not None else float("nan")
    return RefineResult(volume.id, mask, base, d, cnn_d, False, final_graph, fit.epochs)


# ---------------------------------------------------------------- UAT


@dataclass
class UatResult:
    net: SegNet
    model: GnnModel
    gnn_losses: list[float]
    unet_losses: list[float]


def uat_train(
    net: SegNet,
    train: list[Volume],
    exp: ExperimentConfig,
    cfg: PipelineConfig = PipelineConfig(),
    bank: TrainGraphBank | None = None,
    seed: int = 0,
    delta: float | None = None,
) -> UatResult:
    """Alternating GCN / one-slice U-Net updates on training volumes.

    Each iteration samples a volume, rebuilds its graph from a fresh MCDO run
    of the current U-Net, takes one focal-loss step of the GCN against the
    ground-truth node labels, then one dice-loss step of the U-Net on a single
    slice drawn among the slices the graph touches. ``net`` is copied, never
    modified in place.
    """
    exp.validate()
    neighbor = cfg.neighbor_for(exp)
    net = net.copy()
    rng = np.random.default_rng(seed)
    if _train_dice(net, train[: min(3, len(train))]) < 0.5:
        warnings.warn("U-Net does not look converged (train Dice < 0.5) before UAT", stacklevel=2)
    model = None
    opt_g = opt_u = None
    gnn_losses, unet_losses = [], []
    for it in range(exp.uat_iterations):
        volume = train[int(rng.integers(len(train)))]
        analysis = analyze(net, volume, exp, cfg, seed=_volume_seed(seed, f"uat{it}"))
        if analysis.graph is None:
            continue
        graph = augment(analysis.graph, neighbor, bank, seed + it, cfg.edge, exclude_volume=volume.id)
        if model is None:
            model = GnnModel(graph.features.shape[1], exp.hidden, 2, delta or degree_normalizer([graph]), seed)
            opt_g = Adam(model.parameters, lr=exp.gcn_lr)
            opt_u = Adam(net.parameters, lr=exp.unet_lr)
        out = gnn_forward(model, graph, neighbor, cfg.edge)
        loss = focal_loss(out.logits, graph.labels.astype(np.int64), graph.own, cfg.focal)
        T.backward(loss)
        opt_g.step()
        gnn_losses.append(loss.item())

        zs = np.unique(graph.coords[graph.own, 0])
        z = int(zs[rng.integers(len(zs))])
        batch = SliceBatch(volume.intensities[z], volume.labels[z])
        unet_losses.append(train_step(net, batch, exp.unet_lr, opt_u, seed=seed, step=it))
    if model is None:
        raise UncertGraphError("UAT never produced a graph; nothing was trained")
    return UatResult(net, model, gnn_losses, unet_losses)


def _train_dice(net: SegNet, volumes: list[Volume]) -> float:
    return float(np.mean([dice_score(cnn_mask(net, v), v.labels) for v in volumes])) if volumes else 1.0


def uat_predict(
    uat: UatResult,
    volume: Volume,
    exp: ExperimentConfig,
    cfg: PipelineConfig = PipelineConfig(),
    bank: TrainGraphBank | None = None,
    seed: int = 0,
) -> RefineResult:
    """Apply the UAT-trained pair to a test volume (no per-volume fitting)."""
    analysis = analyze(uat.net, volume, exp, cfg)
    base = analysis.cnn_mask
    cnn_d = dice_score(base, volume.labels) if volume.labels is not None else float("nan")
    if analysis.graph is None:
        return RefineResult(volume.id, base.copy(), base, cnn_d, cnn_d, True)
    neighbor = cfg.neighbor_for(exp)
    graph = augment(analysis.graph, neighbor, bank, seed, cfg.edge)
    node_pred, final_graph = predict_nodes(uat.model, graph, neighbor, cfg.edge)
    mask = apply_refinement(base, graph, node_pred)
    d = dice_score(mask, volume.labels) if volume.labels is not None else float("nan")
    return RefineResult(volume.id, mask, base, d, cnn_d, False, final_graph)


# ---------------------------------------------------------------- experiment matrix


@dataclass
class MatrixResult:
    reports: dict[str, DiceReport]
    failures: dict[str, str] = field(default_factory=dict)
    overlays: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)  # (experiment, volume) -> RGB
    graphs: dict[tuple[str, int, str], RefinementGraph] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, int, str, float]]:
        return [(name, s, vid, d) for name, rep in self.reports.items() for s, vid, d in rep.rows]

    def summary(self) -> dict:
        return {
            "experiments": {name: rep.summary() for name, rep in self.reports.items()},
            "failures": dict(self.failures),
        }


def overlay_slice(volume: Volume, mask: np.ndarray) -> np.ndarray:
    """Overlay on the slice holding the most ground-truth foreground."""
    from .evaluation import overlay

    z = int(np.argmax(volume.labels.reshape(volume.shape[0], -1).sum(axis=1)))
    return overlay(volume.intensities[z], mask[z], volume.labels[z])


def run_matrix(
    net: SegNet,
    train: list[Volume],
    test: list[Volume],
    experiments: list[str] | tuple[str, ...] = tuple(EXPERIMENTS),
    base: ExperimentConfig = ExperimentConfig(),
    cfg: PipelineConfig = PipelineConfig(),
    keep_graphs: bool = False,
) -> MatrixResult:
    """Every experiment row over ``base.seeds`` on the test volumes.

    Test and bank analyses do not depend on the experiment seed and are
    computed once. A row that raises is recorded in ``failures`` and the
    matrix moves on. Overlays use the first seed of each row.
    """
    result = MatrixResult({})
    test_an = {v.id: analyze(net, v, base, cfg) for v in test}
    banks: dict[int, TrainGraphBank] = {}
    bank_an: list[Analysis] | None = None

    def bank_for(seed: int) -> TrainGraphBank:
        nonlocal bank_an
        if seed not in banks:
            if bank_an is None:
                bank_an = [analyze(net, v, base, cfg) for v in train]
            banks[seed] = build_bank(bank_an, cfg.neighbor, seed)
        return banks[seed]

    for name in experiments:
        exp = replace(base, experiment=name)
        report = DiceReport(name, list(exp.seeds))
        try:
            exp.validate()
            for seed in exp.seeds:
                bank = bank_for(seed) if exp.mode == "inter" else None
                if exp.uat:
                    uat = uat_train(net, train, exp, cfg, bank, seed)
                    outs = [uat_predict(uat, v, exp, cfg, bank, seed) for v in test]
                else:
                    outs = [refine_volume(net, v, exp, cfg, bank, seed, test_an[v.id]) for v in test]
                for v, r in zip(test, outs):
                    report.add(seed, v.id, r.dice)
                    if seed == exp.seeds[0] and v.labels is not None:
                        result.overlays[(name, v.id)] = overlay_slice(v, r.mask)
                    if keep_graphs and r.graph is not None:
                        result.graphs[(name, seed, v.id)] = r.graph
                log.info("%s seed %d mean dice %.4f", name, seed, np.mean([r.dice for r in outs]))
        except Exception as exc:  # noqa: BLE001 - a failed row must not stop the matrix
            log.exception("experiment %s failed", name)
            result.failures[name] = f"{type(exc).__name__}: {exc}"
        result.reports[name] = report
    return result

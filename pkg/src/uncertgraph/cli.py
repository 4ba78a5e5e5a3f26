"""Command-line entry point: ``uncertgraph <subcommand> [--config FILE]``.

Artifacts live under the configured output directory (``UNCERTGRAPH_OUTPUT_DIR``
overrides it; ``UNCERTGRAPH_THREADS`` caps BLAS threads). Every subcommand
writes a ``manifest.json`` recording the config hash, seed, input hashes and
output hashes next to its artifacts.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from . import config as C
from . import io as IO
from . import pipelines as P
from .errors import ConfigError, MissingArtifactError, ParseError, UncertGraphError
from .evaluation import DiceReport, dice_score, neighbor_inspect
from .neighbors import TrainGraphBank
from .segnet import SegNet
from .synth import Volume, synth_dataset
from .uncertainty import INTER, INTRA, EmptyUncertaintyWarning, UncertaintyField, build_graph, select_nodes, uncertainty_field

log = logging.getLogger("uncertgraph")

ENV_OUTPUT = "UNCERTGRAPH_OUTPUT_DIR"
ENV_THREADS = "UNCERTGRAPH_THREADS"

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_MISSING, EXIT_PARSE = 0, 1, 2, 3, 4


class Workspace:
    """Resolves artifact locations for one RunConfig."""

    def __init__(self, cfg: C.RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.output_dir)
        self.data = cfg.data_path
        self.unet = self.root / "unet"
        self.mcdo = self.root / "mcdo"
        self.graphs = self.root / "graphs"
        self.bank = self.root / "bank"

    def run_dir(self, stage: str) -> Path:
        sub = self.cfg.experiment.experiment if stage in ("refine", "uat") else stage
        return self.root / "runs" / self.cfg.hash(stage) / sub

    def record(self, stage: str, inputs: dict[str, str]) -> dict:
        return {
            "subcommand": stage,
            "version": __version__,
            "config_hash": self.cfg.hash(stage),
            "seed": self.cfg.seed,
            "config": self.cfg.to_dict() | {"output_dir": None, "data_dir": None},
            "inputs": inputs,
        }

    def write(self, path: Path, data: bytes, outputs: list[Path]) -> None:
        IO.atomic_write(path, data)
        outputs.append(path)

    def manifest(self, directory: Path, stage: str, inputs: dict[str, str], outputs: list[Path]) -> None:
        IO.write_manifest(directory, self.root, self.record(stage, inputs), outputs)


def _pipeline(cfg: C.RunConfig) -> P.PipelineConfig:
    return P.PipelineConfig(edge=cfg.edge, neighbor=cfg.neighbor, focal=cfg.focal)


def _require(path: Path, subcommand: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, subcommand)
    return path


def _input_hashes(ws: Workspace, paths: list[Path]) -> dict[str, str]:
    out = {}
    for p in paths:
        try:
            key = str(p.relative_to(ws.root))
        except ValueError:
            key = str(p)
        out[key] = IO.sha256(p.read_bytes())
    return out


# ---------------------------------------------------------------- loaders


def load_split(ws: Workspace, split: str) -> list[Volume]:
    manifest = IO.read_manifest(ws.data)
    if manifest is None:
        raise MissingArtifactError(ws.data / "manifest.json", "synth")
    if manifest["config_hash"] != ws.cfg.hash("synth"):
        raise ConfigError(f"dataset in {ws.data} was generated from a different dataset config; rerun `synth`")
    ids = manifest["volumes"][split]
    return [IO.read_volume(_require(ws.data / f"{vid}.json", "synth")) for vid in ids]


def load_segnet(ws: Workspace) -> tuple[SegNet, Path]:
    path = _require(ws.unet / "segnet.ckpt", "train-unet")
    manifest = IO.read_manifest(ws.unet) or {}
    if manifest.get("config_hash") != ws.cfg.hash("train-unet"):
        raise ConfigError("U-Net checkpoint was trained under a different config; rerun `train-unet`")
    net, _ = IO.segnet_from_bytes(path.read_bytes())
    return net, path


def _volumes_arg(vols: list[Volume], wanted: str | None) -> list[Volume]:
    if wanted is None:
        return vols
    picked = [v for v in vols if v.id == wanted]
    if not picked:
        raise UncertGraphError(f"no volume with id {wanted!r}")
    return picked


# ---------------------------------------------------------------- subcommands


def cmd_synth(ws: Workspace, args) -> None:
    d = ws.cfg.dataset
    train, test = synth_dataset(d.n_train, d.n_test, tuple(d.dims), d.seed, ws.cfg.segnet.levels)
    outputs = [p for v in train + test for p in IO.write_volume(v, ws.data)]
    record = ws.record("synth", {})
    record["volumes"] = {"train": [v.id for v in train], "test": [v.id for v in test]}
    IO.write_manifest(ws.data, ws.data, record, outputs)
    print(f"wrote {len(train)} train and {len(test)} test volumes to {ws.data}")


def cmd_train_unet(ws: Workspace, args) -> None:
    train = load_split(ws, "train")
    net = SegNet(ws.cfg.segnet)
    t = ws.cfg.train
    history = P.train_segnet(net, train, t.epochs, t.lr, t.batch_size, ws.cfg.seed, t.empty_fraction)
    outputs: list[Path] = []
    ws.write(ws.unet / "segnet.ckpt", IO.segnet_to_bytes(net, t.epochs, {"loss_history": history}), outputs)
    ws.manifest(ws.unet, "train-unet", _input_hashes(ws, [ws.data / "manifest.json"]), outputs)
    print(f"final training loss {history[-1]:.4f}; checkpoint {ws.unet / 'segnet.ckpt'}")


def cmd_mcdo(ws: Workspace, args) -> None:
    net, ckpt = load_segnet(ws)
    exp = ws.cfg.experiment
    outputs: list[Path] = []
    for v in _volumes_arg(load_split(ws, args.split), args.volume):
        stack = P.mcdo(net, v, exp.mcdo_passes, P._volume_seed(exp.mcdo_seed, v.id))
        fld = uncertainty_field(stack)
        ws.write(ws.mcdo / f"{v.id}.stack.npy", IO.npy_bytes(stack.probs), outputs)
        ws.write(ws.mcdo / f"{v.id}.expectation.npy", IO.npy_bytes(fld.expectation), outputs)
        ws.write(ws.mcdo / f"{v.id}.entropy.npy", IO.npy_bytes(fld.entropy), outputs)
    ws.manifest(ws.mcdo, "mcdo", _input_hashes(ws, [ckpt]), outputs)
    print(f"wrote {len(outputs) // 3} uncertainty fields to {ws.mcdo}")


def cmd_build_graph(ws: Workspace, args) -> None:
    if IO.read_manifest(ws.mcdo) is None:
        raise MissingArtifactError(ws.mcdo / "manifest.json", "mcdo")
    if IO.read_manifest(ws.mcdo)["config_hash"] != ws.cfg.hash("mcdo"):
        raise ConfigError("uncertainty fields were computed under a different config; rerun `mcdo`")
    exp = ws.cfg.experiment
    outputs, inputs = [], []
    for v in _volumes_arg(load_split(ws, args.split), args.volume):
        e_path = _require(ws.mcdo / f"{v.id}.expectation.npy", "mcdo")
        u_path = _require(ws.mcdo / f"{v.id}.entropy.npy", "mcdo")
        inputs += [e_path, u_path]
        fld = UncertaintyField(IO.read_npy(e_path), IO.read_npy(u_path))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyUncertaintyWarning)
            nodes = select_nodes(fld.entropy, fld.prediction(), exp.tau, ws.cfg.segnet.classes)
        if nodes.passthrough:
            print(f"{v.id}: no uncertain voxels, no graph")
            continue
        graph = build_graph(fld, v.intensities, nodes, ws.cfg.edge, v.labels, v.id)
        ws.write(ws.graphs / f"{v.id}.graph", IO.serialize_graph(graph), outputs)
        if args.json:
            ws.write(ws.graphs / f"{v.id}.graph.json", IO.graph_to_json(graph).encode(), outputs)
        print(f"{v.id}: {graph.num_nodes} nodes, {graph.num_edges} edges")
    ws.manifest(ws.graphs, "build-graph", _input_hashes(ws, inputs), outputs)


def _bank(ws: Workspace, net: SegNet, seed: int) -> TrainGraphBank:
    """Train-graph bank, cached under a key of dataset + config hash + seed."""
    path = ws.bank / f"bank-{ws.cfg.hash('build-graph')}-{ws.cfg.neighbor.fps_ratio!r}-s{seed}.bin"
    if path.exists():
        return IO.bank_from_bytes(path.read_bytes())
    analyses = [P.analyze(net, v, ws.cfg.experiment, _pipeline(ws.cfg)) for v in load_split(ws, "train")]
    bank = P.build_bank(analyses, ws.cfg.neighbor, seed)
    IO.atomic_write(path, IO.bank_to_bytes(bank))
    return bank


def _write_results(ws: Workspace, directory: Path, report: DiceReport, outputs: list[Path]) -> None:
    ws.write(directory / "results.csv", IO.dice_csv([(report.experiment, s, vid, d) for s, vid, d in report.rows]), outputs)
    ws.write(directory / "summary.json", IO.canonical_json(report.summary()), outputs)


def cmd_refine(ws: Workspace, args) -> None:
    net, ckpt = load_segnet(ws)
    exp = ws.cfg.experiment
    if exp.uat:
        raise ConfigError(f"experiment {exp.experiment!r} is a UAT row; use `uat`")
    cfg = _pipeline(ws.cfg)
    test = load_split(ws, "test")
    out_dir = ws.run_dir("refine")
    report = DiceReport(exp.experiment, list(exp.seeds))
    outputs: list[Path] = []
    analyses = {v.id: P.analyze(net, v, exp, cfg) for v in test}
    for seed in exp.seeds:
        bank = _bank(ws, net, seed) if exp.mode == "inter" else None
        for v in test:
            r = P.refine_volume(net, v, exp, cfg, bank, seed, analyses[v.id])
            report.add(seed, v.id, r.dice)
            ws.write(out_dir / "masks" / f"{v.id}_s{seed}.u8", r.mask.astype(np.uint8).tobytes(), outputs)
            if r.graph is not None:
                ws.write(out_dir / "graphs" / f"{v.id}_s{seed}.graph", IO.serialize_graph(r.graph), outputs)
    _write_results(ws, out_dir, report, outputs)
    ws.manifest(out_dir, "refine", _input_hashes(ws, [ckpt, ws.data / "manifest.json"]), outputs)
    print(f"{exp.experiment}: mean dice {report.mean:.4f} +- {report.std:.4f} -> {out_dir / 'results.csv'}")


def cmd_uat(ws: Workspace, args) -> None:
    net, ckpt = load_segnet(ws)
    exp = ws.cfg.experiment
    if not exp.uat:
        raise ConfigError(f"experiment {exp.experiment!r} is not a UAT row; use `refine`")
    cfg = _pipeline(ws.cfg)
    train, test = load_split(ws, "train"), load_split(ws, "test")
    out_dir = ws.run_dir("uat")
    report = DiceReport(exp.experiment, list(exp.seeds))
    outputs: list[Path] = []
    for seed in exp.seeds:
        bank = _bank(ws, net, seed) if exp.mode == "inter" else None
        uat = P.uat_train(net, train, exp, cfg, bank, seed)
        ws.write(out_dir / f"seed{seed}" / "segnet.ckpt", IO.segnet_to_bytes(uat.net), outputs)
        neighbor = dataclasses.asdict(cfg.neighbor_for(exp))
        ws.write(out_dir / f"seed{seed}" / "gnn.ckpt", IO.gnn_to_bytes(uat.model, neighbor), outputs)
        for v in test:
            r = P.uat_predict(uat, v, exp, cfg, bank, seed)
            report.add(seed, v.id, r.dice)
            ws.write(out_dir / "masks" / f"{v.id}_s{seed}.u8", r.mask.astype(np.uint8).tobytes(), outputs)
            if r.graph is not None:
                ws.write(out_dir / "graphs" / f"{v.id}_s{seed}.graph", IO.serialize_graph(r.graph), outputs)
    _write_results(ws, out_dir, report, outputs)
    ws.manifest(out_dir, "uat", _input_hashes(ws, [ckpt, ws.data / "manifest.json"]), outputs)
    print(f"{exp.experiment}: mean dice {report.mean:.4f} +- {report.std:.4f} -> {out_dir / 'results.csv'}")


def _result_dir(ws: Workspace, args) -> tuple[Path, str]:
    stage = "uat" if ws.cfg.experiment.uat else "refine"
    directory = Path(args.run_dir) if args.run_dir else ws.run_dir(stage)
    if IO.read_manifest(directory) is None:
        raise MissingArtifactError(directory / "manifest.json", stage)
    return directory, stage


def cmd_eval(ws: Workspace, args) -> None:
    directory, stage = _result_dir(ws, args)
    manifest = IO.read_manifest(directory)
    expected = ws.cfg.hash(manifest["subcommand"])
    if manifest["config_hash"] != expected:
        raise ConfigError(
            f"artifacts in {directory} carry config hash {manifest['config_hash']}, current config hashes to {expected}"
        )
    test = {v.id: v for v in load_split(ws, "test")}
    rows = IO.read_dice_csv(_require(directory / "results.csv", stage))
    report = DiceReport(ws.cfg.experiment.experiment, list(ws.cfg.experiment.seeds))
    for exp_name, seed, vid, stored in rows:
        v = test[vid]
        mask = np.frombuffer((directory / "masks" / f"{vid}_s{seed}.u8").read_bytes(), dtype=np.uint8).reshape(v.shape)
        d = dice_score(mask, v.labels)
        if abs(d - stored) > 1e-12:
            raise UncertGraphError(f"{vid} seed {seed}: stored dice {stored} but mask scores {d}")
        report.add(seed, vid, d)
    outputs: list[Path] = []
    ws.write(directory / "eval.json", IO.canonical_json(report.summary()), outputs)
    print(json.dumps(report.summary(), indent=1))


def cmd_matrix(ws: Workspace, args) -> None:
    net, ckpt = load_segnet(ws)
    train, test = load_split(ws, "train"), load_split(ws, "test")
    out_dir = ws.run_dir("matrix")
    result = P.run_matrix(net, train, test, ws.cfg.matrix, ws.cfg.experiment, _pipeline(ws.cfg), keep_graphs=True)
    outputs: list[Path] = []
    ws.write(out_dir / "results.csv", IO.dice_csv(result.rows()), outputs)
    ws.write(out_dir / "summary.json", IO.canonical_json(result.summary()), outputs)
    for (name, vid), rgb in sorted(result.overlays.items()):
        ws.write(out_dir / "overlays" / f"{name}_{vid}.png", IO.png_bytes(rgb), outputs)
    for (name, seed, vid), graph in sorted(result.graphs.items()):
        ws.write(out_dir / "graphs" / f"{name}_{vid}_s{seed}.graph", IO.serialize_graph(graph), outputs)
    ws.manifest(out_dir, "matrix", _input_hashes(ws, [ckpt, ws.data / "manifest.json"]), outputs)
    for name, rep in result.reports.items():
        tag = f"FAILED {result.failures[name]}" if name in result.failures else f"{rep.mean:.4f} +- {rep.std:.4f}"
        print(f"{name:20s} {tag}")


def cmd_inspect_neighbors(ws: Workspace, args) -> None:
    directory, stage = _result_dir(ws, args)
    graph_files = sorted((directory / "graphs").glob("*.graph"))
    if not graph_files:
        raise MissingArtifactError(directory / "graphs", stage)
    test = {v.id: v for v in load_split(ws, "test")}
    reports = {}
    for path in graph_files:
        try:
            graph = IO.deserialize_graph(path.read_bytes())
        except ParseError as exc:
            raise ParseError(f"{path.name}: {exc}", exc.offset) from None
        labels = test[graph.volume_id].labels if graph.volume_id in test else None
        rep = neighbor_inspect(graph, labels, (INTRA, INTER), args.samples, seed=ws.cfg.seed)
        reports[path.stem] = dataclasses.asdict(rep)
    agree = [r["agreement"] for r in reports.values() if r["edges"]]
    base = [r["baseline"] for r in reports.values() if r["edges"]]
    summary = {
        "agreement": float(np.mean(agree)) if agree else None,
        "baseline": float(np.mean(base)) if base else None,
        "graphs": reports,
    }
    outputs: list[Path] = []
    ws.write(directory / "neighbors.json", IO.canonical_json(summary), outputs)
    print(f"dynamic-edge agreement {summary['agreement']} vs random baseline {summary['baseline']}")


COMMANDS = {
    "synth": cmd_synth,
    "train-unet": cmd_train_unet,
    "mcdo": cmd_mcdo,
    "build-graph": cmd_build_graph,
    "refine": cmd_refine,
    "uat": cmd_uat,
    "eval": cmd_eval,
    "matrix": cmd_matrix,
    "inspect-neighbors": cmd_inspect_neighbors,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uncertgraph", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", help="YAML run configuration (defaults when omitted)")
        p.add_argument("--out", help="output directory (overrides the config and environment)")
        p.add_argument("--experiment", help="override experiment.experiment")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("mcdo", "build-graph"):
            p.add_argument("--split", choices=("train", "test"), default="test")
            p.add_argument("--volume", help="only this volume id")
        if name == "build-graph":
            p.add_argument("--json", action="store_true", help="also write the JSON graph form")
        if name in ("eval", "inspect-neighbors"):
            p.add_argument("--run-dir", help="result directory to read (default: derived from config)")
        if name == "inspect-neighbors":
            p.add_argument("--samples", type=int, default=4)
    return parser


def _resolve_config(args) -> C.RunConfig:
    cfg = C.load(args.config) if args.config else C.RunConfig()
    out = args.out or os.environ.get(ENV_OUTPUT)
    if out:
        cfg = dataclasses.replace(cfg, output_dir=out)
    if args.experiment:
        if args.experiment not in P.EXPERIMENTS:
            raise ConfigError(f"unknown experiment {args.experiment!r}")
        cfg = cfg.with_experiment(args.experiment)
    return cfg


def _thread_limit():
    n = os.environ.get(ENV_THREADS)
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    try:
        return threadpool_limits(int(n))
    except ValueError:
        raise ConfigError(f"{ENV_THREADS} must be an integer, got {n!r}") from None


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        with _thread_limit():
            COMMANDS[args.command](Workspace(cfg), args)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except UncertGraphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

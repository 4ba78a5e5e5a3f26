"""Acceptance suite: one test, and one verdict line, per criterion.

Each test records ``criterion N: PASS|FAIL <measurement>`` in the run summary
and fails when the criterion is not met.
"""

import csv
import json
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import conftest
from conftest import toy_graph
from gradcheck import TOL, check_gradients
from test_cli import TINY, _tree, run
from test_gnn import _gcn_oracle, _permute_graph, _pna_oracle, _random_edges, gnn_stack_error
from test_neighbors import _brute_knn
from test_segnet import segnet_stack_error
from test_tensor import OPS, SEEDS, _indptr
from test_uncertainty import _diversity_ref, _entropy_ref, _expectation_ref, _gauss_ref, _simplices
from uncertgraph import cli
from uncertgraph import io as IO
from uncertgraph import pipelines as P
from uncertgraph import tensor as T
from uncertgraph.evaluation import dice_score, edge_label_agreement, random_edge_baseline
from uncertgraph.gnn import EdgeIndex, GnnModel, degree_normalizer, gcn_layer, gnn_forward, pna_aggregate, pna_block
from uncertgraph.neighbors import NeighborConfig, augment, farthest_point_sample, knn_feature, knn_select
from uncertgraph.segnet import SegNet, SegNetConfig
from uncertgraph.synth import synth_dataset
from uncertgraph.tensor import Tensor
from uncertgraph.uncertainty import INTRA, edge_diversity, edge_intensity, edge_position, entropy, mcdo_expectation

pytestmark = pytest.mark.filterwarnings("ignore::UserWarning")

BENCHMARK = Path(__file__).resolve().parents[1] / "configs" / "benchmark.yaml"
N = 10_000


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    conftest.VERDICTS[n] = line
    print(line)
    assert ok, line


# ---------------------------------------------------------------- 1 autodiff


def test_criterion_1_autodiff_integrity():
    start = time.perf_counter()
    worst = {}
    for name, (fn, make) in OPS.items():
        worst[name] = max(check_gradients(fn, make(np.random.default_rng(s)), s) for s in SEEDS)
    for op in (T.segment_sum, T.segment_max, T.segment_min):
        errs = []
        for s in SEEDS:
            rng = np.random.default_rng(s)
            indptr = _indptr(rng, 5)
            errs.append(check_gradients(lambda v: op(v, indptr), [rng.standard_normal((indptr[-1], 3))], s))
        worst[op.__name__] = max(errs)
    worst["segnet_stack"] = segnet_stack_error(SEEDS)
    worst["gnn_stack"] = gnn_stack_error(SEEDS)
    elapsed = time.perf_counter() - start
    name = max(worst, key=worst.get)
    ok = worst[name] < TOL and elapsed < 120
    verdict(1, ok, f"{len(worst)} checks x {len(SEEDS)} seeds, worst rel err {worst[name]:.1e} ({name}), {elapsed:.0f}s < 120s")


# ---------------------------------------------------------------- 2 formulas


def test_criterion_2_formula_oracles():
    rng = np.random.default_rng(2024)
    errs = {}
    p = _simplices(rng, N, 2)
    errs["entropy"] = np.abs(entropy(p) - [_entropy_ref(r) for r in p]).max()
    fg = rng.random((10, N))
    got = mcdo_expectation(np.stack([1 - fg, fg], -1).reshape(10, N, 1, 1, 2))[..., 1].reshape(N)
    errs["expectation"] = np.abs(got - [_expectation_ref(fg[:, i]) for i in range(N)]).max()
    p, q = _simplices(rng, N, 2), _simplices(rng, N, 2)
    ref = np.array([_diversity_ref(a, b) for a, b in zip(p, q)])
    errs["diversity"] = (np.abs(edge_diversity(p, q) - ref) / np.maximum(1.0, np.abs(ref))).max()
    a, b = rng.random(N), rng.random(N)
    errs["intensity"] = np.abs(edge_intensity(a, b, 1.0) - [_gauss_ref((x - y) ** 2, 1.0) for x, y in zip(a, b)]).max()
    xi, xj = rng.integers(0, 64, (N, 3)), rng.integers(0, 64, (N, 3))
    xj[: N // 2] = xi[: N // 2] + rng.integers(-2, 3, (N // 2, 3))
    ref = [_gauss_ref(int(np.sum((u - v) ** 2)), 1.0) for u, v in zip(xi, xj)]
    errs["position"] = np.abs(edge_position(xi, xj, 1.0) - ref).max()
    anchors = [
        abs(entropy(np.array([0.5, 0.5])) - math.log(2)),
        abs(float(edge_intensity(0.0, 1.0, 1.0)) - math.exp(-0.5)),
        abs(float(edge_diversity(np.array([0.9, 0.1]), np.array([0.1, 0.9]))) - 3.5156),
    ]
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-6 and anchors[0] < 1e-12 and anchors[1] < 1e-12 and anchors[2] < 5e-5
    verdict(2, ok, f"5 formulas x {N} inputs, worst err {errs[worst]:.1e} ({worst}); anchors ln2, e^-0.5, 3.5156 hold")


# ---------------------------------------------------------------- 3 neighbours


def test_criterion_3_neighbor_correctness():
    mismatches = 0
    cases = 0
    for n in (1, 2, 7, 64, 200, 500, 1000):
        rng = np.random.default_rng(n)
        for feats in (rng.standard_normal((n, 3)), rng.integers(0, 4, (n, 3)).astype(float), rng.standard_normal((n, 16)) + 1e3):
            k = min(5, n)
            q = feats[: min(n, 200)]
            banned = [np.concatenate([[i], rng.choice(n, min(2, n), replace=False)]) for i in range(len(q))]
            mismatches += not np.array_equal(knn_feature(q, feats, k), _brute_knn(q, feats, k))
            mismatches += not np.array_equal(knn_select(q, feats, k, banned), _brute_knn(q, feats, k, banned))
            cases += 2
    fps_bad = 0
    for n in (1, 39, 40, 41, 256, 1000, 24716):
        fps_bad += len(farthest_point_sample(np.random.default_rng(n).random((n, 3)), 1 / 40)) != math.ceil(n / 40)
    steps_bad = steps = 0
    for seed in range(12):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 257))
        feats = rng.random((n, 3))
        chosen = farthest_point_sample(feats, float(rng.uniform(0.05, 1.0)), seed)
        dist = np.sum((feats[:, None] - feats[None]) ** 2, axis=-1)
        for t in range(1, len(chosen)):
            mind = dist[:, chosen[:t]].min(axis=1)
            steps_bad += chosen[t] != np.flatnonzero(mind == mind.max())[0]
            steps += 1
    ok = mismatches == 0 and fps_bad == 0 and steps_bad == 0
    verdict(3, ok, f"kNN {cases - mismatches}/{cases} exact vs brute force (N<=1000); FPS counts {7 - fps_bad}/7; greedy steps {steps - steps_bad}/{steps}")


# ---------------------------------------------------------------- 4 PNA / GCN


def test_criterion_4_pna_gcn_oracles():
    oracle = drift = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 60))
        s, d, w = _random_edges(rng, n, 4 * n)
        x = rng.standard_normal((n, 4)).astype(np.float32)
        delta = float(rng.uniform(0.5, 3.0))
        wt = (rng.standard_normal((48, 5)) * 0.3).astype(np.float32)
        root = (rng.standard_normal((4, 5)) * 0.3).astype(np.float32)
        b = rng.standard_normal(5).astype(np.float32)
        edges = EdgeIndex.build(s, d, w, n)
        ref = _pna_oracle(x, s, d, w, delta)
        oracle = max(oracle, np.abs(pna_aggregate(Tensor(x), edges, delta).data - ref).max())
        got = pna_block(Tensor(x), edges, delta, Tensor(wt), Tensor(b), Tensor(root)).data
        oracle = max(oracle, np.abs(got - np.maximum(ref @ wt + x.astype(np.float64) @ root + b, 0)).max())
        keep = s != d
        got = gcn_layer(Tensor(x), s[keep], d[keep], w[keep], Tensor(wt[:4]), Tensor(b)).data
        oracle = max(oracle, np.abs(got - _gcn_oracle(x, s[keep], d[keep], w[keep], wt[:4], b)).max())
        base = pna_aggregate(Tensor(x), edges, delta).data
        order = rng.permutation(len(s))
        shuffled = pna_aggregate(Tensor(x), EdgeIndex.build(s[order], d[order], w[order], n), delta).data
        perm = rng.permutation(n)
        inv = np.argsort(perm)
        moved = pna_aggregate(Tensor(x[perm]), EdgeIndex.build(inv[s], inv[d], w, n), delta).data
        drift = max(drift, np.abs(shuffled - base).max(), np.abs(moved - base[perm]).max())
    for mode in ("six_only", "intra", "random16"):
        rng = np.random.default_rng(11)
        cfg = NeighborConfig(mode=mode)
        g = augment(toy_graph(rng, 80), cfg)
        model = GnnModel(3, 16, 2, degree_normalizer([g]), 0)
        base = gnn_forward(model, g, cfg).probs.data
        perm = rng.permutation(g.num_nodes)
        drift = max(drift, np.abs(gnn_forward(model, _permute_graph(g, perm), cfg).probs.data - base[perm]).max())
        order = rng.permutation(g.num_edges)
        g2 = g.with_edges(g.src[order], g.dst[order], g.weight[order], g.kind[order])
        drift = max(drift, np.abs(gnn_forward(model, g2, cfg).probs.data - base).max())
    ok = oracle < 1e-5 and drift < 1e-6
    verdict(4, ok, f"max |oracle diff| {oracle:.1e} < 1e-5; permutation drift {drift:.1e} < 1e-6")


# ---------------------------------------------------------------- 5 refinement contract


def test_criterion_5_refinement_contract(tmp_path):
    (tmp_path / "c.yaml").write_text(TINY)
    assert run(tmp_path, "synth") == 0 and run(tmp_path, "train-unet") == 0
    ckpt = tmp_path / "out" / "unet" / "segnet.ckpt"
    before = ckpt.read_bytes()
    codes = [run(tmp_path, "refine", "--experiment", e) for e in ("six_connectivity", "random16_baseline", "intra", "inter")]
    unchanged = ckpt.read_bytes() == before

    train, test = synth_dataset(4, 2, (16, 16, 16), seed=1, levels=2)
    net = SegNet(SegNetConfig(levels=2, base_width=4))
    P.train_segnet(net, train, epochs=3, lr=3e-3)
    exp = P.ExperimentConfig(seeds=(0,), refine_epochs=6, patience=3, mcdo_passes=3, tau=0.05, hidden=8)
    cfg = P.PipelineConfig()
    bank = P.build_bank([P.analyze(net, v, exp, cfg) for v in train], cfg.neighbor)
    outside = 0
    for name in ("six_connectivity", "random16_baseline", "intra", "inter"):
        for v in test:
            res = P.refine_volume(net, v, replace(exp, experiment=name), cfg, bank if name == "inter" else None)
            nodes = {tuple(c) for c in res.graph.coords[res.graph.own].tolist()}
            outside += sum(tuple(c) not in nodes for c in np.argwhere(res.mask != res.cnn_mask).tolist())
    sure = net.copy()
    sure.params["head.b"].data[:] = [-80.0, 80.0]
    res = P.refine_volume(sure, test[0], exp)
    passthrough = res.passthrough and np.array_equal(res.mask, res.cnn_mask)
    ok = codes == [0] * 4 and unchanged and outside == 0 and passthrough
    verdict(5, ok, f"checkpoint bitwise unchanged={unchanged}; changed voxels off node coords={outside}; empty-uncertainty passthrough={passthrough}")


# ---------------------------------------------------------------- 6, 7 synthetic benchmark


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    """Full CLI run of the synthetic benchmark: data, U-Net training, six-row matrix."""
    tmp = tmp_path_factory.mktemp("benchmark")
    argv = ["--config", str(BENCHMARK), "--out", str(tmp / "out")]
    start = time.perf_counter()
    for cmd in ("synth", "train-unet", "matrix"):
        assert cli.main([cmd, *argv]) == 0, cmd
    elapsed = time.perf_counter() - start
    (rundir,) = (tmp / "out" / "runs").glob("*/matrix")
    means = {}
    for name, _, _, d in IO.read_dice_csv(rundir / "results.csv"):
        means.setdefault(name, []).append(d)
    return rundir, {k: float(np.mean(v)) for k, v in means.items()}, elapsed


def test_criterion_6_directional_reproduction(benchmark):
    _, m, elapsed = benchmark
    six, rnd, inter, intra, uat = (m[k] for k in ("six_connectivity", "random16_baseline", "inter", "intra", "intra_uat"))
    checks = {
        "six<random16": six < rnd,
        "random16<=inter": rnd <= inter,
        "inter<intra": inter < intra,
        "intra_uat>=intra+0.003": uat >= intra + 0.003,
        "runtime<45min": elapsed < 45 * 60,
    }
    failed = [k for k, v in checks.items() if not v]
    means = ", ".join(f"{k} {v:.4f}" for k, v in m.items())
    verdict(6, not failed, f"mean Dice {means}; {elapsed / 60:.1f} min" + (f"; violated {failed}" if failed else ""))


def test_criterion_7_neighbor_semantics(benchmark):
    rundir, _, _ = benchmark
    agree, base = [], []
    for path in sorted((rundir / "graphs").glob("intra_test*.graph")):
        g = IO.deserialize_graph(path.read_bytes())
        sel = g.kind == INTRA
        labels = g.labels.astype(np.int64)
        agree.append(edge_label_agreement(labels, g.src[sel], g.dst[sel]))
        base.append(random_edge_baseline(labels, g.src[sel], g.dst[sel]))
    a, b = float(np.mean(agree)), float(np.mean(base))
    verdict(7, bool(agree) and a >= b + 0.1, f"dynamic-edge agreement {a:.3f} vs random baseline {b:.3f} over {len(agree)} graphs (need +0.1)")


# ---------------------------------------------------------------- 8 determinism


def test_criterion_8_byte_identical_reruns(tmp_path):
    commands = (["synth"], ["train-unet"], ["mcdo"], ["build-graph", "--json"], ["refine"],
                ["refine", "--experiment", "inter"], ["uat", "--experiment", "intra_uat"], ["matrix"], ["eval"],
                ["inspect-neighbors"])
    trees = []
    for attempt in ("a", "b"):
        tmp = tmp_path / attempt
        tmp.mkdir()
        (tmp / "c.yaml").write_text(TINY.replace("refine_epochs: 4", "refine_epochs: 2"))
        assert all(run(tmp, *cmd) == 0 for cmd in commands)
        trees.append(_tree(tmp / "out"))
    a, b = trees
    differing = sorted(set(a) ^ set(b)) + [k for k in a if k in b and a[k] != b[k]]
    graphs = sum(k.endswith(".graph") for k in a)
    reports = sum(k.endswith("results.csv") for k in a)
    verdict(8, not differing, f"{len(a)} artifacts from {len(commands)} subcommands ({graphs} graphs, {reports} Dice reports); differing {differing}")

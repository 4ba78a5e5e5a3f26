import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import toy_graph
from uncertgraph.errors import DomainError, UncertGraphError
from uncertgraph.neighbors import (
    NeighborConfig,
    TrainGraphBank,
    add_inter_edges,
    add_intra_edges,
    add_random_edges,
    augment,
    farthest_point_sample,
    fps_count,
    knn_feature,
    knn_select,
    rewire,
)
from uncertgraph.uncertainty import INTER, INTRA, RANDOM, SIX


def _brute_knn(q, c, k, banned=None):
    out = np.full((len(q), k), -1)
    for i, row in enumerate(q):
        d = np.sum((c - row) ** 2, axis=1)
        if banned is not None:
            d[banned[i]] = np.inf
        order = np.lexsort((np.arange(len(c)), d))[:k]
        order = order[np.isfinite(d[order])]
        out[i, : len(order)] = order
    return out


@pytest.mark.parametrize("n", [1, 7, 200, 1000])
def test_knn_matches_brute_force(n):
    rng = np.random.default_rng(n)
    feats = rng.standard_normal((n, 3))
    k = min(5, n)
    q = feats[rng.choice(n, min(n, 150), replace=False)]
    np.testing.assert_array_equal(knn_feature(q, feats, k), _brute_knn(q, feats, k))


@pytest.mark.parametrize("seed", range(4))
def test_knn_ties_and_exclusions_match_brute_force(seed):
    # integer features make many exact distance ties
    rng = np.random.default_rng(seed)
    n = int(rng.integers(50, 1000))
    feats = rng.integers(0, 4, (n, 3)).astype(np.float64)
    q = feats[:120]
    banned = [np.concatenate([[i], rng.choice(n, 3, replace=False)]) for i in range(len(q))]
    np.testing.assert_array_equal(knn_select(q, feats, 6, banned), _brute_knn(q, feats, 6, banned))
    self_ex = knn_feature(feats, feats, 4, exclude_self=True)
    np.testing.assert_array_equal(self_ex, _brute_knn(feats, feats, 4, [np.array([i]) for i in range(n)]))


def test_knn_far_offset_features_stay_exact():
    # a large common offset invites cancellation in squared distances
    rng = np.random.default_rng(5)
    feats = 1e6 + rng.standard_normal((300, 4)) * 1e-3
    np.testing.assert_array_equal(knn_feature(feats[:50], feats, 5), _brute_knn(feats[:50], feats, 5))


def test_knn_duplicate_heavy_hidden_features():
    # rectified features: many rows collapse onto the origin, so ties abound
    rng = np.random.default_rng(6)
    feats = np.maximum(rng.standard_normal((900, 32)) - 1.2, 0.0)
    feats[::3] = 0.0
    q = np.maximum(rng.standard_normal((400, 32)) - 1.2, 0.0)
    q[::2] = 0.0
    np.testing.assert_array_equal(knn_select(q, feats, 5), _brute_knn(q, feats, 5))
    banned = [np.arange(i % 7) * 3 for i in range(len(q))]
    np.testing.assert_array_equal(knn_select(q, feats, 5, banned), _brute_knn(q, feats, 5, banned))


def test_knn_examples_and_errors():
    c = np.array([[0.0], [3.0], [1.0], [2.0]])
    np.testing.assert_array_equal(knn_feature(np.array([[3.0]]), c, 1), [[1]])
    np.testing.assert_array_equal(knn_feature(np.array([[0.0]]), c[[1, 2, 3]] , 2), [[1, 2]])
    with pytest.raises(DomainError):
        knn_feature(c, c, 4, exclude_self=True)
    with pytest.raises(DomainError):
        knn_feature(c, c, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 120), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_knn_property_matches_brute_force(n, k, seed):
    rng = np.random.default_rng(seed)
    feats = np.round(rng.standard_normal((n, 2)), 1)
    k = min(k, n)
    np.testing.assert_array_equal(knn_feature(feats, feats, k), _brute_knn(feats, feats, k))


# ---------------------------------------------------------------- FPS


def test_fps_count_at_one_fortieth():
    assert fps_count(80, 1 / 40) == 2
    for n in (1, 39, 40, 41, 1000, 24716):
        assert fps_count(n, 1 / 40) == math.ceil(n / 40)
        feats = np.random.default_rng(n).random((n, 3))
        assert len(farthest_point_sample(feats, 1 / 40)) == math.ceil(n / 40)


def test_fps_ratio_one_returns_everything():
    feats = np.random.default_rng(0).random((30, 3))
    assert sorted(farthest_point_sample(feats, 1.0).tolist()) == list(range(30))


@pytest.mark.parametrize("seed", range(10))
def test_fps_each_step_is_the_argmax_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 257))
    feats = rng.random((n, 3))
    ratio = float(rng.uniform(0.05, 1.0))
    chosen = farthest_point_sample(feats, ratio, seed)
    assert len(chosen) == math.ceil(n * ratio)
    assert len(set(chosen.tolist())) == len(chosen)
    dist = np.sum((feats[:, None] - feats[None]) ** 2, axis=-1)
    for t in range(1, len(chosen)):
        mind = dist[:, chosen[:t]].min(axis=1)
        assert chosen[t] == np.flatnonzero(mind == mind.max())[0]


def test_fps_spreads_points_better_than_random():
    gaps_fps, gaps_rand = [], []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        feats = rng.random((400, 3))
        m = fps_count(400, 1 / 40)
        for idx, store in ((farthest_point_sample(feats, 1 / 40, seed), gaps_fps), (rng.choice(400, m, replace=False), gaps_rand)):
            d = np.sqrt(((feats[idx, None] - feats[None, idx]) ** 2).sum(-1))
            store.append(d[np.triu_indices(m, 1)].min())
    assert np.mean(gaps_fps) >= np.mean(gaps_rand)


def test_fps_errors():
    with pytest.raises(UncertGraphError):
        farthest_point_sample(np.zeros((0, 3)), 0.5)
    with pytest.raises(DomainError):
        farthest_point_sample(np.zeros((4, 3)), 0.0)


# ---------------------------------------------------------------- edge builders


def _pairs(graph, kind):
    sel = graph.kind == kind
    return list(zip(graph.src[sel].tolist(), graph.dst[sel].tolist()))


@pytest.mark.parametrize("seed", range(5))
def test_intra_edges_match_knn_oracle(seed):
    g = toy_graph(np.random.default_rng(seed), 60)
    out = add_intra_edges(g, k=5)
    pairs = _pairs(out, INTRA)
    assert len(pairs) == 5 * 60 and len(set(pairs)) == len(pairs)
    six = set(_pairs(g, SIX))
    assert not six & set(pairs)
    banned = [np.array([i] + [s for s, d in six if d == i]) for i in range(60)]
    ref = _brute_knn(g.features.astype(np.float64), g.features.astype(np.float64), 5, banned)
    got = np.array([s for s, _ in pairs]).reshape(60, 5)
    np.testing.assert_array_equal(got, ref)


def test_intra_cluster_members_link_first():
    rng = np.random.default_rng(0)
    g = toy_graph(rng, 7, shape=(7, 7, 7))
    feats = np.tile(np.array([[0.9, 0.1, 0.5]], np.float32), (7, 1))
    feats[:3] = [0.1, 0.2, 0.1]
    feats += rng.normal(0, 1e-3, feats.shape).astype(np.float32)
    g = g.with_edges(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))
    from dataclasses import replace

    out = add_intra_edges(replace(g, features=feats), k=2)
    for s, d in _pairs(out, INTRA):
        assert (s < 3) == (d < 3)


def test_intra_small_graph_warns_and_six_only_is_identity():
    g = toy_graph(np.random.default_rng(1), 4)
    with pytest.warns(UserWarning):
        out = add_intra_edges(g, k=5)
    assert (out.kind == INTRA).sum() <= 4 * 3
    assert augment(g, NeighborConfig(mode="six_only")) is g


def test_random_edges_counts_reproducibility_and_exclusions():
    g = toy_graph(np.random.default_rng(2), 80)
    a = add_random_edges(g, 16, seed=3)
    b = add_random_edges(g, 16, seed=3)
    np.testing.assert_array_equal(a.src, b.src)
    pairs = _pairs(a, RANDOM)
    assert np.all(np.bincount([d for _, d in pairs], minlength=80) == 16)
    assert len(set(pairs)) == len(pairs)
    assert not set(pairs) & set(_pairs(g, SIX))
    assert all(s != d for s, d in pairs)
    assert not np.array_equal(add_random_edges(g, 16, seed=4).src, a.src)


def test_random_edges_uniform_chi_square():
    g = toy_graph(np.random.default_rng(3), 40, shape=(40, 40, 40))  # sparse: almost no 6-neighbours
    g = g.with_edges(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))
    counts = np.zeros(39)
    for seed in range(700):
        out = add_random_edges(g, 16, seed=seed)
        src = out.src[out.dst == 0]
        counts += np.bincount(src, minlength=40)[1:]
    assert counts.sum() >= 10_000
    assert stats.chisquare(counts).pvalue > 1e-3


def test_random_edges_small_graph_warns():
    g = toy_graph(np.random.default_rng(4), 10)
    with pytest.warns(UserWarning):
        out = add_random_edges(g, 16)
    assert (out.kind == RANDOM).sum() <= 10 * 9


def _bank(rng, sizes):
    graphs = [toy_graph(rng, n, shape=(12, 12, 12), volume_id=f"train{i}") for i, n in enumerate(sizes)]
    return TrainGraphBank.build(graphs, 1.0, 0)


def test_inter_edges_match_concatenated_scan():
    rng = np.random.default_rng(5)
    bank = _bank(rng, [200, 200, 200])
    g = toy_graph(rng, 50)
    out = add_inter_edges(g, bank, 5)
    own = np.flatnonzero(out.own)
    assert len(own) == 50 and out.imported.sum() == 600
    pairs = _pairs(out, INTER)
    assert np.all(np.bincount([d for _, d in pairs], minlength=50)[:50] == 5)
    pooled, labels, _, _ = bank.pooled()
    ref = _brute_knn(g.features.astype(np.float64), pooled.astype(np.float64), 5)
    got = (np.array([s for s, _ in pairs]) - 50).reshape(50, 5)
    np.testing.assert_array_equal(got, ref)
    np.testing.assert_array_equal(out.labels[50:], labels)
    assert all(out.imported[s] and not out.imported[d] for s, d in pairs)


def test_inter_identical_bank_node_selected_first_and_empty_bank():
    rng = np.random.default_rng(6)
    bank = _bank(rng, [30])
    g = toy_graph(rng, 10)
    from dataclasses import replace

    g = replace(g, features=g.features.copy())
    g.features[0] = bank.graphs[0].features[bank.samples[0][7]]
    out = add_inter_edges(g, bank, 5)
    first = out.src[(out.kind == INTER) & (out.dst == 0)][0]
    np.testing.assert_array_equal(out.features[first], g.features[0])
    with pytest.raises(UncertGraphError):
        add_inter_edges(g, TrainGraphBank([], []), 5)


def test_bank_fps_sizes():
    rng = np.random.default_rng(7)
    graphs = [toy_graph(rng, n, shape=(12, 12, 12)) for n in (81, 120, 400)]
    bank = TrainGraphBank.build(graphs, 1 / 40, 0)
    assert [len(s) for s in bank.samples] == [3, 3, 10]
    assert len(bank) == 16


def test_rewire_static_identity_and_determinism():
    g = toy_graph(np.random.default_rng(8), 60)
    static = NeighborConfig(mode="intra")
    aug = augment(g, static)
    hidden = np.random.default_rng(0).random((60, 8))
    assert rewire(aug, hidden, static) is aug
    dyn = NeighborConfig(mode="intra", rewire="per_block")
    a, b = rewire(aug, hidden, dyn), rewire(aug, hidden, dyn)
    np.testing.assert_array_equal(a.src, b.src)
    np.testing.assert_array_equal(a.dst, b.dst)
    # re-running on the original features reproduces the initial dynamic edges
    same = rewire(aug, g.features, dyn)
    assert sorted(_pairs(same, INTRA)) == sorted(_pairs(aug, INTRA))
    # six edges persist
    assert sorted(_pairs(a, SIX)) == sorted(_pairs(g, SIX))


def test_rewire_on_cluster_features_raises_purity():
    rng = np.random.default_rng(9)
    g = toy_graph(rng, 80, shape=(10, 10, 10))
    cluster = np.arange(80) % 2
    dyn = NeighborConfig(mode="intra", rewire="per_block")
    aug = augment(g, NeighborConfig(mode="intra"))
    hidden = cluster[:, None] * 3.0 + rng.normal(0, 0.3, (80, 4))

    def purity(graph):
        p = _pairs(graph, INTRA)
        return np.mean([cluster[s] == cluster[d] for s, d in p])

    assert purity(rewire(aug, hidden, dyn)) >= purity(aug)
    assert purity(rewire(aug, hidden, dyn)) > 0.95


def test_config_validation():
    for bad in (NeighborConfig(mode="x"), NeighborConfig(k=0), NeighborConfig(fps_ratio=0.0), NeighborConfig(rewire="y")):
        with pytest.raises(DomainError):
            bad.validate()
    assert NeighborConfig(mode="intra").rewire_policy == "static"
    assert NeighborConfig(mode="inter").rewire_policy == "per_block"


def test_inter_mode_needs_bank():
    g = toy_graph(np.random.default_rng(10), 20)
    with pytest.raises(UncertGraphError):
        augment(g, NeighborConfig(mode="inter"))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        augment(g, NeighborConfig(mode="random16"), seed=1)

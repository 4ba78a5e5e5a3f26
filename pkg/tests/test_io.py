import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import toy_graph
from uncertgraph import io
from uncertgraph.errors import ParseError
from uncertgraph.gnn import GnnModel
from uncertgraph.neighbors import TrainGraphBank, add_intra_edges
from uncertgraph.segnet import SegNet, SegNetConfig
from uncertgraph.synth import Volume
from uncertgraph.uncertainty import RefinementGraph


def _same_graph(a: RefinementGraph, b: RefinementGraph):
    for name in ("coords", "features", "uncertain", "labels", "src", "dst", "weight", "kind", "imported"):
        x, y = getattr(a, name), getattr(b, name)
        assert x.dtype == y.dtype, name
        assert x.shape == y.shape, name
        assert x.tobytes() == y.tobytes(), name
    assert a.volume_id == b.volume_id and a.meta == b.meta


def _random_graph(rng, n, e):
    g = RefinementGraph(
        coords=rng.integers(0, 512, (n, 3)),
        features=rng.standard_normal((n, 3)).astype(np.float32),
        uncertain=rng.random(n) < 0.5,
        labels=rng.integers(-1, 2, n).astype(np.int8),
        src=rng.integers(0, n, e),
        dst=rng.integers(0, n, e),
        weight=rng.random(e).astype(np.float32),
        kind=rng.integers(0, 4, e).astype(np.uint8),
        imported=rng.random(n) < 0.1,
        volume_id="vol",
        meta={"shape": [512, 512, 512]},
    )
    return g


def test_empty_edge_graph_round_trips():
    g = _random_graph(np.random.default_rng(0), 5, 0)
    _same_graph(io.deserialize_graph(io.serialize_graph(g)), g)
    _same_graph(io.graph_from_json(io.graph_to_json(g)), g)


def test_ten_thousand_node_graph_round_trips_bit_exactly():
    g = _random_graph(np.random.default_rng(1), 10_000, 60_000)
    data = io.serialize_graph(g)
    back = io.deserialize_graph(data)
    _same_graph(back, g)
    assert io.serialize_graph(back) == data
    _same_graph(io.graph_from_json(io.graph_to_json(g)), g)


def test_json_and_binary_describe_the_same_graph():
    g = add_intra_edges(toy_graph(np.random.default_rng(2), 40))
    doc = json.loads(io.graph_to_json(g))
    assert len(doc["nodes"]) == 40 and len(doc["edges"]) == g.num_edges
    assert {n["role"] for n in doc["nodes"]} <= {"certain", "uncertain"}
    assert doc["metadata"]["volume_id"] == "toy"
    assert io.serialize_graph(io.graph_from_json(io.graph_to_json(g))) == io.serialize_graph(g)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 50), st.integers(0, 200), st.integers(0, 2**31 - 1))
def test_graph_round_trip_property(n, e, seed):
    rng = np.random.default_rng(seed)
    g = _random_graph(rng, max(n, 1), e)
    _same_graph(io.deserialize_graph(io.serialize_graph(g)), g)


def test_truncated_payload_is_a_parse_error_with_offset():
    data = io.serialize_graph(_random_graph(np.random.default_rng(3), 100, 300))
    for cut in (0, 3, 7, 12, len(data) // 2, len(data) - 1):
        with pytest.raises(ParseError) as info:
            io.deserialize_graph(data[:cut])
        assert 0 <= info.value.offset <= len(data)
        assert "offset" in str(info.value)


def test_malformed_headers():
    data = io.serialize_graph(_random_graph(np.random.default_rng(4), 3, 2))
    with pytest.raises(ParseError):
        io.deserialize_graph(b"XXXX" + data[4:])
    with pytest.raises(ParseError):
        io.deserialize_graph(data[:8] + b"\xff" * (len(data) - 8))
    with pytest.raises(ParseError):
        io.graph_from_json("{not json")
    with pytest.raises(ParseError):
        io.bank_from_bytes(data)


def test_bank_round_trip():
    rng = np.random.default_rng(5)
    bank = TrainGraphBank.build([toy_graph(rng, n, (9, 9, 9), f"t{n}") for n in (50, 80)], 0.1, 3)
    back = io.bank_from_bytes(io.bank_to_bytes(bank))
    assert back.meta == bank.meta
    for a, b in zip(back.graphs, bank.graphs):
        _same_graph(a, b)
    for a, b in zip(back.samples, bank.samples):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(ParseError):
        io.bank_from_bytes(io.bank_to_bytes(bank)[:-5])


def test_segnet_checkpoint_round_trip():
    net = SegNet(SegNetConfig(levels=2, base_width=2))
    data = io.segnet_to_bytes(net, epoch=3, extra={"config_hash": "abc"})
    back, header = io.segnet_from_bytes(data)
    assert header["epoch"] == 3 and header["extra"]["config_hash"] == "abc"
    for k, v in net.params.items():
        assert back.params[k].data.tobytes() == v.data.tobytes()
    assert io.segnet_to_bytes(back, 3, {"config_hash": "abc"}) == data
    with pytest.raises(ParseError):
        io.segnet_from_bytes(data[:-1])
    with pytest.raises(ParseError):
        io.gnn_from_bytes(data)


def test_gnn_checkpoint_round_trip():
    model = GnnModel(3, 8, 2, 1.37, 4)
    data = io.gnn_to_bytes(model, {"mode": "intra", "k": 5})
    back, header = io.gnn_from_bytes(data)
    assert back.delta == model.delta and header["neighbor"]["mode"] == "intra"
    assert io.params_digest(back.params) == io.params_digest(model.params)
    assert io.gnn_to_bytes(back, {"mode": "intra", "k": 5}) == data


def test_volume_files(tmp_path):
    rng = np.random.default_rng(6)
    vol = Volume(rng.random((4, 5, 6)).astype(np.float32), (rng.random((4, 5, 6)) > 0.5).astype(np.uint8), id="v1")
    paths = io.write_volume(vol, tmp_path)
    assert paths[0].name == "v1.json"
    assert (tmp_path / "v1.f32").stat().st_size == 4 * 5 * 6 * 4
    back = io.read_volume(paths[0])
    assert back.intensities.tobytes() == vol.intensities.tobytes()
    np.testing.assert_array_equal(back.labels, vol.labels)
    (tmp_path / "v1.f32").write_bytes(b"\0" * 10)
    with pytest.raises(ParseError):
        io.read_volume(paths[0])


def test_dice_csv_and_manifest(tmp_path):
    rows = [("intra", 0, "test000", 0.1 + 0.2), ("intra", 1, "test000", 1.0)]
    path = io.atomic_write(tmp_path / "r.csv", io.dice_csv(rows))
    assert io.read_dice_csv(path) == rows
    io.write_manifest(tmp_path, tmp_path, {"stage": "x"}, [path])
    man = io.read_manifest(tmp_path)
    assert man["outputs"]["r.csv"] == io.sha256(path.read_bytes())
    assert io.read_manifest(tmp_path / "missing") is None

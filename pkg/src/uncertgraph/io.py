"""Bit-exact file formats: graphs (JSON and binary), checkpoints, volumes, banks.

Binary layouts are little-endian. Containers start with a 4-byte magic, a
``uint32`` header length and a UTF-8 JSON header, followed by raw arrays.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ParseError
from .gnn import GnnModel
from .neighbors import TrainGraphBank
from .segnet import SegNet, SegNetConfig
from .synth import Volume
from .tensor import Tensor
from .uncertainty import RefinementGraph

GRAPH_MAGIC = b"UGGR"
CKPT_MAGIC = b"UGCK"
BANK_MAGIC = b"UGBK"
FORMAT_VERSION = 1

_GRAPH_ARRAYS = (
    # name, dtype, columns (None = 1-D, "F" = feature width)
    ("coords", "<i8", 3, "n"),
    ("features", "<f4", "F", "n"),
    ("uncertain", "u1", None, "n"),
    ("labels", "i1", None, "n"),
    ("imported", "u1", None, "n"),
    ("src", "<i8", None, "e"),
    ("dst", "<i8", None, "e"),
    ("weight", "<f4", None, "e"),
    ("kind", "u1", None, "e"),
)


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True).encode()


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write(path: str | os.PathLike, data: bytes) -> Path:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


# ---------------------------------------------------------------- containers


def _pack(magic: bytes, header: dict, payload: bytes) -> bytes:
    head = canonical_json(header)
    return magic + struct.pack("<I", len(head)) + head + payload


def _unpack(data: bytes, magic: bytes) -> tuple[dict, int]:
    if len(data) < 8:
        raise ParseError("payload shorter than container preamble", len(data))
    if data[:4] != magic:
        raise ParseError(f"bad magic {data[:4]!r}, expected {magic!r}", 0)
    (hlen,) = struct.unpack_from("<I", data, 4)
    end = 8 + hlen
    if end > len(data):
        raise ParseError(f"header claims {hlen} bytes but only {len(data) - 8} remain", len(data))
    try:
        header = json.loads(data[8:end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"unreadable header: {exc}", 8) from None
    return header, end


def _read_array(data: bytes, offset: int, dtype: str, shape: tuple[int, ...]) -> tuple[np.ndarray, int]:
    nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
    if offset + nbytes > len(data):
        raise ParseError(f"truncated array: need {nbytes} bytes", offset)
    arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=offset).reshape(shape)
    return arr.copy(), offset + nbytes


# ---------------------------------------------------------------- graphs


def graph_to_bytes(graph: RefinementGraph) -> bytes:
    header = {
        "version": FORMAT_VERSION,
        "volume_id": graph.volume_id,
        "meta": graph.meta,
        "nodes": graph.num_nodes,
        "edges": graph.num_edges,
        "feature_width": int(graph.features.shape[1]),
    }
    parts = []
    for name, dtype, _, _ in _GRAPH_ARRAYS:
        parts.append(np.ascontiguousarray(getattr(graph, name)).astype(dtype, copy=False).tobytes())
    return _pack(GRAPH_MAGIC, header, b"".join(parts))


def graph_from_bytes(data: bytes, offset: int = 0) -> RefinementGraph:
    graph, _ = _graph_from_bytes(data, offset)
    return graph


def _graph_from_bytes(data: bytes, offset: int) -> tuple[RefinementGraph, int]:
    view = data[offset:]
    try:
        header, pos = _unpack(view, GRAPH_MAGIC)
        n, e, fw = int(header["nodes"]), int(header["edges"]), int(header["feature_width"])
    except ParseError as exc:
        raise ParseError(str(exc).rsplit(" (at byte", 1)[0], exc.offset + offset) from None
    except (KeyError, TypeError, ValueError):
        raise ParseError("graph header lacks node/edge counts", offset + 8) from None
    arrays = {}
    for name, dtype, cols, count in _GRAPH_ARRAYS:
        rows = n if count == "n" else e
        shape = (rows,) if cols is None else (rows, fw if cols == "F" else cols)
        try:
            arrays[name], pos = _read_array(view, pos, dtype, shape)
        except ParseError as exc:
            raise ParseError(f"{name}: truncated array", exc.offset + offset) from None
    graph = RefinementGraph(
        coords=arrays["coords"].astype(np.int64),
        features=arrays["features"].astype(np.float32),
        uncertain=arrays["uncertain"].astype(bool),
        labels=arrays["labels"].astype(np.int8),
        src=arrays["src"].astype(np.int64),
        dst=arrays["dst"].astype(np.int64),
        weight=arrays["weight"].astype(np.float32),
        kind=arrays["kind"].astype(np.uint8),
        imported=arrays["imported"].astype(bool),
        volume_id=header.get("volume_id", ""),
        meta=header.get("meta", {}),
    )
    return graph, offset + pos


def serialize_graph(graph: RefinementGraph) -> bytes:
    return graph_to_bytes(graph)


def deserialize_graph(data: bytes) -> RefinementGraph:
    return graph_from_bytes(data)


def graph_to_json(graph: RefinementGraph) -> str:
    """Human-readable twin of the binary form; float32 values survive exactly."""
    nodes = [
        {
            "coord": [int(c) for c in graph.coords[i]],
            "features": [float(f) for f in graph.features[i]],
            "role": "uncertain" if graph.uncertain[i] else "certain",
            "label": int(graph.labels[i]) if graph.labels[i] >= 0 else None,
            "imported": bool(graph.imported[i]),
        }
        for i in range(graph.num_nodes)
    ]
    edges = [
        {"src": int(s), "dst": int(d), "weight": float(w), "kind": int(k)}
        for s, d, w, k in zip(graph.src, graph.dst, graph.weight, graph.kind)
    ]
    doc = {
        "version": FORMAT_VERSION,
        "metadata": {"volume_id": graph.volume_id, "config": graph.meta, "feature_width": int(graph.features.shape[1])},
        "nodes": nodes,
        "edges": edges,
    }
    return json.dumps(doc, separators=(",", ":"))


def graph_from_json(text: str) -> RefinementGraph:
    try:
        doc = json.loads(text)
        nodes, edges, meta = doc["nodes"], doc["edges"], doc["metadata"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed graph JSON: {exc}", getattr(exc, "pos", 0)) from None
    fw = int(meta.get("feature_width", 3))
    n = len(nodes)
    return RefinementGraph(
        coords=np.array([nd["coord"] for nd in nodes], dtype=np.int64).reshape(n, 3),
        features=np.array([nd["features"] for nd in nodes], dtype=np.float32).reshape(n, fw),
        uncertain=np.array([nd["role"] == "uncertain" for nd in nodes], dtype=bool),
        labels=np.array([-1 if nd["label"] is None else nd["label"] for nd in nodes], dtype=np.int8),
        src=np.array([e["src"] for e in edges], dtype=np.int64),
        dst=np.array([e["dst"] for e in edges], dtype=np.int64),
        weight=np.array([e["weight"] for e in edges], dtype=np.float32),
        kind=np.array([e["kind"] for e in edges], dtype=np.uint8),
        imported=np.array([nd.get("imported", False) for nd in nodes], dtype=bool),
        volume_id=meta.get("volume_id", ""),
        meta=meta.get("config", {}),
    )


# ---------------------------------------------------------------- banks


def bank_to_bytes(bank: TrainGraphBank) -> bytes:
    header = {"version": FORMAT_VERSION, "graphs": len(bank.graphs), "meta": bank.meta, "samples": [len(s) for s in bank.samples]}
    body = b"".join(np.asarray(s, dtype="<i8").tobytes() + graph_to_bytes(g) for g, s in zip(bank.graphs, bank.samples))
    return _pack(BANK_MAGIC, header, body)


def bank_from_bytes(data: bytes) -> TrainGraphBank:
    header, pos = _unpack(data, BANK_MAGIC)
    counts = header.get("samples")
    if not isinstance(counts, list):
        raise ParseError("bank header lacks sample counts", 8)
    graphs, samples = [], []
    for count in counts:
        s, pos = _read_array(data, pos, "<i8", (int(count),))
        g, pos = _graph_from_bytes(data, pos)
        samples.append(s)
        graphs.append(g)
    return TrainGraphBank(graphs, samples, header.get("meta", {}))


# ---------------------------------------------------------------- checkpoints


def _params_payload(params: dict[str, Tensor]) -> tuple[list[dict], bytes]:
    layout = [{"name": k, "shape": list(v.shape)} for k, v in params.items()]
    payload = b"".join(np.ascontiguousarray(v.data, dtype="<f4").tobytes() for v in params.values())
    return layout, payload


def _read_params(data: bytes, header: dict, pos: int) -> dict[str, np.ndarray]:
    out = {}
    for entry in header["params"]:
        arr, pos = _read_array(data, pos, "<f4", tuple(entry["shape"]))
        out[entry["name"]] = arr.astype(np.float32)
    if pos != len(data):
        raise ParseError("trailing bytes after parameter payload", pos)
    return out


def segnet_to_bytes(net: SegNet, epoch: int = 0, extra: dict | None = None) -> bytes:
    layout, payload = _params_payload(net.params)
    header = {
        "kind": "segnet",
        "version": FORMAT_VERSION,
        "config": vars(net.config) if not hasattr(net.config, "__dataclass_fields__") else {k: getattr(net.config, k) for k in net.config.__dataclass_fields__},
        "seed": net.config.init_seed,
        "epoch": epoch,
        "params": layout,
        "extra": extra or {},
    }
    return _pack(CKPT_MAGIC, header, payload)


def segnet_from_bytes(data: bytes) -> tuple[SegNet, dict]:
    header, pos = _unpack(data, CKPT_MAGIC)
    if header.get("kind") != "segnet":
        raise ParseError(f"checkpoint holds {header.get('kind')!r}, not a segnet", 8)
    net = SegNet(SegNetConfig(**header["config"]))
    for name, arr in _read_params(data, header, pos).items():
        net.params[name].data = arr
    return net, header


def gnn_to_bytes(model: GnnModel, neighbor: dict | None = None, extra: dict | None = None) -> bytes:
    layout, payload = _params_payload(model.params)
    header = {
        "kind": "gnn",
        "version": FORMAT_VERSION,
        "config": model.config,
        "seed": model.config.get("seed", 0),
        "delta": model.delta,
        "neighbor": neighbor or {},
        "params": layout,
        "extra": extra or {},
    }
    return _pack(CKPT_MAGIC, header, payload)


def gnn_from_bytes(data: bytes) -> tuple[GnnModel, dict]:
    header, pos = _unpack(data, CKPT_MAGIC)
    if header.get("kind") != "gnn":
        raise ParseError(f"checkpoint holds {header.get('kind')!r}, not a gnn", 8)
    cfg = header["config"]
    model = GnnModel(cfg["in_width"], cfg["hidden"], cfg["classes"], header["delta"], cfg["seed"])
    for name, arr in _read_params(data, header, pos).items():
        model.params[name].data = arr
    return model, header


def params_digest(params: dict[str, Tensor]) -> str:
    return sha256(_params_payload(params)[1])


# ---------------------------------------------------------------- volumes


def write_volume(volume: Volume, directory: str | os.PathLike) -> list[Path]:
    """Write ``<id>.json`` sidecar plus ``<id>.f32`` (and ``<id>.labels.u8``).

    Returns the written paths, sidecar first.
    """
    directory = Path(directory)
    written = []
    payload = np.ascontiguousarray(volume.intensities, dtype="<f4").tobytes()
    sidecar = {
        "id": volume.id,
        "dims": list(volume.shape),
        "spacing": list(volume.spacing),
        "dtype": "float32-le",
        "payload": f"{volume.id}.f32",
        "payload_sha256": sha256(payload),
        "label_path": None,
    }
    written.append(atomic_write(directory / sidecar["payload"], payload))
    if volume.labels is not None:
        labels = np.ascontiguousarray(volume.labels, dtype="u1").tobytes()
        sidecar["label_path"] = f"{volume.id}.labels.u8"
        written.append(atomic_write(directory / sidecar["label_path"], labels))
    return [atomic_write(directory / f"{volume.id}.json", canonical_json(sidecar))] + written


def read_volume(sidecar_path: str | os.PathLike) -> Volume:
    sidecar_path = Path(sidecar_path)
    meta = json.loads(sidecar_path.read_text())
    dims = tuple(meta["dims"])
    raw = (sidecar_path.parent / meta["payload"]).read_bytes()
    expected = int(np.prod(dims)) * 4
    if len(raw) != expected:
        raise ParseError(f"volume payload has {len(raw)} bytes, expected {expected}", min(len(raw), expected))
    intens = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    labels = None
    if meta.get("label_path"):
        lab = (sidecar_path.parent / meta["label_path"]).read_bytes()
        if len(lab) != int(np.prod(dims)):
            raise ParseError("label payload length mismatch", len(lab))
        labels = np.frombuffer(lab, dtype="u1").reshape(dims).copy()
    return Volume(intens, labels, tuple(meta.get("spacing", (1.0, 1.0, 1.0))), meta["id"])


# ---------------------------------------------------------------- misc artifacts


def npy_bytes(array: np.ndarray) -> bytes:
    buf = _io.BytesIO()
    np.save(buf, np.ascontiguousarray(array), allow_pickle=False)
    return buf.getvalue()


def read_npy(path: str | os.PathLike) -> np.ndarray:
    return np.load(path, allow_pickle=False)


def png_bytes(rgb: np.ndarray) -> bytes:
    from PIL import Image

    buf = _io.BytesIO()
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def dice_csv(rows) -> bytes:
    """CSV with header experiment,seed,volume_id,dice; floats at full precision."""
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["experiment", "seed", "volume_id", "dice"])
    for exp, seed, vid, d in rows:
        writer.writerow([exp, int(seed), vid, repr(float(d))])
    return buf.getvalue().encode()


def read_dice_csv(path: str | os.PathLike) -> list[tuple[str, int, str, float]]:
    with open(path, newline="") as fh:
        return [(r["experiment"], int(r["seed"]), r["volume_id"], float(r["dice"])) for r in csv.DictReader(fh)]


def write_manifest(directory: str | os.PathLike, base: str | os.PathLike, record: dict, outputs: list[Path]) -> Path:
    """Manifest listing ``outputs`` with their hashes, paths relative to ``base``."""
    base = Path(base)
    record = dict(record)
    record["outputs"] = {str(Path(p).relative_to(base)): sha256(Path(p).read_bytes()) for p in sorted(map(Path, outputs))}
    return atomic_write(Path(directory) / "manifest.json", json.dumps(record, sort_keys=True, indent=1).encode() + b"\n")


def read_manifest(directory: str | os.PathLike) -> dict | None:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        return None
    return json.loads(path.read_text())

"""On-disk formats: tensor container, mask file, dataset file and network manifest.

All binary formats are little-endian.

* ``GSCCW1``: u32 tensor count, then per tensor a u16 name length, the UTF-8
  name, a u8 rank, u32 dims and f32 data.
* ``GSCCM1``: u32 unit count followed by the mask packed LSB-first.
* ``GSCCD1``: u32 N, u32 C, H, W, u32 class count, f32 images, u32 labels.

The network manifest is JSON; its tensors live in a sibling ``GSCCW1`` file.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError
from .netmodel import EdgeKind, LayerKind, LayerSpec, NetworkSpec, PruningMask

WEIGHTS_MAGIC = b"GSCCW1"
MASK_MAGIC = b"GSCCM1"
DATA_MAGIC = b"GSCCD1"


def _expect_magic(buf: bytes, magic: bytes, path) -> int:
    if buf[: len(magic)] != magic:
        raise FormatError(f"{path}: bad magic {buf[:len(magic)]!r}, expected {magic!r}")
    return len(magic)


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [WEIGHTS_MAGIC, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.array(value, dtype="<f4", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes, path="<bytes>") -> dict[str, np.ndarray]:
    pos = _expect_magic(buf, WEIGHTS_MAGIC, path)
    try:
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated tensor container ({exc})") from exc
    return out


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes(), path)


def save_mask(path, mask: PruningMask) -> None:
    packed = np.packbits(mask.bits.astype(np.uint8), bitorder="little")
    Path(path).write_bytes(MASK_MAGIC + struct.pack("<I", len(mask)) + packed.tobytes())


def load_mask(path) -> PruningMask:
    buf = Path(path).read_bytes()
    pos = _expect_magic(buf, MASK_MAGIC, path)
    (count,) = struct.unpack_from("<I", buf, pos)
    packed = np.frombuffer(buf, dtype=np.uint8, offset=pos + 4)
    if packed.size != (count + 7) // 8:
        raise FormatError(f"{path}: mask payload has {packed.size} bytes for {count} bits")
    return PruningMask(np.unpackbits(packed, bitorder="little", count=count).astype(bool))


def save_dataset(path, images: np.ndarray, labels: np.ndarray, num_classes: int) -> None:
    n, c, h, w = images.shape
    header = DATA_MAGIC + struct.pack("<IIIII", n, c, h, w, num_classes)
    body = np.ascontiguousarray(images, dtype="<f4").tobytes() + np.asarray(labels, dtype="<u4").tobytes()
    Path(path).write_bytes(header + body)


def load_dataset_arrays(path) -> tuple[np.ndarray, np.ndarray, int]:
    buf = Path(path).read_bytes()
    pos = _expect_magic(buf, DATA_MAGIC, path)
    n, c, h, w, k = struct.unpack_from("<IIIII", buf, pos)
    pos += 20
    count = n * c * h * w
    if len(buf) != pos + 4 * count + 4 * n:
        raise FormatError(f"{path}: dataset payload size mismatch")
    images = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(n, c, h, w).astype(np.float32)
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=pos + 4 * count).astype(np.int64)
    return images, labels, k


_LAYER_SCALARS = ("id", "in_channels", "out_channels", "eps", "prunable", "relu", "pool_mode")
_LAYER_PAIRS = ("kernel", "stride", "padding", "spatial_out")


def network_to_manifest(net: NetworkSpec, weights_file: str) -> tuple[dict, dict[str, np.ndarray]]:
    layers, tensors = [], {}
    for layer in net.layers:
        entry = {"kind": layer.kind.name}
        entry.update({k: getattr(layer, k) for k in _LAYER_SCALARS})
        entry.update({k: list(getattr(layer, k)) for k in _LAYER_PAIRS})
        entry["tensors"] = sorted(layer.tensors())
        for name, value in layer.tensors().items():
            tensors[f"layer{layer.id}.{name}"] = value
        layers.append(entry)
    manifest = {
        "format": "graphprune-net/1",
        "input_resolution": list(net.input_resolution),
        "weights": weights_file,
        "layers": layers,
        "edges": [[s, d, k.name] for s, d, k in net.edges],
    }
    return manifest, tensors


def manifest_to_network(manifest: dict, tensors: Mapping[str, np.ndarray]) -> NetworkSpec:
    layers = []
    for entry in manifest["layers"]:
        kwargs = {k: entry[k] for k in _LAYER_SCALARS}
        kwargs.update({k: tuple(entry[k]) for k in _LAYER_PAIRS})
        for name in entry.get("tensors", []):
            key = f"layer{entry['id']}.{name}"
            if key not in tensors:
                raise FormatError(f"missing tensor {key}")
            kwargs[name] = np.array(tensors[key], dtype=np.float32)
        layers.append(LayerSpec(kind=LayerKind[entry["kind"]], **kwargs))
    edges = [(s, d, EdgeKind[k]) for s, d, k in manifest["edges"]]
    net = NetworkSpec(tuple(layers), tuple(edges), tuple(manifest["input_resolution"]))
    net.validate()
    return net


def save_network(path, net: NetworkSpec) -> None:
    path = Path(path)
    weights_path = path.with_suffix(".gsccw")
    manifest, tensors = network_to_manifest(net, weights_path.name)
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    save_tensors(weights_path, tensors)


def load_network(path) -> NetworkSpec:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid manifest ({exc})") from exc
    tensors = load_tensors(path.parent / manifest["weights"])
    return manifest_to_network(manifest, tensors)

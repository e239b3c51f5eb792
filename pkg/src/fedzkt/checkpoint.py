"""Checkpoint files: one JSON manifest line followed by raw little-endian float64 data.

Layout::

    {"format": "fedzkt-net", "version": 1, ...}\\n
    <params as <f8><buffers as <f8>
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .nn import LayerSpec, NeuralNet

FORMAT_NAME = "fedzkt-net"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(net: NeuralNet, role: str = "") -> bytes:
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "role": role,
        "input_shape": list(net.input_shape),
        "output_shape": list(net.output_shape),
        "layers": [spec.to_dict() for spec in net.specs],
        "n_params": int(net.params.size),
        "n_buffers": int(net.buffers.size),
        "dtype": "<f8",
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n"
    return head + net.params.astype("<f8").tobytes() + net.buffers.astype("<f8").tobytes()


def loads(data: bytes) -> NeuralNet:
    nl = data.find(b"\n")
    if nl < 0:
        raise CheckpointError("missing manifest line")
    try:
        manifest = json.loads(data[:nl])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"bad manifest: {e}") from None
    if manifest.get("format") != FORMAT_NAME:
        raise CheckpointError(f"not a {FORMAT_NAME} checkpoint")
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    layers = [LayerSpec.from_dict(d) for d in manifest["layers"]]
    net = NeuralNet(tuple(manifest["input_shape"]), layers)
    n_p, n_b = manifest["n_params"], manifest["n_buffers"]
    if (n_p, n_b) != (net.params.size, net.buffers.size):
        raise CheckpointError("manifest sizes disagree with the layer description")
    blob = data[nl + 1 :]
    if len(blob) != 8 * (n_p + n_b):
        raise CheckpointError(f"expected {8 * (n_p + n_b)} data bytes, found {len(blob)}")
    values = np.frombuffer(blob, dtype="<f8")
    net.params[:] = values[:n_p]
    net.buffers[:] = values[n_p:]
    return net


def save_checkpoint(net: NeuralNet, path: str | os.PathLike, role: str = "") -> None:
    atomic_write_bytes(path, dumps(net, role))


def load_checkpoint(path: str | os.PathLike) -> NeuralNet:
    return loads(Path(path).read_bytes())

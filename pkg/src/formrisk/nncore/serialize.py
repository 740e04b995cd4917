"""Binary model files.

    b"FNET" | version u8 | u32 spec length | UTF-8 JSON spec | u32 tensor count
    | tensors as FGRID blobs | 32-byte SHA-256 of everything before it

The JSON spec describes the layer stacks; 1D parameters are stored as
``(1, n)`` grids and 4D convolution kernels as ``(out, in, k*k)`` grids, with
the true shapes recovered from the spec.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .. import fgrid

MAGIC = b"FNET"
VERSION = 1


class ModelFileError(ValueError):
    pass


def _as_grid(p: np.ndarray) -> np.ndarray:
    if p.ndim == 1:
        return p.reshape(1, -1)
    if p.ndim == 4:
        return p.reshape(p.shape[0], p.shape[1], -1)
    return p


def dump_bytes(spec: dict, tensors: list[np.ndarray]) -> bytes:
    spec_bytes = json.dumps(spec, sort_keys=True).encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<B", VERSION)
    body += struct.pack("<I", len(spec_bytes)) + spec_bytes
    body += struct.pack("<I", len(tensors))
    for t in tensors:
        body += fgrid.encode(_as_grid(np.asarray(t)))
    body += hashlib.sha256(bytes(body)).digest()
    return bytes(body)


def load_bytes(buf: bytes) -> tuple[dict, list[np.ndarray]]:
    """Returns (spec, flat tensors) with tensors still in grid shape."""
    if len(buf) < 32 or buf[:4] != MAGIC:
        raise ModelFileError("not a model file")
    payload, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ModelFileError("checksum mismatch")
    (version,) = struct.unpack_from("<B", payload, 4)
    if version != VERSION:
        raise ModelFileError(f"unsupported model file version {version}")
    (n_spec,) = struct.unpack_from("<I", payload, 5)
    spec = json.loads(payload[9 : 9 + n_spec].decode("utf-8"))
    pos = 9 + n_spec
    (n_tensors,) = struct.unpack_from("<I", payload, pos)
    pos += 4
    tensors = []
    for _ in range(n_tensors):
        t, pos = fgrid.decode(payload, pos)
        tensors.append(t)
    if pos != len(payload):
        raise ModelFileError("trailing bytes before checksum")
    return spec, tensors


def save(path, spec: dict, tensors: list[np.ndarray]) -> None:
    Path(path).write_bytes(dump_bytes(spec, tensors))


def load(path) -> tuple[dict, list[np.ndarray]]:
    return load_bytes(Path(path).read_bytes())


def restore_state(model, tensors: list[np.ndarray]) -> None:
    """Load flat tensors into ``model`` reshaping to its parameter shapes."""
    params = model.parameters()
    if len(params) != len(tensors):
        raise ModelFileError(f"expected {len(params)} tensors, file has {len(tensors)}")
    model.set_state([t.reshape(p.shape).astype(p.dtype) for (p, _), t in zip(params, tensors)])


def save_network(path, net) -> None:
    spec = {"type": "sequential", "layers": net.specs(), "dtype": net.dtype.name}
    save(path, spec, [p for p, _ in net.parameters()])


def load_network(path):
    from .network import Sequential

    spec, tensors = load(path)
    if spec.get("type") != "sequential":
        raise ModelFileError(f"expected a sequential network, got {spec.get('type')!r}")
    net = Sequential.from_specs(spec["layers"], dtype=spec.get("dtype", "float32"))
    restore_state(net, tensors)
    return net

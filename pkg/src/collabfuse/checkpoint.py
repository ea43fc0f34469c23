"""Versioned binary checkpoints.

Layout (little-endian)::

    magic      4 bytes  b"CFCK"
    version    u16      1
    hdr_len    u32      length of the JSON header
    header     hdr_len  UTF-8 JSON: variant, scenario, model config, meta
    n_tensors  u32
    per tensor:
        name_len u16, name (UTF-8), ndim u8, dims u32[ndim],
        data f64[prod(dims)] row-major

Tensors appear in ``CollabModel.parameters()`` order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .model import CollabModel, ModelConfig
from .world import ScenarioConfig

MAGIC = b"CFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(model: CollabModel, meta: dict | None = None) -> bytes:
    header = json.dumps({
        "variant": model.variant,
        "scenario": model.scenario.to_dict(),
        "model": model.config.to_dict(),
        "meta": meta or {},
    }, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(header)), header]
    params = model.parameters()
    parts.append(struct.pack("<I", len(params)))
    for p in params:
        name = p.name.encode()
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<B", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> CollabModel:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hdr_len = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 10
    header = json.loads(buf[pos:pos + hdr_len])
    pos += hdr_len
    model = CollabModel(ScenarioConfig.from_dict(header["scenario"]), header["variant"],
                        config=ModelConfig.from_dict(header["model"]))
    named = model.named_parameters()
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if count != len(named):
        raise CheckpointError(f"checkpoint has {count} tensors, model expects {len(named)}")
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        if name not in named:
            raise CheckpointError(f"unknown tensor {name!r}")
        if named[name].shape != tuple(shape):
            raise CheckpointError(f"tensor {name!r} has shape {shape}, expected {named[name].shape}")
        named[name].data = data.astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes")
    model.meta = header.get("meta", {})
    return model


def save(model: CollabModel, path, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(model, meta))


def load(path) -> CollabModel:
    with open(path, "rb") as fh:
        return loads(fh.read())

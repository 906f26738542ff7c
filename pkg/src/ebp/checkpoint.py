"""Binary checkpoint format.

Layout (all integers little-endian):

    b"EBP1" | u32 version | u32 header length | JSON header
    u32 tensor count, then per tensor:
        u16 name length | utf-8 name | u32 ndim | u64 dims... | float64 payload

The JSON header carries the config, seed, RNG state and step counter.
"""
from __future__ import annotations

import io
import json
import struct

import numpy as np

MAGIC = b"EBP1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, tensors, header):
    buf = io.BytesIO()
    head = json.dumps(header, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(head)))
    buf.write(head)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        key = name.encode()
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load(path):
    """Return ``(tensors, header)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
        off = 12
        header = json.loads(raw[off:off + hlen])
        off += hlen
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + klen].decode()
            off += klen
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", raw, off)
            off += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if off + 8 * size > len(raw):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(raw, "<f8", size, off).reshape(shape).astype(np.float64)
            off += 8 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return tensors, header


def rng_state(rng):
    """JSON-safe copy of a generator's bit-generator state."""
    return _jsonable(rng.bit_generator.state)


def restore_rng(state):
    name = state["bit_generator"]
    bg = getattr(np.random, name)()
    bg.state = _from_json(state)
    return np.random.Generator(bg)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__array__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_json(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return np.array(obj["__array__"], dtype=obj["dtype"])
        return {k: _from_json(v) for k, v in obj.items()}
    return obj

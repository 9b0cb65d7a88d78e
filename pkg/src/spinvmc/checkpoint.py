"""Versioned binary checkpoints: magic, header, then raw array blocks.

Layout:  b"SVMC" | u32 version | u64 header_len | header JSON | array data.
The JSON header records the geometry, step counter, sampler state, RNG
states, optimizer bookkeeping, the config text, and the dtype/shape/order of
every array block that follows. Restoring reproduces the training trajectory
bit for bit.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"SVMC"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _jsonify(obj):
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    return obj


def _dejsonify(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _dejsonify(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_dejsonify(v) for v in obj]
    return obj


def save_checkpoint(path, *, step: int, meta: dict, arrays: dict) -> None:
    """Write one checkpoint; ``arrays`` maps names to float/int ndarrays."""
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        entries.append({"name": name, "dtype": str(arr.dtype),
                        "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {"step": step, "meta": _jsonify(meta), "arrays": entries}
    payload = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Returns (step, meta, arrays)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(shape)) if shape else 1
            data = fh.read(count * dtype.itemsize)
            if len(data) != count * dtype.itemsize:
                raise CheckpointError(f"{path}: truncated array {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    return header["step"], _dejsonify(header["meta"]), arrays


def rng_state_to_json(rng: np.random.Generator):
    return _jsonify(rng.bit_generator.state)


def rng_from_json(state) -> np.random.Generator:
    state = _dejsonify(state)
    bitgen_name = state["bit_generator"]
    bitgen = getattr(np.random, bitgen_name)()
    bitgen.state = state
    return np.random.Generator(bitgen)

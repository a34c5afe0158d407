"""Single-file model checkpoints.

Layout: magic ``CGN1``, a little-endian uint32 header length, a UTF-8 JSON
header (architecture config, seed, step, parameter names and shapes), then
every parameter as little-endian float32 in declaration order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CGN1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, config: dict, params, seed: int, step: int, extra: dict | None = None) -> None:
    header = {
        "config": config,
        "seed": int(seed),
        "step": int(step),
        "params": [{"name": p.name, "shape": list(p.value.shape)} for p in params],
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8 : 8 + n].decode("utf-8"))
    pos = 8 + n
    arrays = {}
    for spec in header["params"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = pos + 4 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated at {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(data[pos:end], dtype="<f4").reshape(shape).copy()
        pos = end
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return header, arrays


def load_into(params, arrays: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in arrays:
            raise CheckpointError(f"parameter {p.name} missing from checkpoint")
        a = arrays[p.name]
        if a.shape != p.value.shape:
            raise CheckpointError(f"parameter {p.name}: shape {a.shape} != {p.value.shape}")
        p.value[...] = a.astype(p.value.dtype)

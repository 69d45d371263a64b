"""Model checkpoint format.

A checkpoint is one JSON header line (kind tag, hyperparameters, tensor
names/shapes in payload order) followed by the raw little-endian float32
tensor data. The loader validates the total payload length.
"""

from __future__ import annotations

import json

import numpy as np


def save_checkpoint(path, kind: str, hyper: dict, tensors: dict[str, np.ndarray]) -> None:
    header = {
        "format": "remask-checkpoint-v1",
        "kind": kind,
        "hyper": hyper,
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in tensors.items()],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for t in tensors.values():
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != "remask-checkpoint-v1":
        raise ValueError(f"not a remask checkpoint: {path}")
    entries = header["tensors"]
    expected = sum(int(np.prod(e["shape"])) for e in entries) * 4
    if len(payload) != expected:
        raise ValueError(
            f"checkpoint payload is {len(payload)} bytes, header declares {expected}"
        )
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for e in entries:
        shape = tuple(int(s) for s in e["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        tensors[e["name"]] = arr.reshape(shape).astype(np.float64)
        offset += count * 4
    return header["kind"], header["hyper"], tensors

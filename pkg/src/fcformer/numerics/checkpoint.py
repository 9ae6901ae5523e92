"""FCF1 tensor container.

Layout: ``b"FCF1"``, a little-endian u64 byte length, a UTF-8 JSON manifest,
then the raw little-endian float32 payloads back to back. The manifest is

    {"tensors": {name: {"dtype": "f32", "shape": [...], "offset": int}}, "meta": {...}}

where ``offset`` counts from the first payload byte.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FCF1"


class CheckpointError(IOError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    entries = {}
    offset = 0
    payloads = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        entries[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": offset}
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=False).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in payloads:
            fh.write(blob)
    os.replace(tmp, path)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (n,) = struct.unpack("<Q", raw[4:12])
    manifest = json.loads(raw[12:12 + n].decode("utf-8"))
    base = 12 + n
    tensors = {}
    for name, ent in manifest["tensors"].items():
        if ent["dtype"] != "f32":
            raise CheckpointError(f"{path}: {name} has unsupported dtype {ent['dtype']}")
        count = int(np.prod(ent["shape"], dtype=np.int64))
        start = base + ent["offset"]
        if start + 4 * count > len(raw):
            raise CheckpointError(f"{path}: payload for {name} is truncated")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start)
        tensors[name] = arr.reshape(ent["shape"]).astype(np.float32)
    return tensors, manifest.get("meta", {})

"""Flat named-tensor weights container.

Layout: magic ``NTC1`` | uint32 version | uint32 manifest length |
manifest JSON | payload. The manifest maps tensor name to shape, dtype
and byte offset into the payload. Floating tensors are stored as
little-endian float32; integer buffers (batch-norm counters) as
little-endian int64.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ModelError

MAGIC = b"NTC1"
VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "i8": np.dtype("<i8")}


def save_weights(state_dict: dict, path) -> None:
    manifest = {}
    chunks = []
    offset = 0
    for name, tensor in state_dict.items():
        arr = tensor.detach().cpu().numpy()
        code = "i8" if np.issubdtype(arr.dtype, np.integer) else "f4"
        arr = arr.astype(_DTYPES[code])
        manifest[name] = {"shape": list(arr.shape), "dtype": code, "offset": offset}
        chunk = arr.tobytes()
        chunks.append(chunk)
        offset += len(chunk)
    header = json.dumps({"version": VERSION, "tensors": manifest}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def load_weights(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ModelError(f"{path}: not a weights container (bad magic)")
    version, manifest_len = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise ModelError(f"{path}: unsupported container version {version}")
    header = json.loads(raw[12 : 12 + manifest_len])
    payload = raw[12 + manifest_len :]
    out = {}
    for name, meta in header["tensors"].items():
        dtype = _DTYPES[meta["dtype"]]
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        arr = np.frombuffer(
            payload, dtype=dtype, count=count, offset=meta["offset"]
        ).reshape(meta["shape"])
        out[name] = torch.from_numpy(arr.copy())
    return out


def weights_digest(state_dict: dict) -> str:
    """Stable content hash of a state dict (names, shapes and bytes)."""
    hasher = hashlib.sha256()
    for name in sorted(state_dict):
        arr = state_dict[name].detach().cpu().numpy()
        hasher.update(name.encode())
        hasher.update(str(arr.shape).encode())
        hasher.update(np.ascontiguousarray(arr).tobytes())
    return hasher.hexdigest()

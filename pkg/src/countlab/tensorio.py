"""Language-neutral named-tensor container.

Layout::

    8 bytes   magic  b"CNTLAB\\x00\\x01"
    4 bytes   format version (little-endian uint32)
    8 bytes   manifest length L (little-endian uint64)
    L bytes   UTF-8 JSON manifest (sorted keys, no whitespace)
    payload   contiguous little-endian tensor bytes

The manifest lists every tensor as ``{name, dtype, shape, offset, nbytes}``
(offsets relative to the payload start) and carries free-form ``meta``
(run config, RNG states). Tensors are written in name order, so a
save -> load -> save cycle reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Mapping

import numpy as np
import torch

MAGIC = b"CNTLAB\x00\x01"
VERSION = 1
_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "int32": "<i4",
    "uint8": "|u1",
    "bool": "|b1",
}


class CheckpointError(ValueError):
    pass


def _to_numpy(t) -> np.ndarray:
    if torch.is_tensor(t):
        t = t.detach().cpu().numpy()
    arr = np.asarray(t)
    name = arr.dtype.name
    if name not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {name}")
    return np.asarray(arr.astype(_DTYPES[name], copy=False), order="C")  # keeps 0-d shape


def encode(tensors: Mapping[str, object], meta: Mapping | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = _to_numpy(tensors[name])
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": entries, "meta": dict(meta or {})}, sort_keys=True, separators=(",", ":"))
    head = manifest.encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(head)) + head + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a countlab tensor file (bad magic)")
    version, L = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    manifest = json.loads(blob[20 : 20 + L].decode("utf-8"))
    base = 20 + L
    out = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        raw = blob[start : start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"truncated payload for tensor {e['name']!r}")
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(tuple(e["shape"]))
        out[e["name"]] = arr.astype(e["dtype"])  # native byte order, writable copy
    return out, manifest["meta"]


def save(path: str | os.PathLike, tensors: Mapping[str, object], meta: Mapping | None = None) -> None:
    blob = encode(tensors, meta)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return decode(fh.read())


def state_to_tensors(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": _to_numpy(v) for k, v in module.state_dict().items()}


def tensors_to_state(prefix: str, tensors: Mapping[str, np.ndarray]) -> dict[str, torch.Tensor]:
    p = prefix + "."
    return {k[len(p) :]: torch.from_numpy(np.array(v)) for k, v in tensors.items() if k.startswith(p)}

"""Named-blob checkpoint container.

Layout (little endian)::

    b"GM3C" | u32 version | u64 header length | JSON header | blob payloads

The JSON header carries caller metadata plus a ``blobs`` index of
``{name, dtype, shape, offset, nbytes}`` records; offsets are relative to the
first payload byte. Parameters are stored as f32; optimizer and RNG state may
use the other listed dtypes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import FormatError

MAGIC = b"GM3C"
VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8", "u8": "|u1"}


def _as_array(v: torch.Tensor | np.ndarray) -> tuple[str, np.ndarray]:
    arr = v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else np.asarray(v)
    if arr.dtype == np.float64:
        return "f64", arr
    if arr.dtype.kind == "f":
        return "f32", arr.astype(np.float32)
    if arr.dtype == np.uint8:
        return "u8", arr
    if arr.dtype.kind in "iub":
        return "i64", arr.astype(np.int64)
    raise FormatError(f"cannot store dtype {arr.dtype}")


def save(path: str | Path, header: dict[str, Any], blobs: dict[str, torch.Tensor | np.ndarray]) -> None:
    index, chunks, offset = [], [], 0
    for name in blobs:
        code, arr = _as_array(blobs[name])
        raw = np.ascontiguousarray(arr).astype(_DTYPES[code]).tobytes()
        index.append({"name": name, "dtype": code, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "blobs": index}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)


def load(path: str | Path) -> tuple[dict[str, Any], dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    start = 16
    try:
        header = json.loads(data[start:start + hlen])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: corrupt header ({e})") from None
    base = start + hlen
    blobs = {}
    for rec in header.pop("blobs"):
        lo = base + rec["offset"]
        raw = data[lo:lo + rec["nbytes"]]
        if len(raw) != rec["nbytes"]:
            raise FormatError(f"{path}: truncated blob {rec['name']}")
        arr = np.frombuffer(raw, dtype=_DTYPES[rec["dtype"]]).reshape(rec["shape"]).copy()
        blobs[rec["name"]] = torch.from_numpy(arr)
    return header, blobs


def state_blobs(module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_state(module: torch.nn.Module, blobs: dict[str, torch.Tensor], prefix: str = "") -> None:
    own = module.state_dict()
    state = {}
    for k, ref in own.items():
        if prefix + k not in blobs:
            raise FormatError(f"checkpoint lacks {prefix + k}")
        state[k] = blobs[prefix + k].to(ref.dtype)
    module.load_state_dict(state)

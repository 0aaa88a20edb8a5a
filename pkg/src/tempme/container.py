"""Tensor container file: JSON header followed by a raw little-endian blob.

Layout::

    bytes 0..7    magic  b"TMPME01\\0"
    bytes 8..15   header length H, unsigned 64-bit little-endian
    next H bytes  UTF-8 JSON header
    remainder     tensor blob, tensors back to back in header order

Header keys: ``format`` ("tempme-tensors"), ``version`` (1), ``endianness``
("little"), ``meta`` (free-form, e.g. a model config), ``tensors`` (list of
``{"name", "dtype", "shape", "offset", "nbytes"}``) and ``blob_bytes``.
Supported dtypes are float32 and int32.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import jsonschema
import numpy as np
import torch

from .config import ModelConfig
from .errors import ContractError
from .formats import validate

MAGIC = b"TMPME01\0"
_DTYPES = {"float32": np.dtype("<f4"), "int32": np.dtype("<i4")}


def _as_numpy(t: torch.Tensor) -> tuple[str, np.ndarray]:
    if t.is_floating_point():
        return "float32", t.detach().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
    return "int32", t.detach().to(torch.int32).contiguous().numpy().astype("<i4", copy=False)


def write_container(path: str | Path, tensors: list[tuple[str, torch.Tensor]], meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, t in tensors:
        dtype, arr = _as_numpy(t)
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": "tempme-tensors",
        "version": 1,
        "endianness": "little",
        "meta": meta or {},
        "tensors": entries,
        "blob_bytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)


def read_container(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ContractError("not a tensor container (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContractError(f"corrupt container header: {exc}") from None
    try:
        validate(header, "container_header")
    except jsonschema.ValidationError as exc:
        raise ContractError(f"unsupported container header: {exc.message}") from None
    blob = data[16 + hlen :]
    if len(blob) != header["blob_bytes"]:
        raise ContractError(f"blob is {len(blob)} bytes, header declares {header['blob_bytes']}")
    tensors = {}
    expected = 0
    for e in header["tensors"]:
        dt = _DTYPES[e["dtype"]]
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        if e["offset"] != expected or e["nbytes"] != count * dt.itemsize:
            raise ContractError(f"tensor {e['name']} has an inconsistent offset or length")
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=e["offset"]).reshape(e["shape"])
        t = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
        tensors[e["name"]] = t if e["dtype"] == "float32" else t.to(torch.int64)
        expected += e["nbytes"]
    return header, tensors


def save_weights(path: str | Path, weights) -> None:
    write_container(path, weights.named_tensors(), {"kind": "encoder-weights", "config": weights.cfg.to_dict()})


def load_weights(path: str | Path):
    from .encoder import EncoderWeights

    header, tensors = read_container(path)
    meta = header["meta"]
    if meta.get("kind") != "encoder-weights":
        raise ContractError("container does not hold encoder weights")
    cfg = ModelConfig.from_dict(meta["config"])
    return EncoderWeights.from_named(cfg, tensors)

"""Versioned binary checkpoints.

Byte layout (all integers little-endian):

====================  ============================================
bytes 0..3            magic ``b"SKGC"``
bytes 4..7            uint32 format version (currently 1)
bytes 8..15           uint64 header length ``H``
bytes 16..16+H        UTF-8 JSON header
bytes 16+H..          tensor payload, raw little-endian values
====================  ============================================

The header object holds ``config`` (model/run configuration), and
``config_hash`` (sha256 of the canonical config JSON), ``counters``
(named integer training counters, including per-parameter Adam step
counts), and ``tensors``: a list of ``{name, shape, dtype, offset,
nbytes}`` records whose offsets index into the payload. Optimizer moment
buffers are stored as ordinary tensors under ``opt.adam.m.<param>`` /
``opt.adam.v.<param>`` names.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import CheckpointError
from .substrate import ParamStore

MAGIC = b"SKGC"
FORMAT_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    config: dict
    counters: dict[str, int] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def bytes_equal(self, other: "Checkpoint") -> bool:
        if self.counters != other.counters or set(self.tensors) != set(other.tensors):
            return False
        return all(
            self.tensors[n].tobytes() == other.tensors[n].tobytes() for n in self.tensors
        )


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    records = []
    blobs = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name])
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        records.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": _dtype_tag(arr),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {
            "config": ckpt.config,
            "config_hash": config_hash(ckpt.config),
            "counters": ckpt.counters,
            "tensors": records,
        }
    ).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    (header_len,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + header_len:
        raise CheckpointError(f"{path} is truncated inside the header")
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    payload = blob[16 + header_len :]
    tensors = {}
    for rec in header["tensors"]:
        end = rec["offset"] + rec["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path} is truncated inside tensor {rec['name']!r}")
        arr = np.frombuffer(payload[rec["offset"] : end], dtype=_DTYPES[rec["dtype"]])
        tensors[rec["name"]] = arr.reshape(rec["shape"]).copy()
    return Checkpoint(
        config=header["config"], counters=dict(header["counters"]), tensors=tensors
    )


def store_to_tensors(store: ParamStore, prefix: str = "") -> tuple[dict[str, np.ndarray], dict[str, int]]:
    """Snapshot a ParamStore (parameters + Adam moments) for checkpointing."""
    tensors = {}
    counters = {}
    for name, p in store.items():
        tensors[prefix + name] = p.detach().cpu().numpy().copy()
    for name, m in store.adam_m.items():
        tensors[f"{prefix}opt.adam.m.{name}"] = m.cpu().numpy().copy()
        tensors[f"{prefix}opt.adam.v.{name}"] = store.adam_v[name].cpu().numpy().copy()
        counters[f"{prefix}opt.adam.t.{name}"] = store.adam_t[name]
    return tensors, counters


def load_store_from_tensors(
    store: ParamStore,
    tensors: dict[str, np.ndarray],
    counters: dict[str, int],
    prefix: str = "",
) -> None:
    """Restore parameters and Adam state saved by :func:`store_to_tensors`."""
    with torch.no_grad():
        for name in store.names():
            key = prefix + name
            if key not in tensors:
                raise CheckpointError(f"checkpoint is missing tensor {key!r}")
            arr = tensors[key]
            p = store[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"shape mismatch for {key!r}: checkpoint {arr.shape} vs model {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arr.copy()).to(p.dtype))
            m_key = f"{prefix}opt.adam.m.{name}"
            if m_key in tensors:
                store.adam_m[name] = torch.from_numpy(tensors[m_key].copy()).to(p.dtype)
                store.adam_v[name] = torch.from_numpy(
                    tensors[f"{prefix}opt.adam.v.{name}"].copy()
                ).to(p.dtype)
                store.adam_t[name] = int(counters.get(f"{prefix}opt.adam.t.{name}", 0))

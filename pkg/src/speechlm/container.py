"""Versioned binary container for parameters, optimizer state and metadata.

Layout (all integers little-endian)::

    magic      4 bytes   b"SLMC"
    version    uint32
    hdr_len    uint64
    header     hdr_len bytes of UTF-8 JSON
    payload    concatenated raw tensor bytes

The header holds ``config`` (a JSON snapshot), ``config_digest`` (sha256 of the
canonical config JSON), free-form ``meta`` and ``tensors``: a list of
``{name, dtype, shape, offset, nbytes}`` with offsets relative to the payload.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import config_digest
from .errors import FormatError

MAGIC = b"SLMC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "|u1", "int32": "<i4"}


@dataclass
class Container:
    config: dict
    meta: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)  # name -> np.ndarray


def write_container(path, container: Container) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in container.tensors.items():
        arr = np.asarray(arr)
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise FormatError(f"tensor {name}: unsupported dtype {dtype}")
        data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append(
            {"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)}
        )
        blobs.append(data)
        offset += len(data)
    header = {
        "version": VERSION,
        "config": container.config,
        "config_digest": config_digest(container.config),
        "meta": container.meta,
        "tensors": entries,
    }
    hdr = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(hdr)))
        f.write(hdr)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def read_header(path) -> tuple[dict, int]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, "rb") as f:
        prefix = f.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size:
            raise FormatError(f"{path}: truncated prefix")
        magic, version, hdr_len = _PREFIX.unpack(prefix)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"{path}: container version {version}, expected {VERSION}")
        raw = f.read(hdr_len)
    if len(raw) < hdr_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    if header.get("config_digest") != config_digest(header.get("config", {})):
        raise FormatError(f"{path}: config digest mismatch")
    return header, _PREFIX.size + hdr_len


def read_container(path) -> Container:
    header, start = read_header(path)
    size = Path(path).stat().st_size
    payload_len = sum(e["nbytes"] for e in header["tensors"])
    if size != start + payload_len:
        raise FormatError(f"{path}: payload is {size - start} bytes, header declares {payload_len}")
    tensors = {}
    with open(path, "rb") as f:
        f.seek(start)
        payload = f.read()
    for e in header["tensors"]:
        if e["dtype"] not in _DTYPES:
            raise FormatError(f"{path}: tensor {e['name']} has unknown dtype {e['dtype']}")
        chunk = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype=_DTYPES[e["dtype"]])
        expected = int(np.prod(e["shape"], dtype=np.int64))
        if arr.size != expected:
            raise FormatError(f"{path}: tensor {e['name']} size mismatch")
        tensors[e["name"]] = arr.astype(e["dtype"]).reshape(e["shape"])
    return Container(config=header["config"], meta=header.get("meta", {}), tensors=tensors)

"""Binary container shared by checkpoints and adversarial datasets.

Layout::

    magic (7 ASCII bytes) | header length (uint64 LE) | header (UTF-8 JSON)
    | float64 LE blobs, concatenated in the order listed in header["blobs"]

``header["blobs"]`` is a list of ``{"name": str, "shape": [int, ...]}``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np


class ContainerError(Exception):
    pass


class CorruptFileError(ContainerError):
    pass


class BadMagicError(CorruptFileError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def array_digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        h.update(canonical_json(list(a.shape)))
        h.update(a.tobytes())
    return h.hexdigest()


def write_container(path, magic: bytes, header: Mapping, blobs: Mapping[str, np.ndarray]) -> None:
    header = dict(header)
    header["blobs"] = [{"name": k, "shape": list(np.shape(v))} for k, v in blobs.items()]
    hbytes = canonical_json(header)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for v in blobs.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    tmp.replace(path)


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[: len(magic)] != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, found {raw[:len(magic)]!r}")
    pos = len(magic)
    if len(raw) < pos + 8:
        raise CorruptFileError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    if len(raw) < pos + hlen:
        raise CorruptFileError(f"{path}: truncated header")
    try:
        header = json.loads(raw[pos : pos + hlen].decode())
        specs = [(b["name"], tuple(int(d) for d in b["shape"])) for b in header["blobs"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header ({exc})") from None
    pos += hlen
    need = sum(8 * int(np.prod(s, dtype=np.int64)) for _, s in specs)
    if len(raw) - pos != need:
        raise CorruptFileError(f"{path}: payload has {len(raw) - pos} bytes, header declares {need}")
    blobs = {}
    for name, shape in specs:
        n = 8 * int(np.prod(shape, dtype=np.int64))
        blobs[name] = np.frombuffer(raw[pos : pos + n], dtype="<f8").astype(np.float64).reshape(shape)
        pos += n
    return header, blobs

"""Versioned binary container shared by the weights, index, and database
files.

Layout (little-endian):

    bytes 0..3    magic (4 ASCII bytes, identifies the artifact kind)
    bytes 4..7    format version, uint32
    bytes 8..15   metadata length L, uint64
    bytes 16..    UTF-8 JSON metadata of length L; its "manifest" entry
                  lists {name, shape, dtype} for every data block
    ...           raw data blocks, row-major, in manifest order
    last 32 bytes SHA-256 over everything that precedes it

Data blocks are stored exactly as declared (dtype is "float32",
"float64", "int64", or "uint8").  A reader must verify magic, version,
and checksum before trusting the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

FORMAT_VERSION = 1

_DTYPES = {"float32": np.float32, "float64": np.float64,
           "int64": np.int64, "uint8": np.uint8}


class ContainerError(ValueError):
    """Corrupt, truncated, or incompatible container file."""


def write_container(path, magic: bytes, meta: dict, blocks: dict[str, np.ndarray]):
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    manifest = []
    payloads = []
    for name, arr in blocks.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported block dtype {dtype} for {name}")
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        payloads.append(arr.tobytes())

    meta = dict(meta)
    meta["manifest"] = manifest
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")

    body = magic + struct.pack("<I", FORMAT_VERSION)
    body += struct.pack("<Q", len(meta_bytes)) + meta_bytes
    body += b"".join(payloads)
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as f:
        f.write(body)
        f.write(digest)


def read_container(path, magic: bytes):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 48:
        raise ContainerError(f"{path}: truncated file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ContainerError(f"{path}: checksum mismatch (corrupt or truncated)")
    if body[:4] != magic:
        raise ContainerError(
            f"{path}: wrong file kind (magic {body[:4]!r}, expected {magic!r})"
        )
    (version,) = struct.unpack("<I", body[4:8])
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported format version {version}")
    (meta_len,) = struct.unpack("<Q", body[8:16])
    meta = json.loads(body[16:16 + meta_len].decode("utf-8"))

    blocks = {}
    offset = 16 + meta_len
    for entry in meta["manifest"]:
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np.dtype(dtype).itemsize
        chunk = body[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise ContainerError(f"{path}: block {entry['name']} truncated")
        blocks[entry["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
        offset += nbytes
    if offset != len(body):
        raise ContainerError(f"{path}: {len(body) - offset} trailing bytes")
    return meta, blocks

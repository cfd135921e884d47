"""Versioned binary container used by dataset, checkpoint, and embedding files.

Layout:

    magic (4 bytes) | version (u32 LE) | header length (u64 LE)
    | header JSON (utf-8) | raw array payloads in header order
    | sha256 of everything before the digest (32 bytes)

All arrays are little-endian (float64 or int64). The header JSON is
canonical (sorted keys, compact separators) so identical inputs produce
byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import FormatError

_DTYPES = {"float64": "<f8", "int64": "<i8"}
_DIGEST_LEN = 32


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_container(path, magic: bytes, version: int, header: dict, arrays: dict) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    meta = []
    payloads = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype not in (np.float64, np.int64):
            raise ValueError(f"unsupported dtype {arr.dtype} for array {name!r}")
        dtype_name = "float64" if arr.dtype == np.float64 else "int64"
        meta.append({"name": name, "dtype": dtype_name, "shape": list(arr.shape)})
        payloads.append(arr.astype(_DTYPES[dtype_name], copy=False).tobytes())
    header_bytes = _canonical_json({"user": header, "arrays": meta})

    blob = bytearray()
    blob += magic
    blob += struct.pack("<I", version)
    blob += struct.pack("<Q", len(header_bytes))
    blob += header_bytes
    for payload in payloads:
        blob += payload
    blob += hashlib.sha256(bytes(blob)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_container(path, magic: bytes, version: int):
    """Read and verify a container, returning (header, arrays)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 + 4 + 8 + _DIGEST_LEN:
        raise FormatError(f"{path}: file too short to be a valid container")
    body, digest = blob[:-_DIGEST_LEN], blob[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{path}: checksum mismatch (corrupt or truncated file)")
    if body[:4] != magic:
        raise FormatError(f"{path}: bad magic {body[:4]!r}, expected {magic!r}")
    (found_version,) = struct.unpack("<I", body[4:8])
    if found_version != version:
        raise FormatError(f"{path}: format version {found_version}, expected {version}")
    (header_len,) = struct.unpack("<Q", body[8:16])
    header_end = 16 + header_len
    if header_end > len(body):
        raise FormatError(f"{path}: header extends past end of file")
    try:
        header = json.loads(body[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc

    arrays = {}
    offset = header_end
    for meta in header["arrays"]:
        dtype = np.dtype(_DTYPES[meta["dtype"]])
        shape = tuple(meta["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = dtype.itemsize * count
        chunk = body[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"{path}: array {meta['name']!r} truncated")
        arrays[meta["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
        offset += nbytes
    if offset != len(body):
        raise FormatError(f"{path}: {len(body) - offset} unexpected trailing bytes")
    return header["user"], arrays

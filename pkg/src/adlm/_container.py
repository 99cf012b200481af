"""Versioned binary container shared by checkpoints and perturbed datasets.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic (file-type specific, e.g. b"ADLMCKPT")
    8       4     uint32 format version
    12      8     uint64 header length H
    20      H     UTF-8 JSON header, keys sorted
    20+H    ...   raw array payloads, C order, little-endian, back to back

The header's ``arrays`` list records name, dtype, shape, offset (relative to
the payload start) and byte count for every array. Writes go to a temporary
file in the target directory and are renamed into place.
"""
import json
import os
import struct
import tempfile

import numpy as np

FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class ContainerError(ValueError):
    pass


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def pack(magic, meta, arrays):
    """Serialize ``meta`` (JSON-able dict) and named arrays to bytes."""
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    entries = []
    payload = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes(order="C")
        entries.append({
            "name": name,
            "dtype": le.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        payload.append(raw)
        offset += len(raw)
    header = dict(meta)
    header["arrays"] = entries
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(magic, FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(payload)


def unpack(magic, data, source="<bytes>"):
    """Inverse of :func:`pack`; returns ``(meta, arrays)``."""
    if len(data) < _PREFIX.size:
        raise ContainerError(f"{source}: truncated at offset 0 (no header)")
    got_magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if got_magic != magic:
        raise ContainerError(f"{source}: bad magic {got_magic!r} at offset 0, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise ContainerError(f"{source}: unsupported format version {version}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise ContainerError(f"{source}: truncated header at offset {start}")
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    base = start + hlen
    arrays = {}
    for entry in header.pop("arrays"):
        lo = base + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(data):
            raise ContainerError(f"{source}: truncated payload for {entry['name']!r} at offset {lo}")
        arr = np.frombuffer(data[lo:hi], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return header, arrays


def write(path, magic, meta, arrays):
    atomic_write_bytes(path, pack(magic, meta, arrays))


def read(path, magic):
    with open(path, "rb") as fh:
        data = fh.read()
    return unpack(magic, data, source=os.fspath(path))

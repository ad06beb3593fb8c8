"""Flat binary tensor container.

Layout (all integers little-endian)::

    magic   4 bytes   b"MIDL" for parameters, b"DATA" for cached datasets
    version u32
    then, repeated until end of file:
        name_len u32, name utf-8 bytes,
        rank u32, dims u64 * rank,
        payload float64 * prod(dims)

Records keep insertion order, so writing what was read reproduces the file
byte for byte.
"""
import os
import struct
import tempfile

import numpy as np

MAGIC_PARAMS = b"MIDL"
MAGIC_DATA = b"DATA"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_tensors(tensors, magic=MAGIC_PARAMS):
    if len(magic) != 4:
        raise CheckpointError(f"magic must be 4 bytes, got {magic!r}")
    parts = [magic, struct.pack("<I", VERSION)]
    for name, value in tensors.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_tensors(buf, magic=MAGIC_PARAMS):
    if len(buf) < 8:
        raise CheckpointError(f"file too short for header ({len(buf)} bytes)")
    if buf[:4] != magic:
        raise CheckpointError(f"bad magic {bytes(buf[:4])!r} at offset 0, expected {magic!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} at offset 4")
    out = {}
    pos = 8
    n = len(buf)

    def need(count, what):
        if pos + count > n:
            raise CheckpointError(f"truncated {what} at offset {pos}: need {count} bytes, have {n - pos}")

    while pos < n:
        need(4, "name length")
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(name_len, "name")
        try:
            name = bytes(buf[pos:pos + name_len]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"invalid tensor name at offset {pos}") from exc
        pos += name_len
        need(4, "rank")
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(8 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        count = int(np.prod(dims, dtype=np.uint64)) if rank else 1
        need(8 * count, f"payload of {name!r}")
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
        pos += 8 * count
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        out[name] = arr.astype(np.float64)
    return out


def atomic_write_bytes(path, data):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensors(path, tensors, magic=MAGIC_PARAMS):
    """Write a name -> array (or Tensor) mapping to ``path`` atomically."""
    atomic_write_bytes(path, encode_tensors(tensors, magic))


def load_tensors(path, magic=MAGIC_PARAMS):
    with open(path, "rb") as f:
        return decode_tensors(f.read(), magic)


def inspect(path):
    """``[(name, shape), ...]`` for each record, in file order."""
    with open(path, "rb") as f:
        buf = f.read()
    magic = bytes(buf[:4])
    if magic not in (MAGIC_PARAMS, MAGIC_DATA):
        raise CheckpointError(f"bad magic {magic!r} at offset 0")
    return [(name, arr.shape) for name, arr in decode_tensors(buf, magic).items()]

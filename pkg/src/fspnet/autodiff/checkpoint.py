"""FSPC checkpoint files.

Layout (little-endian)::

    b"FSPC" | u32 version | u64 entry count
    per entry: u32 name length | UTF-8 name | u32 rank | u64 dims[rank] | f64 values
"""
import struct

import numpy as np

MAGIC = b"FSPC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays):
    chunks = [MAGIC, struct.pack("<IQ", VERSION, len(arrays))]
    for name, values in arrays.items():
        values = np.asarray(values, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", values.ndim))
        chunks.append(struct.pack(f"<{values.ndim}Q", *values.shape))
        chunks.append(np.ascontiguousarray(values).tobytes())
    return b"".join(chunks)


def loads(blob):
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        out = blob[pos:pos + n]
        pos += n
        return out

    version, count = struct.unpack("<IQ", take(12))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arrays = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<I", take(4))
        name = take(n_name).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arrays[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last entry")
    return arrays


def save(path, arrays):
    with open(path, "wb") as fh:
        fh.write(dumps(arrays))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())

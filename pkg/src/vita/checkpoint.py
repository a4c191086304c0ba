"""Binary checkpoint container.

Layout (little-endian):
    magic "VITC" | u32 version=1 | u32 tensor count |
    per tensor: u16 name length | name utf-8 | u8 rank | u32 dims[rank] | f32 data
    | optional trailing metadata block (opaque bytes, owner-defined)

Parameters are stored as f32 regardless of in-memory precision.
"""

import io
import os
import struct

import numpy as np

MAGIC = b"VITC"
VERSION = 1


class FormatError(ValueError):
    pass


class VersionError(FormatError):
    pass


def save_tensors(path, named_arrays, meta=b""):
    """Write name -> ndarray pairs (insertion order preserved) plus metadata."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(named_arrays)))
    for name, arr in named_arrays.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        arr = np.asarray(arr)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f4").tobytes())
    buf.write(meta)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def _read_exact(f, n, what):
    b = f.read(n)
    if len(b) != n:
        raise FormatError(f"truncated checkpoint while reading {what}")
    return b


def load_tensors(path, dtype=np.float64):
    """Read a checkpoint; returns (dict name -> ndarray, metadata bytes)."""
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise FormatError("bad magic: not a VITC checkpoint")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != VERSION:
            raise VersionError(f"unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
            nbytes = 4 * int(np.prod(dims)) if rank else 4
            data = np.frombuffer(_read_exact(f, nbytes, f"tensor {name!r}"), dtype="<f4")
            out[name] = data.reshape(dims).astype(dtype)
        meta = f.read()
    return out, meta

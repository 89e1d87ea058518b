"""Binary checkpoint format for named float32 tensors.

Layout: magic "DMCK", version u32, then repeated records of
(name-length u32, UTF-8 name, ndim u32, dims u32*ndim, f32 little-endian
payload). All integers little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"DMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(arrays, path):
    """Write a dict of name -> float32 ndarray."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f4")  # tobytes() emits C order
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    """Read back a dict of name -> float32 ndarray; raises CheckpointError with
    the byte offset on malformed input."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r} at offset 0")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} at offset 4")
    off = 8
    out = {}
    n = len(blob)
    while off < n:
        try:
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + name_len].decode("utf-8")
            if len(blob) < off + name_len:
                raise struct.error("truncated name")
            off += name_len
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            count = int(np.prod(dims)) if ndim else 1
            end = off + 4 * count
            if end > n:
                raise struct.error("truncated payload")
            arr = np.frombuffer(blob[off:end], dtype="<f4").reshape(dims).copy()
            off = end
        except (struct.error, UnicodeDecodeError) as e:
            raise CheckpointError(f"malformed record at offset {off}: {e}") from e
        out[name] = arr
    return out

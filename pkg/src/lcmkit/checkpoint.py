"""Binary checkpoint container: magic, schema version, metadata, tensors.

Layout (all integers little-endian):

    8 bytes   magic "LCMKIT01"
    u32       schema version
    u32       metadata length, then UTF-8 "key = value" lines
    u32       tensor count, then per tensor:
                u16 name length + UTF-8 name
                u8 rank, i64 dims, float64 little-endian payload

Writes go to a temp file in the target directory and are renamed into
place, so a failed save never leaves a truncated checkpoint behind.
Round trips are bit-exact.
"""

import os
import struct
import tempfile

import numpy as np

MAGIC = b"LCMKIT01"
SCHEMA_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, truncated, or incompatible checkpoint file."""


def save_checkpoint(path, metadata, tensors):
    """Write metadata (dict of str -> str/num) and named float64 tensors."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", SCHEMA_VERSION)
    meta_text = "\n".join(f"{k} = {metadata[k]}" for k in sorted(metadata))
    meta_bytes = meta_text.encode("utf-8")
    blob += struct.pack("<I", len(meta_bytes))
    blob += meta_bytes
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        name_b = name.encode("utf-8")
        blob += struct.pack("<H", len(name_b))
        blob += name_b
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}q", *arr.shape)
        blob += arr.astype("<f8").tobytes()
    dirname = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n):
        if self.off + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint {self.path}")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Read back (metadata dict, tensors dict); validates magic and schema."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    r = _Reader(data, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (version,) = r.unpack("<I")
    if version > SCHEMA_VERSION:
        raise CheckpointError(f"{path}: schema {version} newer than supported {SCHEMA_VERSION}")
    (meta_len,) = r.unpack("<I")
    try:
        meta_text = r.take(meta_len).decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError(f"{path}: corrupt metadata block") from None
    metadata = {}
    for line in meta_text.splitlines():
        if line.strip():
            key, _, val = line.partition("=")
            metadata[key.strip()] = val.strip()
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}q") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        payload = r.take(8 * size)
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
        if arr.shape != tuple(shape):
            raise CheckpointError(f"{path}: tensor {name} shape mismatch")
        tensors[name] = arr
    if r.off != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.off} trailing bytes")
    return metadata, tensors

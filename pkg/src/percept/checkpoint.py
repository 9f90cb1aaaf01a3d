"""Binary checkpoint format.

Layout (little-endian)::

    b"PCLP"            magic
    u32                format version
    32 bytes           sha256 digest of the canonical config text
    u32                tensor count
    per tensor:
        u16 + bytes    UTF-8 name
        u8             dtype code (0 = float32)
        u8             rank
        rank * u32     dims
        payload        row-major float32
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"PCLP"
VERSION = 1
DIGEST_BYTES = 32
_F32 = 0


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], digest: bytes = b"\0" * DIGEST_BYTES) -> None:
    if len(digest) != DIGEST_BYTES:
        raise ValueError(f"digest must be {DIGEST_BYTES} bytes")
    parts = [MAGIC, struct.pack("<I", VERSION), digest, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        a = np.array(arr, dtype="<f4", order="C", copy=True)  # keeps rank 0
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _F32, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    tmp = os.fspath(path) + ".tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(b"".join(parts))
        os.replace(tmp, path)
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path, expected_digest: bytes | None = None, force: bool = False):
    """Return ``(tensors, digest)``.

    A digest differing from ``expected_digest`` is an error unless ``force``.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as f:
        data = f.read()
    reader = _Reader(data, path)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: corrupt header (bad magic)")
    (version,) = reader.unpack("<I")
    if version != VERSION and not force:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    digest = reader.take(DIGEST_BYTES)
    if expected_digest is not None and digest != expected_digest and not force:
        raise CheckpointError(f"{path}: config digest mismatch ({digest.hex()[:12]} != {expected_digest.hex()[:12]})")
    (count,) = reader.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = reader.unpack("<H")
        name = reader.take(nlen).decode("utf-8")
        dtype, rank = reader.unpack("<BB")
        if dtype != _F32:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {dtype}")
        dims = reader.unpack(f"<{rank}I")
        n = int(np.prod(dims, dtype=np.int64))
        payload = reader.take(4 * n)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if reader.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - reader.pos} trailing bytes after tensor table")
    return tensors, digest


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data, self.path, self.pos = data, path, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: corrupt payload (truncated at byte {len(self.data)})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_into(module, tensors: dict[str, np.ndarray], prefix: str = ""):
    """Copy matching names into ``module``'s parameters and buffers.

    Returns ``(loaded, missing, unexpected)`` name lists. A name present on
    both sides with a different shape is an error.
    """
    import torch

    own = dict(module.named_parameters())
    own.update(dict(module.named_buffers()))
    loaded, unexpected = [], []
    with torch.no_grad():
        for name, arr in tensors.items():
            if not name.startswith(prefix):
                unexpected.append(name)
                continue
            key = name[len(prefix):]
            if key not in own:
                unexpected.append(name)
                continue
            if tuple(own[key].shape) != tuple(arr.shape):
                raise CheckpointError(f"shape mismatch for {name}: checkpoint {arr.shape}, model {tuple(own[key].shape)}")
            own[key].copy_(torch.from_numpy(np.asarray(arr)).to(own[key].dtype))
            loaded.append(key)
    missing = sorted(set(own) - set(loaded))
    return loaded, missing, unexpected

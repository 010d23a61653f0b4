"""Binary checkpoint container.

Layout (little-endian)::

    magic      8 bytes  b"AGTCKPT\\0"
    version    uint32
    config     uint32 length + UTF-8 JSON
    stats      uint32 length + UTF-8 JSON
    n_arrays   uint32
    per array: uint16 name length, UTF-8 name, uint8 ndim, ndim x uint32 dims,
               float64 data (row-major)
    end        8 bytes  b"AGTCEND\\0"
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import NormalizationStats
from .model import ModelConfig, ModelParams, init_params

MAGIC = b"AGTCKPT\0"
TRAILER = b"AGTCEND\0"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


def _blob(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True).encode()
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(
    params: ModelParams,
    config: ModelConfig,
    stats: NormalizationStats | None,
    path,
    extra: dict | None = None,
) -> None:
    """Write parameters, config and normalization stats.

    ``extra`` (feature names, target column, ...) is stored alongside the
    model config.
    """
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    parts.append(_blob({"model": config.to_dict(), "extra": extra or {}}))
    parts.append(_blob(stats.to_dict() if stats is not None else None))
    arrays = params.arrays()
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    parts.append(TRAILER)
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointCorruptError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def json(self):
        (n,) = self.unpack("<I")
        try:
            return json.loads(self.take(n).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointCorruptError(f"bad JSON block: {exc}") from None


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, NormalizationStats | None, dict]:
    """Return ``(params, config, stats, extra)``."""
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    header = r.json()
    stats_blob = r.json()
    try:
        config = ModelConfig.from_dict(header["model"])
        extra = header.get("extra", {})
        stats = NormalizationStats.from_dict(stats_blob) if stats_blob is not None else None
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointCorruptError(f"{path}: invalid config block: {exc}") from None
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode(errors="replace")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.take(len(TRAILER)) != TRAILER or r.pos != len(buf):
        raise CheckpointCorruptError(f"{path}: bad trailer")
    params = init_params(config)
    try:
        params.load_arrays(arrays)
    except (KeyError, ValueError) as exc:
        raise CheckpointCorruptError(f"{path}: parameters do not match config: {exc}") from None
    return params, config, stats, extra

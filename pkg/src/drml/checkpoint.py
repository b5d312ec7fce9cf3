"""Checkpoint persistence: bit-exact round-trip of the parameter store.

Layout (little-endian):
    magic   4 bytes  b"DRML"
    version u32
    digest  32 bytes (sha256 of the canonical trainer config)
    count   u64
    entries, each:
        name_len u32, name utf-8
        rank     u32, dims rank * u64
        data     f64 * prod(dims)
"""

from __future__ import annotations

import struct
import warnings

import numpy as np

from .config import TrainerConfig, config_digest
from .data import FormatError, _atomic_write

CKPT_MAGIC = b"DRML"
CKPT_VERSION = 1


def save_checkpoint(path, params: dict, cfg: TrainerConfig) -> None:
    names = list(params)
    if len(set(names)) != len(names):
        raise ValueError("duplicate parameter names")
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), config_digest(cfg),
             struct.pack("<Q", len(names))]
    for name in names:
        value = np.asarray(params[name], dtype=np.float64)
        encoded = name.encode()
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    _atomic_write(path, b"".join(parts))


def load_checkpoint(path, cfg: TrainerConfig | None = None,
                    expected_shapes: dict | None = None) -> dict:
    """Read a checkpoint; optionally verify config digest and shapes."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a DRML checkpoint")
    if len(blob) < 48:
        raise FormatError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    digest = blob[8:40]
    (count,) = struct.unpack_from("<Q", blob, 40)
    offset = 48
    params = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode()
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, offset)
            offset += 8 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            data = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
            offset += 8 * size
        except (struct.error, ValueError) as err:
            raise FormatError(f"{path}: truncated at byte offset {offset}") from err
        if name in params:
            raise FormatError(f"{path}: duplicate parameter {name!r}")
        params[name] = data.reshape(dims).copy()
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes at offset {offset}")
    if cfg is not None and digest != config_digest(cfg):
        warnings.warn(f"{path}: checkpoint config digest does not match")
    if expected_shapes is not None:
        missing = set(expected_shapes) - set(params)
        extra = set(params) - set(expected_shapes)
        if missing:
            raise FormatError(f"{path}: missing parameter {sorted(missing)[0]!r}")
        if extra:
            raise FormatError(f"{path}: unexpected parameter {sorted(extra)[0]!r}")
        for name, shape in expected_shapes.items():
            if tuple(params[name].shape) != tuple(shape):
                raise FormatError(
                    f"{path}: parameter {name!r} has shape {params[name].shape}, "
                    f"expected {tuple(shape)}"
                )
    return params

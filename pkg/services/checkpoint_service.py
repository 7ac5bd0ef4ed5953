"""
Checkpoint Service - binary voxel-field checkpoints (RCVF).

Layout, all little-endian:
    4 bytes   magic b"RCVF"
    uint32    version (1)
    3 uint32  resolution nx, ny, nz
    6 float32 bounds min xyz, max xyz
    float32   density, nx*ny*nz values, C order
    float32   color, nx*ny*nz*3 values, C order
"""
import logging
import os
import struct

import numpy as np

from field_engine.scene import VoxelField

logger = logging.getLogger(__name__)

MAGIC = b"RCVF"
VERSION = 1
_HEADER = struct.Struct("<4sI3I6f")


class CheckpointFormatError(ValueError):
    pass


def encode_field(field: VoxelField) -> bytes:
    nx, ny, nz = field.resolution
    header = _HEADER.pack(MAGIC, VERSION, nx, ny, nz, *field.bounds_min.tolist(), *field.bounds_max.tolist())
    return b"".join([
        header,
        np.ascontiguousarray(field.density, dtype="<f4").tobytes(),
        np.ascontiguousarray(field.color, dtype="<f4").tobytes(),
    ])


def decode_field(data: bytes, source: str = "checkpoint") -> VoxelField:
    if len(data) < _HEADER.size:
        raise CheckpointFormatError(f"{source}: truncated header ({len(data)} bytes)")
    magic, version, nx, ny, nz, *bounds = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointFormatError(f"{source}: unsupported version {version}")

    count = nx * ny * nz
    expected = _HEADER.size + 4 * count * 4
    if len(data) != expected:
        raise CheckpointFormatError(f"{source}: expected {expected} bytes for {nx}x{ny}x{nz}, found {len(data)}")

    body = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    density = body[:count].reshape(nx, ny, nz).astype(np.float64)
    color = body[count:].reshape(nx, ny, nz, 3).astype(np.float64)
    # bounds go through float32 so a reload re-encodes to the same bytes
    bounds = np.asarray(bounds, dtype=np.float32).astype(np.float64)
    try:
        return VoxelField(density, color, bounds[:3], bounds[3:])
    except ValueError as e:
        raise CheckpointFormatError(f"{source}: {e}") from e


def save_field(field: VoxelField, path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_field(field))
    logger.info(f"Saved field {field.resolution} to {path}")


def load_field(path: str) -> VoxelField:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        return decode_field(f.read(), os.path.basename(path))

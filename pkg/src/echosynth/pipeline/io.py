"""Binary persistence: V3D volume files and model checkpoints.

V3D layout (all little-endian)::

    magic   4 bytes  b"V3D1"
    dtype   u8       0 = float32, 1 = uint8
    dims    3 x u32  (nx, ny, nz)
    spacing 3 x f32  mm per voxel
    payload          voxels, x fastest

Checkpoint layout (little-endian)::

    magic   4 bytes  b"ECK1"
    u32 config length, then the architecture config as UTF-8 JSON
    u32 parameter count, then per parameter:
        u16 name length, UTF-8 name, u8 ndim, ndim x u32 shape, float32 payload (C order)
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..volume import LabelVolume, Volume

V3D_MAGIC = b"V3D1"
V3D_HEADER = struct.Struct("<4sB3I3f")
DTYPE_F32, DTYPE_U8 = 0, 1
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_U8: np.dtype("u1")}

CKPT_MAGIC = b"ECK1"


class V3DFormatError(ValueError):
    """Base class for malformed V3D files."""


class BadMagicError(V3DFormatError):
    pass


class UnknownDtypeError(V3DFormatError):
    pass


class TruncatedPayloadError(V3DFormatError):
    pass


class TrailingDataError(V3DFormatError):
    pass


class CheckpointFormatError(ValueError):
    pass


def encode_volume(vol) -> bytes:
    if isinstance(vol, LabelVolume):
        code, arr, spacing = DTYPE_U8, vol.classes, vol.spacing
    elif isinstance(vol, Volume):
        code, arr, spacing = DTYPE_F32, vol.data, vol.spacing
    else:
        raise TypeError(f"expected Volume or LabelVolume, got {type(vol).__name__}")
    header = V3D_HEADER.pack(V3D_MAGIC, code, *arr.shape, *spacing)
    return header + arr.astype(_DTYPES[code]).tobytes(order="F")


def decode_volume(buf: bytes):
    if len(buf) < V3D_HEADER.size:
        raise TruncatedPayloadError(f"file is {len(buf)} bytes, shorter than the {V3D_HEADER.size}-byte header")
    magic, code, nx, ny, nz, sx, sy, sz = V3D_HEADER.unpack_from(buf)
    if magic != V3D_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {V3D_MAGIC!r}")
    if code not in _DTYPES:
        raise UnknownDtypeError(f"unknown dtype code {code}")
    dt = _DTYPES[code]
    expected = V3D_HEADER.size + nx * ny * nz * dt.itemsize
    if len(buf) < expected:
        raise TruncatedPayloadError(f"payload truncated: {len(buf)} bytes, header implies {expected}")
    if len(buf) > expected:
        raise TrailingDataError(f"{len(buf) - expected} unexpected bytes after the payload")
    arr = np.frombuffer(buf, dtype=dt, offset=V3D_HEADER.size).reshape((nx, ny, nz), order="F")
    spacing = (sx, sy, sz)
    if code == DTYPE_U8:
        return LabelVolume(np.ascontiguousarray(arr), spacing)
    return Volume(np.ascontiguousarray(arr, dtype=np.float32), spacing)


def save_volume(vol, path) -> None:
    Path(path).write_bytes(encode_volume(vol))


def load_volume(path):
    return decode_volume(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class ModelCheckpoint:
    config: dict
    params: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def subset(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k[len(prefix):], v) for k, v in self.params.items() if k.startswith(prefix))

    def to_bytes(self) -> bytes:
        cfg = json.dumps(self.config, sort_keys=True).encode("utf-8")
        parts = [CKPT_MAGIC, struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(self.params))]
        for name, arr in self.params.items():
            nb = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4")
            parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim),
                      struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes(order="C")]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ModelCheckpoint":
        if buf[:4] != CKPT_MAGIC:
            raise CheckpointFormatError(f"bad checkpoint magic {buf[:4]!r}")
        try:
            pos = 4
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            config = json.loads(buf[pos : pos + n].decode("utf-8"))
            pos += n
            (count,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            params = OrderedDict()
            for _ in range(count):
                (ln,) = struct.unpack_from("<H", buf, pos)
                pos += 2
                name = buf[pos : pos + ln].decode("utf-8")
                pos += ln
                (ndim,) = struct.unpack_from("<B", buf, pos)
                pos += 1
                shape = struct.unpack_from(f"<{ndim}I", buf, pos)
                pos += 4 * ndim
                size = int(np.prod(shape, dtype=np.int64)) * 4
                if pos + size > len(buf):
                    raise CheckpointFormatError(f"parameter {name!r} payload truncated")
                params[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
                pos += size
        except struct.error as exc:
            raise CheckpointFormatError(f"checkpoint truncated: {exc}") from None
        if pos != len(buf):
            raise CheckpointFormatError(f"{len(buf) - pos} trailing bytes in checkpoint")
        return cls(config, params)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())

"""Self-contained binary checkpoints.

Layout (all integers little-endian)::

    b"TLM1"  u32 version  u32 len  config text (UTF-8 key = value lines)
    u32 record count, then per record:
        u16 name len, name, u8 kind (0 fullprec32, 1 trit2bit), u8 ndim, u32 dims...
        [trit2bit only: f64 scale]
        u64 payload len, payload
    u32 CRC-32 of every preceding byte

Full-precision payloads are float32; trit payloads use the 2-bit packing of
:mod:`mmfree.ternary`. Files are written to a temporary name and renamed into place.
"""
from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ternary import TernaryMatrix

MAGIC = b"TLM1"
VERSION = 1
KIND_FULLPREC32 = 0
KIND_TRIT2BIT = 1


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointData:
    config_text: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    trits: dict[str, TernaryMatrix] = field(default_factory=dict)


def encode(ckpt: CheckpointData) -> bytes:
    cfg = ckpt.config_text.encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg,
             struct.pack("<I", len(ckpt.tensors) + len(ckpt.trits))]
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(_header(name, KIND_FULLPREC32, arr.shape))
        payload = arr.tobytes()
        parts += [struct.pack("<Q", len(payload)), payload]
    for name, t in ckpt.trits.items():
        parts.append(_header(name, KIND_TRIT2BIT, t.shape))
        payload = t.packed.tobytes()
        parts += [struct.pack("<d", t.scale), struct.pack("<Q", len(payload)), payload]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def _header(name: str, kind: int, shape: tuple[int, ...]) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw + struct.pack("<BB", kind, len(shape)) + struct.pack(
        f"<{len(shape)}I", *shape)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> CheckpointData:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    r = _Reader(buf[:-4])
    r.take(4)
    version, cfg_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = CheckpointData(r.take(cfg_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        kind, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I")
        if kind == KIND_FULLPREC32:
            (n,) = r.unpack("<Q")
            arr = np.frombuffer(r.take(n), dtype="<f4")
            if arr.size != int(np.prod(shape)):
                raise CheckpointError(f"record {name}: payload does not match shape {shape}")
            out.tensors[name] = arr.reshape(shape).astype(np.float32)
        elif kind == KIND_TRIT2BIT:
            if ndim != 2:
                raise CheckpointError(f"record {name}: trit matrices must be 2-D")
            (scale,) = r.unpack("<d")
            (n,) = r.unpack("<Q")
            out.trits[name] = TernaryMatrix(shape[0], shape[1], np.frombuffer(r.take(n), dtype=np.uint8), scale)
        else:
            raise CheckpointError(f"record {name}: unknown kind {kind}")
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after the last record")
    return out


def write_atomic(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save(path: str | Path, ckpt: CheckpointData) -> None:
    write_atomic(path, encode(ckpt))


def load(path: str | Path) -> CheckpointData:
    return decode(Path(path).read_bytes())

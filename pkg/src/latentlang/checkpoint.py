"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes  b"LLDCKPT\\0"
    version    u32
    header     u32 length, UTF-8 JSON (stage, config, vocab, extra), u32 crc32
    n_records  u32
    record*    u16 name_len, name, u8 group, u8 dtype, u8 ndim, u64 dims[ndim],
               u64 payload_len, payload (row-major, little-endian), u32 crc32
    footer     u64 total file length, u32 crc32 of everything before it

Each record's crc covers its bytes from ``name_len`` through the payload.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

MAGIC = b"LLDCKPT\0"
VERSION = 1
STAGES = ("ae", "diffusion", "full")
GROUPS = ("params", "ema")

_DTYPES = [
    (torch.float32, "<f4"),
    (torch.float64, "<f8"),
    (torch.float16, "<f2"),
    (torch.int64, "<i8"),
    (torch.int32, "<i4"),
    (torch.uint8, "|u1"),
    (torch.bool, "|b1"),
]
_CODE = {t: i for i, (t, _) in enumerate(_DTYPES)}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: str
    config: dict = field(default_factory=dict)
    vocab: Optional[dict] = None
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)
    ema: dict[str, torch.Tensor] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown stage {self.stage!r}")

    def group(self, prefix: str, source: str = "params") -> dict[str, torch.Tensor]:
        """Tensors under ``prefix.``, with the prefix stripped."""
        store = self.tensors if source == "params" else self.ema
        p = prefix + "."
        return {k[len(p):]: v for k, v in store.items() if k.startswith(p)}

    def has(self, prefix: str) -> bool:
        return any(k.startswith(prefix + ".") for k in self.tensors)


def _encode_tensor(name: str, group: int, t: torch.Tensor) -> bytes:
    t = t.detach().cpu().contiguous()
    if t.dtype not in _CODE:
        raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
    payload = t.numpy().astype(_DTYPES[_CODE[t.dtype]][1], copy=False).tobytes(order="C")
    name_b = name.encode("utf-8")
    body = struct.pack("<H", len(name_b)) + name_b
    body += struct.pack("<BBB", group, _CODE[t.dtype], t.ndim)
    body += struct.pack(f"<{t.ndim}Q", *t.shape)
    body += struct.pack("<Q", len(payload)) + payload
    return body + struct.pack("<I", zlib.crc32(body))


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps({"stage": ckpt.stage, "config": ckpt.config, "vocab": ckpt.vocab,
                         "extra": ckpt.extra}, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(struct.pack("<I", len(header)) + header + struct.pack("<I", zlib.crc32(header)))
    records = [(n, 0, t) for n, t in sorted(ckpt.tensors.items())]
    records += [(n, 1, t) for n, t in sorted(ckpt.ema.items())]
    out.write(struct.pack("<I", len(records)))
    for name, group, t in records:
        out.write(_encode_tensor(name, group, t))
    body = out.getvalue()
    body += struct.pack("<Q", len(body) + 12)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if len(data) < 12 + len(MAGIC):
        raise CheckpointError("truncated checkpoint")
    (declared,) = struct.unpack("<Q", data[-12:-4])
    if declared != len(data):
        raise CheckpointError(f"length mismatch: header says {declared} bytes, file has {len(data)}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError("file checksum mismatch")
    r = _Reader(data[:-12])
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (hlen,) = r.unpack("<I")
    header = r.take(hlen)
    (hcrc,) = r.unpack("<I")
    if zlib.crc32(header) != hcrc:
        raise CheckpointError("header checksum mismatch")
    meta = json.loads(header.decode("utf-8"))
    ckpt = Checkpoint(stage=meta["stage"], config=meta["config"], vocab=meta["vocab"], extra=meta["extra"])
    (n_records,) = r.unpack("<I")
    for _ in range(n_records):
        start = r.pos
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        group, code, ndim = r.unpack("<BBB")
        shape = r.unpack(f"<{ndim}Q")
        (plen,) = r.unpack("<Q")
        payload = r.take(plen)
        body = r.data[start:r.pos]
        (rcrc,) = r.unpack("<I")
        if zlib.crc32(body) != rcrc:
            raise CheckpointError(f"checksum mismatch in record {name!r}")
        if code >= len(_DTYPES) or group >= len(GROUPS):
            raise CheckpointError(f"bad dtype/group code in record {name!r}")
        dtype, np_dtype = _DTYPES[code]
        arr = np.frombuffer(payload, dtype=np_dtype).reshape(shape)
        tensor = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
        store = ckpt.tensors if group == 0 else ckpt.ema
        if name in store:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        store[name] = tensor.to(dtype)
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after last record")
    return ckpt


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def prefixed(prefix: str, state: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in state.items()}

"""Binary named-tensor checkpoints.

Layout (all integers little-endian)::

    b"DCKP" | u32 version | u32 n | n bytes UTF-8 JSON header
    u32 tensor_count
    per tensor: u16 name_len | name | u32 rank | rank * u32 extent | u64 offset
    f32 payloads (offsets are relative to the start of this block)
    u32 CRC32 of every preceding byte

The JSON header carries the model configuration echo, step counter, RNG
state and the optimizer step count; optimizer moment buffers are stored as
tensors named ``optim.m.<param>`` / ``optim.v.<param>``.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpoint, ShapeMismatch, VersionMismatch

MAGIC = b"DCKP"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    tensors: dict                      # name -> float32 array
    optimizer: dict = field(default_factory=dict)   # "t", "m.<name>", "v.<name>"
    rng_state: dict = field(default_factory=dict)
    step: int = 0
    meta: dict = field(default_factory=dict)


def _header(ckpt: Checkpoint) -> bytes:
    head = {
        "version": VERSION,
        "config": ckpt.config,
        "step": int(ckpt.step),
        "rng": ckpt.rng_state,
        "optimizer_t": int(ckpt.optimizer.get("t", 0)),
        "meta": ckpt.meta,
    }
    return json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(ckpt: Checkpoint) -> bytes:
    named = list(ckpt.tensors.items())
    named += [(f"optim.{k}", v) for k, v in ckpt.optimizer.items() if k != "t"]

    header = _header(ckpt)
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", len(named))]
    payloads, offset = [], 0
    for name, arr in named:
        arr = np.asarray(arr, dtype="<f4")  # tobytes() emits C order; keeps rank-0 intact
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(struct.pack("<Q", offset))
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    body = b"".join(parts + payloads)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf, self.pos = buf, pos

    def read(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise CorruptCheckpoint("unexpected end of checkpoint data")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpoint("unexpected end of checkpoint data")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def parse_table(buf: bytes):
    """Return (header dict, [(name, shape, offset)], payload start, crc_ok)."""
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CorruptCheckpoint("bad magic")
    body, (stored,) = buf[:-4], struct.unpack("<I", buf[-4:])
    crc_ok = (zlib.crc32(body) & 0xFFFFFFFF) == stored
    r = _Reader(body, 4)
    (version, hlen) = r.read("<II")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from None
    (count,) = r.read("<I")
    table = []
    for _ in range(count):
        (nlen,) = r.read("<H")
        name = r.take(nlen).decode("utf-8", errors="replace")
        (rank,) = r.read("<I")
        shape = r.read(f"<{rank}I") if rank else ()
        (offset,) = r.read("<Q")
        table.append((name, tuple(shape), offset))
    return header, table, r.pos, crc_ok, body


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    header, table, start, crc_ok, body = parse_table(buf)
    if not crc_ok:
        raise CorruptCheckpoint(f"CRC mismatch in {path}")
    payload = body[start:]
    tensors, optimizer = {}, {"t": header.get("optimizer_t", 0)}
    for name, shape, offset in table:
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(payload):
            raise CorruptCheckpoint(f"tensor {name} extends past the payload")
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape)
        arr = arr.astype(np.float32)
        if name.startswith("optim."):
            optimizer[name[len("optim."):]] = arr
        else:
            tensors[name] = arr
    return Checkpoint(header["config"], tensors, optimizer, header.get("rng", {}),
                      header.get("step", 0), header.get("meta", {}))


def describe(path) -> tuple:
    """(file CRC ok, rows of (name, shape, payload crc32)) without raising on CRC failure."""
    buf = Path(path).read_bytes()
    _, table, start, crc_ok, body = parse_table(buf)
    rows = []
    for name, shape, offset in table:
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        chunk = body[start + offset:start + offset + nbytes]
        rows.append((name, shape, zlib.crc32(chunk) & 0xFFFFFFFF if len(chunk) == nbytes else None))
    return crc_ok, rows


def assign_tensors(params: dict, tensors: dict, strict: bool = True, prefix: str = "") -> list:
    """Copy checkpoint arrays into matching parameters; returns the names assigned.

    Raises ShapeMismatch naming the first tensor whose shape disagrees.
    """
    assigned = []
    for name, p in params.items():
        if not name.startswith(prefix):
            continue
        if name not in tensors:
            if strict:
                raise ShapeMismatch(f"checkpoint has no tensor {name}")
            continue
        arr = tensors[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise ShapeMismatch(f"tensor {name}: checkpoint shape {tuple(arr.shape)} vs model {tuple(p.data.shape)}")
        p.data = np.array(arr, dtype=p.data.dtype)
        assigned.append(name)
    return assigned

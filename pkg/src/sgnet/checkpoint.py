"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SGN1"
    u32 header length, header bytes (UTF-8 ``key = value`` lines)
    u32 block count
    per block: u16 name length, name, u8 ndim, u32 * ndim extents,
               float32 values in row-major order
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SGN1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: dict
    params: dict[str, np.ndarray]
    epoch: int = 0
    best_val_loss: float = float("inf")
    optimizer: dict = field(default_factory=dict)  # lr, beta1, beta2, eps, step
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None
    scheduler: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)  # train./data. settings, kept as strings
    version: int = FORMAT_VERSION


def _header_lines(ck: Checkpoint) -> list[str]:
    lines = [f"format_version = {ck.version}", f"epoch = {ck.epoch}",
             f"best_val_loss = {ck.best_val_loss!r}"]
    for k, v in ck.model_config.items():
        lines.append(f"model.{k} = {json.dumps(v)}")
    for k, v in ck.optimizer.items():
        lines.append(f"optimizer.{k} = {json.dumps(v)}")
    for k, v in ck.scheduler.items():
        lines.append(f"scheduler.{k} = {json.dumps(v)}")
    for k, v in ck.extra.items():
        lines.append(f"{k} = {json.dumps(v)}")
    if ck.rng_state is not None:
        lines.append(f"rng_state = {json.dumps(ck.rng_state, sort_keys=True)}")
    return lines


def save(ck: Checkpoint, path) -> None:
    header = ("\n".join(_header_lines(ck)) + "\n").encode("utf-8")
    blocks = [(f"param.{k}", v) for k, v in ck.params.items()]
    blocks += [(f"adam_m.{k}", v) for k, v in ck.adam_m.items()]
    blocks += [(f"adam_v.{k}", v) for k, v in ck.adam_v.items()]
    out = bytearray(MAGIC)
    out += struct.pack("<I", len(header)) + header
    out += struct.pack("<I", len(blocks))
    for name, arr in blocks:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    r = _Reader(buf)
    r.take(4)
    (hlen,) = r.unpack("<I")
    try:
        header = r.take(hlen).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    meta = {}
    for line in header.splitlines():
        if line.strip():
            key, _, value = line.partition(" = ")
            meta[key] = value
    version = int(meta.get("format_version", -1))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")

    def section(prefix):
        return {k[len(prefix):]: json.loads(v) for k, v in meta.items() if k.startswith(prefix)}

    def blocks(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    extra = {k: json.loads(v) for k, v in meta.items()
             if k.split(".")[0] in ("train", "data", "split", "run")}
    return Checkpoint(
        model_config=section("model."),
        params=blocks("param."),
        epoch=int(meta["epoch"]),
        best_val_loss=float(meta["best_val_loss"]),
        optimizer=section("optimizer."),
        adam_m=blocks("adam_m."),
        adam_v=blocks("adam_v."),
        rng_state=json.loads(meta["rng_state"]) if "rng_state" in meta else None,
        scheduler=section("scheduler."),
        extra=extra,
        version=version,
    )

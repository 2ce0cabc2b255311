"""Checkpoint container and tensor record serialization.

Tensor record: name-length (u32 LE), name bytes (utf-8), rank (u32 LE),
dims (u32 LE each), payload (f64 LE, row-major).

Checkpoint container: magic "STAN", u32 version=1, u32 tensor count, then
tensor records.  One file per net.  Net id / epoch / seed / config hash ride
along as reserved "meta."-named scalar records.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"STAN"
VERSION = 1


class CheckpointError(ValueError):
    """Raised on a malformed checkpoint or tensor record."""


def write_tensor_record(buf, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    buf.write(struct.pack("<I", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensor_record(buf) -> tuple[str, np.ndarray]:
    raw = buf.read(4)
    if len(raw) != 4:
        raise CheckpointError("truncated record header")
    (nlen,) = struct.unpack("<I", raw)
    name = buf.read(nlen).decode("utf-8")
    (rank,) = struct.unpack("<I", buf.read(4))
    dims = [struct.unpack("<I", buf.read(4))[0] for _ in range(rank)]
    count = int(np.prod(dims)) if dims else 1
    payload = buf.read(count * 8)
    if len(payload) != count * 8:
        raise CheckpointError(f"truncated payload for tensor {name!r}")
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    return name, arr


@dataclass
class Checkpoint:
    """A named tensor table plus run provenance."""

    net_id: str
    tensors: dict[str, np.ndarray]
    epoch: int = 0
    seed: int = 0
    config_hash: str = ""
    extra: dict[str, float] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        meta: list[tuple[str, np.ndarray]] = [
            (f"meta.net_id={self.net_id}", np.zeros(1)),
            ("meta.epoch", np.array([float(self.epoch)])),
            ("meta.seed", np.array([float(self.seed)])),
            (f"meta.config_hash={self.config_hash}", np.zeros(1)),
        ]
        for k in sorted(self.extra):
            meta.append((f"meta.extra.{k}", np.array([self.extra[k]])))
        records = meta + sorted(self.tensors.items())
        buf.write(MAGIC)
        buf.write(struct.pack("<I", VERSION))
        buf.write(struct.pack("<I", len(records)))
        for name, arr in records:
            write_tensor_record(buf, name, arr)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        buf = io.BytesIO(data)
        if buf.read(4) != MAGIC:
            raise CheckpointError("bad magic, not a checkpoint file")
        (version,) = struct.unpack("<I", buf.read(4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", buf.read(4))
        ck = cls(net_id="", tensors={})
        for _ in range(count):
            name, arr = read_tensor_record(buf)
            if name.startswith("meta.net_id="):
                ck.net_id = name.split("=", 1)[1]
            elif name == "meta.epoch":
                ck.epoch = int(arr[0])
            elif name == "meta.seed":
                ck.seed = int(arr[0])
            elif name.startswith("meta.config_hash="):
                ck.config_hash = name.split("=", 1)[1]
            elif name.startswith("meta.extra."):
                ck.extra[name[len("meta.extra.") :]] = float(arr[0])
            else:
                ck.tensors[name] = arr
        return ck

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via temp file + rename so partial artifacts never appear."""
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))

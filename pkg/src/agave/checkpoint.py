"""Binary checkpoint format.

Layout, all integers little-endian::

    b"AGAVE1"                      magic
    u32 version
    u32 n, n bytes                 JSON document {"model": ModelConfig, "train": state}
    u32 count                      parameter records, sorted by name:
        u16 n, n bytes name        utf-8
        u8 ndim, ndim * u32 shape
        float32 values             row-major
    per parameter, same order:
        u64 step, float32 m, float32 u
    u32 n, n bytes                 JSON PRNG state (numpy bit generator)
"""
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from .errors import BadMagic, ShapeTableMismatch, TruncatedFile
from .model import AgaveModel, ModelConfig

MAGIC = b"AGAVE1"
VERSION = 1
_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    model: AgaveModel
    train_state: Dict = field(default_factory=dict)
    rng_state: Optional[Dict] = None


def encode_checkpoint(model: AgaveModel, train_state: Optional[Dict] = None,
                      rng_state: Optional[Dict] = None) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    doc = json.dumps({"model": model.config.to_dict(), "train": train_state or {}}, sort_keys=True).encode()
    out.write(struct.pack("<I", len(doc)) + doc)
    items = model.store.items()
    out.write(struct.pack("<I", len(items)))
    for name, param in items:
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)) + raw)
        out.write(struct.pack("<B", param.ndim))
        out.write(struct.pack(f"<{param.ndim}I", *param.shape))
        out.write(param.data.astype(_F32).tobytes())
    for name, _ in items:
        slot = model.store.slots[name]
        out.write(struct.pack("<Q", slot["t"]))
        out.write(np.asarray(slot["m"]).astype(_F32).tobytes())
        out.write(np.asarray(slot["u"]).astype(_F32).tobytes())
    rng_doc = json.dumps(rng_state, sort_keys=True).encode()
    out.write(struct.pack("<I", len(rng_doc)) + rng_doc)
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"checkpoint ends at byte {len(self.data)}, needed {self.pos + n}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(count * 4), dtype=_F32).reshape(shape)


def decode_checkpoint(data: bytes, expected: Optional[ModelConfig] = None) -> Checkpoint:
    """Parse and validate a checkpoint, then build the model it describes.

    With ``expected`` given, the stored shape table must match the one that
    configuration produces.
    """
    if data[:len(MAGIC)] != MAGIC:
        raise BadMagic("not an AGAVE1 checkpoint")
    reader = _Reader(data)
    reader.take(len(MAGIC))
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise BadMagic(f"unsupported checkpoint version {version}")
    (doc_len,) = reader.unpack("<I")
    doc = json.loads(reader.take(doc_len))
    (count,) = reader.unpack("<I")
    table = {}
    offsets = []
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        table[name] = tuple(shape)
        offsets.append((name, reader.pos))
        reader.take(int(np.prod(shape, dtype=np.int64)) * 4)

    model = AgaveModel(ModelConfig.from_dict(doc["model"]))
    wanted = (AgaveModel(expected) if expected is not None else model).store.shape_table()
    if wanted != table or model.store.shape_table() != table:
        diff = sorted(set(wanted.items()) ^ set(table.items()))
        raise ShapeTableMismatch(f"shape table differs from configuration: {diff[:4]}")

    slots = {}
    for name, _ in offsets:
        (t,) = reader.unpack("<Q")
        slots[name] = (t, reader.array(table[name]), reader.array(table[name]))
    (rng_len,) = reader.unpack("<I")
    rng_state = json.loads(reader.take(rng_len))

    for name, pos in offsets:
        arr = np.frombuffer(data, dtype=_F32, count=int(np.prod(table[name], dtype=np.int64)), offset=pos)
        param = model.store.params[name]
        param.data = arr.reshape(table[name]).astype(param.dtype)
        t, m, u = slots[name]
        model.store.slots[name] = {"t": t, "m": m.astype(param.dtype), "u": u.astype(param.dtype)}
    return Checkpoint(model, doc.get("train", {}), rng_state)


def save_checkpoint(model: AgaveModel, path: Union[str, Path], train_state: Optional[Dict] = None,
                    rng_state: Optional[Dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(model, train_state, rng_state))
    tmp.replace(path)
    return path


def read_checkpoint(path: Union[str, Path], expected: Optional[ModelConfig] = None) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), expected)


def load_checkpoint(path: Union[str, Path], expected: Optional[ModelConfig] = None) -> AgaveModel:
    return read_checkpoint(path, expected).model

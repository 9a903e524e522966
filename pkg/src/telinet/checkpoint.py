"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes   b"TLNTCKPT"
    version    u32
    count      u32       number of records
    records    count x { name_len u16, name utf-8,
                         dtype u8, rank u8, dims u64 x rank, raw data }
    crc32      u32       over every preceding byte

Record names: ``meta`` (JSON), ``spec`` (JSON), ``param/<layer>/<slot>``,
``state/<layer>/<slot>`` and ``optim/<layer>/<slot>``. Records are written in
a fixed order and the JSON is key-sorted, so saving the same state twice
produces identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import Model, ModelSpec
from .optim import RMSprop
from .tensor import ShapeError

MAGIC = b"TLNTCKPT"
VERSION = 1

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_TAGS = {np.dtype("float32"): 1, np.dtype("int64"): 2, np.dtype("uint8"): 3}


class CheckpointError(Exception):
    """Base class for checkpoint loading failures."""


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class SpecMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: Model
    optimizer: RMSprop | None
    epoch: int
    seed: int


def _record(name: str, array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array)
    tag = _TAGS[array.dtype]
    encoded = name.encode("utf-8")
    head = struct.pack("<H", len(encoded)) + encoded + struct.pack("<BB", tag, array.ndim)
    head += struct.pack(f"<{array.ndim}Q", *array.shape)
    return head + array.astype(_DTYPES[tag], copy=False).tobytes()


def _json_record(name: str, payload: dict) -> bytes:
    raw = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _record(name, np.frombuffer(raw, dtype=np.uint8))


def to_bytes(model: Model, optimizer: RMSprop | None = None, epoch: int = 0) -> bytes:
    meta = {"epoch": int(epoch), "seed": model.seed,
            "optimizer": optimizer.hyperparameters() if optimizer is not None else None}
    records = [_json_record("meta", meta), _json_record("spec", model.spec.to_dict())]
    for name, value in model.parameters().items():
        records.append(_record(f"param/{name}", value))
    for name, value in model.states().items():
        records.append(_record(f"state/{name}", value))
    if optimizer is not None:
        for name in sorted(optimizer.cache):
            records.append(_record(f"optim/{name}", optimizer.cache[name]))
    body = MAGIC + struct.pack("<II", VERSION, len(records)) + b"".join(records)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: Model, path: str | os.PathLike, optimizer: RMSprop | None = None,
                    epoch: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(model, optimizer, epoch))
    os.replace(tmp, path)
    return path


def _parse(data: bytes) -> tuple[int, dict[str, np.ndarray]]:
    if len(data) < len(MAGIC) + 12 or data[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint file (bad magic or too short)")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {VERSION}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError("checksum mismatch (truncated or damaged file)")
    (count,) = struct.unpack_from("<I", body, len(MAGIC) + 4)
    pos = len(MAGIC) + 8
    records: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + name_len].decode("utf-8")
            pos += name_len
            tag, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            dtype = _DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(body):
                raise CorruptCheckpointError(f"record {name!r} runs past the end of the file")
            records[name] = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize,
                                          offset=pos).reshape(dims).astype(dtype.newbyteorder("="))
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"malformed record: {exc}") from None
    if pos != len(body):
        raise CorruptCheckpointError("trailing bytes after the last record")
    return version, records


def load_checkpoint(path: str | os.PathLike, expected_spec: ModelSpec | None = None) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Raises:
        CorruptCheckpointError: truncated, damaged or malformed file.
        CheckpointVersionError: unsupported format version.
        SpecMismatchError: the stored spec differs from ``expected_spec`` or
            the stored tensors do not fit the stored spec.
    """
    data = Path(path).read_bytes()
    _, records = _parse(data)
    try:
        meta = json.loads(records.pop("meta").tobytes())
        spec = ModelSpec.from_dict(json.loads(records.pop("spec").tobytes()))
    except (KeyError, ValueError) as exc:
        raise CorruptCheckpointError(f"missing or unreadable header record: {exc}") from None
    if expected_spec is not None and spec != expected_spec:
        raise SpecMismatchError(
            f"checkpoint holds model {spec.name!r} with a different layer spec than expected {expected_spec.name!r}"
        )
    try:
        model = Model(spec, seed=meta["seed"])
    except (ShapeError, ValueError, TypeError) as exc:
        raise SpecMismatchError(f"stored spec is invalid: {exc}") from None

    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "state": {}, "optim": {}}
    for name, value in records.items():
        prefix, _, rest = name.partition("/")
        if prefix not in groups:
            raise CorruptCheckpointError(f"unknown record {name!r}")
        groups[prefix][rest] = value
    try:
        model.assign(groups["param"], groups["state"])
    except ShapeError as exc:
        raise SpecMismatchError(str(exc)) from None

    optimizer = None
    if meta.get("optimizer") is not None:
        optimizer = RMSprop(**meta["optimizer"], cache=dict(groups["optim"]))
    return Checkpoint(model=model, optimizer=optimizer, epoch=int(meta["epoch"]), seed=int(meta["seed"]))

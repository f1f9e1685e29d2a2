"""Binary tensor dumps and model checkpoints.

TNSR record (little-endian)::

    b"TNSR" | u32 rank | rank x u32 extents | u8 dtype (0=f32, 1=f64) | values, row-major

Checkpoint::

    b"CVCK" | u32 header length | header (canonical JSON: sorted keys, no spaces)
    then, per parameter in header["names"] order: u32 name length | utf-8 name | TNSR record
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"TNSR"
CKPT_MAGIC = b"CVCK"
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_atomic(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def tnsr_bytes(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _TAGS:
        raise FormatError(f"TNSR supports f32/f64 only, got {arr.dtype}")
    tag = _TAGS[arr.dtype]
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<B", tag)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()


def read_tnsr_stream(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad TNSR magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    (tag,) = struct.unpack("<B", fh.read(1))
    if tag not in _DTYPES:
        raise FormatError(f"unknown TNSR dtype tag {tag}")
    dt = _DTYPES[tag]
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(count * dt.itemsize)
    if len(raw) != count * dt.itemsize:
        raise FormatError("truncated TNSR payload")
    return np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def save_tnsr(arr, path) -> None:
    write_atomic(path, tnsr_bytes(arr))


def load_tnsr(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tnsr_stream(fh)


def checkpoint_bytes(config: dict, params: dict[str, np.ndarray], extra: dict | None = None) -> bytes:
    header = {"config": config, "names": list(params)}
    if extra:
        header["extra"] = extra
    hb = canonical_json(header).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + struct.pack("<I", len(hb)) + hb)
    for name, arr in params.items():
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)) + nb)
        buf.write(tnsr_bytes(arr))
    return buf.getvalue()


def save_checkpoint(path, config: dict, params: dict[str, np.ndarray], extra: dict | None = None) -> None:
    write_atomic(path, checkpoint_bytes(config, params, extra))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (header, params); header holds ``config`` and optional ``extra``."""
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode())
        params = {}
        for expected in header["names"]:
            (ln,) = struct.unpack("<I", fh.read(4))
            name = fh.read(ln).decode()
            if name != expected:
                raise FormatError(f"{path}: record {name!r} out of order (expected {expected!r})")
            params[name] = read_tnsr_stream(fh)
    return header, params

"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes   b"P4DCKPT\\0"
    version      u32       1
    section_len  u16, section tag (utf-8)
    count        u32       number of tensors
    table        count x { name_len u16, name utf-8, dtype u8 (0=f32, 1=f64, 2=i64),
                           ndim u8, shape u32 * ndim, offset u64, nbytes u64 }
    payload      raw tensor bytes, offsets relative to the payload start

The file's SHA-256 is what run manifests record as the checkpoint hash.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"P4DCKPT\0"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


def encode_checkpoint(section: str, tensors: Mapping[str, torch.Tensor | np.ndarray]) -> bytes:
    arrays = {}
    for name, t in tensors.items():
        a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        if a.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {a.dtype} for {name}")
        arrays[name] = np.ascontiguousarray(a)
    sec = section.encode()
    head = [MAGIC, struct.pack("<I", VERSION), struct.pack("<H", len(sec)), sec, struct.pack("<I", len(arrays))]
    payload = []
    offset = 0
    for name, a in arrays.items():
        raw = a.astype(a.dtype.newbyteorder("<")).tobytes()
        nb = name.encode()
        head.append(struct.pack("<H", len(nb)) + nb)
        head.append(struct.pack("<BB", _CODES[a.dtype], a.ndim))
        head.append(struct.pack(f"<{a.ndim}I", *a.shape))
        head.append(struct.pack("<QQ", offset, len(raw)))
        payload.append(raw)
        offset += len(raw)
    return b"".join(head) + b"".join(payload)


def decode_checkpoint(blob: bytes, section: str | None = None) -> tuple[str, dict[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    pos = 8
    (version,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (slen,) = struct.unpack_from("<H", blob, pos)
    pos += 2
    tag = blob[pos:pos + slen].decode()
    pos += slen
    if section is not None and tag != section:
        raise CheckpointError(f"checkpoint section is {tag!r}, expected {section!r}")
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        offset, nbytes = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        entries.append((name, code, shape, offset, nbytes))
    out = {}
    for name, code, shape, offset, nbytes in entries:
        raw = blob[pos + offset:pos + offset + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"truncated payload for {name}")
        out[name] = np.frombuffer(raw, dtype=_DTYPES[code]).reshape(shape).copy()
    return tag, out


def save_checkpoint(path, section: str, tensors) -> str:
    blob = encode_checkpoint(section, tensors)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path, section: str | None = None) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes(), section)[1]


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_hash(module: torch.nn.Module) -> str:
    """Hash of parameter names and raw values, independent of any file."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()

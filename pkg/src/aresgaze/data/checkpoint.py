"""Binary model checkpoints.

Layout (all integers little-endian)::

    b"ARSG" | u32 version | u32 len | config JSON
    section*  where section = 4-byte tag | u32 count | entry*
    entry = u16 name_len | name | u8 ndim | u32 dims[ndim] | float32 data

Tags: ``PARM`` parameters, ``BUFS`` batch-norm running statistics and the
optional ``OPTM`` optimizer velocities. Entries are sorted by name.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from ..gazenet import GazeNet, GazeNetConfig

MAGIC = b"ARSG"
VERSION = 1
SECTIONS = (b"PARM", b"BUFS", b"OPTM")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    def __init__(self, field: str, stored, expected):
        super().__init__(f"config mismatch at {field!r}: checkpoint has {stored!r}, model has {expected!r}")
        self.field = field


def _flatten(d, prefix=""):
    out = {}
    for key in sorted(d):
        value = d[key]
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = list(value) if isinstance(value, tuple) else value
    return out


def first_config_difference(stored: dict, expected: dict) -> tuple[str, object, object] | None:
    a, b = _flatten(stored), _flatten(expected)
    for key in sorted(set(a) | set(b)):
        if a.get(key) != b.get(key):
            return key, a.get(key), b.get(key)
    return None


def _encode_section(tag: bytes, entries: dict[str, np.ndarray]) -> bytes:
    parts = [tag, struct.pack("<I", len(entries))]
    for name in sorted(entries):
        arr = np.asarray(entries[name])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def encode_checkpoint(model: GazeNet, optimizer_state: dict[str, np.ndarray] | None = None) -> bytes:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg]
    parts.append(_encode_section(b"PARM", {n: p.data for n, p in model.named_parameters()}))
    parts.append(_encode_section(b"BUFS", dict(model.named_buffers())))
    if optimizer_state:
        parts.append(_encode_section(b"OPTM", optimizer_state))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos} (needed {n} more bytes)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> tuple[dict, dict[bytes, dict[str, np.ndarray]]]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    config = json.loads(r.take(n).decode("utf-8"))
    sections: dict[bytes, dict[str, np.ndarray]] = {}
    while r.pos < len(data):
        tag = r.take(4)
        if tag not in SECTIONS:
            raise CheckpointError(f"unknown section tag {tag!r} at byte {r.pos - 4}")
        (count,) = r.unpack("<I")
        entries = {}
        for _ in range(count):
            (ln,) = r.unpack("<H")
            name = r.take(ln).decode("utf-8")
            (ndim,) = r.unpack("<B")
            dims = r.unpack(f"<{ndim}I")
            size = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
            entries[name] = arr.astype(np.float32)
        sections[tag] = entries
    return config, sections


def save_checkpoint(model: GazeNet, path: str | os.PathLike, optimizer_state: dict[str, np.ndarray] | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(model, optimizer_state))


def _assign(target: np.ndarray, value: np.ndarray, name: str) -> None:
    if target.shape != value.shape:
        raise CheckpointShapeError(f"{name}: checkpoint shape {value.shape} != model shape {target.shape}")
    target[...] = value


def load_checkpoint(path: str | os.PathLike, model: GazeNet | None = None, return_optimizer: bool = False):
    """Restore a model. Without ``model`` one is built (float32) from the
    stored config; with ``model`` the stored config must match its config."""
    with open(path, "rb") as fh:
        data = fh.read()
    config_dict, sections = decode_checkpoint(data)
    if model is None:
        model = GazeNet(GazeNetConfig.from_dict(config_dict), dtype=np.float32)
    else:
        diff = first_config_difference(config_dict, model.config.to_dict())
        if diff is not None:
            raise ConfigMismatchError(*diff)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    stored_params = sections.get(b"PARM", {})
    stored_bufs = sections.get(b"BUFS", {})
    for kind, have, stored in (("parameter", params, stored_params), ("buffer", buffers, stored_bufs)):
        missing = sorted(set(have) - set(stored))
        extra = sorted(set(stored) - set(have))
        if missing or extra:
            raise CheckpointShapeError(f"{kind} names differ: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, p in params.items():
        _assign(p.data, stored_params[name], name)
    for name, buf in buffers.items():
        _assign(buf, stored_bufs[name], name)
    if return_optimizer:
        return model, sections.get(b"OPTM")
    return model

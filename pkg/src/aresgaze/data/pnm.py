"""Binary PGM (P5) and PPM (P6) images with maxval 255."""

from __future__ import annotations

import os

import numpy as np


class PNMError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


def encode_pnm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise PNMError(f"only 8-bit images are supported, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise PNMError(f"unsupported image shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def decode_pnm(data: bytes) -> np.ndarray:
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise PNMError("missing P5/P6 magic", 0)
    channels = 1 if data[:2] == b"P5" else 3
    pos = 2
    fields = []
    while len(fields) < 3:
        # whitespace and comments between header tokens
        while pos < len(data) and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                end = data.find(b"\n", pos)
                pos = len(data) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise PNMError("malformed header: expected a decimal number", pos)
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PNMError("malformed header: expected whitespace after maxval", pos)
    pos += 1
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise PNMError(f"invalid extent {w}x{h}", pos)
    if maxval != 255:
        raise PNMError(f"unsupported maxval {maxval} (only 255)", pos)
    n = w * h * channels
    payload = data[pos:pos + n]
    if len(payload) < n:
        raise PNMError(f"truncated payload: expected {n} bytes, found {len(payload)}", pos + len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape((h, w) if channels == 1 else (h, w, 3)).copy()


def write_pnm(path: str | os.PathLike, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(img))


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return decode_pnm(data)
    except PNMError as exc:
        raise PNMError(f"{path}: {exc}") from None

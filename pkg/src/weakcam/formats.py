"""On-disk formats: float fields (WCF1), binary PGM masks, and checkpoints (WCK1).

All multi-byte integers and floats are little-endian so files are byte-stable
across platforms.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FIELD_MAGIC = b"WCF1"
CHECKPOINT_MAGIC = b"WCK1"


def write_field(path, values) -> None:
    """Write a real-valued field: 16-byte header (magic, h, w, reserved) + f32 data."""
    f = np.asarray(values, dtype="<f4")
    if f.ndim != 2:
        raise ValueError(f"field must be 2-D, got shape {f.shape}")
    h, w = f.shape
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC + struct.pack("<III", h, w, 0))
        fh.write(f.tobytes())


def read_field(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != FIELD_MAGIC:
            raise ValueError(f"{path}: not a WCF1 field file")
        h, w, _ = struct.unpack("<III", header[4:])
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != h * w:
        raise ValueError(f"{path}: expected {h * w} values, found {data.size}")
    return data.reshape(h, w).copy()


def write_pgm(path, values, maxval: int = 255) -> None:
    """Write a binary (P5) PGM; values must be integers in [0, maxval] with maxval <= 255."""
    a = np.asarray(values)
    if a.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {a.shape}")
    if not 1 <= maxval <= 255:
        raise ValueError("maxval must be in [1, 255]")
    if a.min() < 0 or a.max() > maxval:
        raise ValueError(f"pixel values outside [0, {maxval}]")
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(a.astype(np.uint8).tobytes())


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Read a binary PGM; returns (uint8 array, maxval)."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # Tokenize the header: magic, width, height, maxval; '#' starts a comment.
    pos, tokens = 2, []
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = (int(t) for t in tokens)
    if not 1 <= maxval <= 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(raw[pos : pos + h * w], dtype=np.uint8)
    if data.size != h * w:
        raise ValueError(f"{path}: expected {h * w} pixels, found {data.size}")
    return data.reshape(h, w).copy(), maxval


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    """Write named f32 parameter blobs; blob order is sorted by name."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", len(params)))
        for name in sorted(params):
            blob = np.asarray(params[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)) + encoded)
            fh.write(struct.pack("<B", blob.ndim))
            fh.write(struct.pack(f"<{blob.ndim}I", *blob.shape))
            fh.write(blob.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8 or header[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a WCK1 checkpoint file")
        (count,) = struct.unpack("<I", header[4:])
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4")
            if data.size != n:
                raise ValueError(f"{path}: truncated blob {name!r}")
            params[name] = data.reshape(shape).astype(np.float32)
    return params

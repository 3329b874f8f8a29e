"""Reading and writing images as simple 8-bit container files.

Two encodings share one logical layout (channel-major, row-major within a
channel, values 0..255 that map to [0, 1] by dividing by 255):

* text: an ASCII header line ``C W H`` followed by whitespace-separated
  integers;
* binary: a 12-byte header of three little-endian u32 (C, W, H) followed by
  C*W*H raw bytes.

``load_image`` sniffs the encoding by whether the file starts with an ASCII
``C W H`` header line.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .image import ImageTensor

__all__ = ["ContainerFormatError", "load_image", "save_image", "quantize"]

_HEADER = struct.Struct("<III")


class ContainerFormatError(ValueError):
    """The file is not a well-formed image container."""


def quantize(image: ImageTensor) -> np.ndarray:
    """Round [0, 1] values to the 8-bit grid; inverse of dividing by 255."""
    return np.rint(image.data * 255.0).astype(np.uint8)


def _looks_like_text(raw: bytes) -> bool:
    head = raw[:80]
    try:
        text = head.decode("ascii")
    except UnicodeDecodeError:
        return False
    first_line = text.split("\n", 1)[0].split("\r", 1)[0]
    parts = first_line.split()
    return len(parts) == 3 and all(p.isdigit() for p in parts)


def _from_bytes_payload(dims: tuple[int, int, int], values: np.ndarray, path) -> ImageTensor:
    channels, width, height = dims
    if min(dims) < 1:
        raise ContainerFormatError(f"{path}: dimensions must be positive, got {dims}")
    expected = channels * width * height
    if values.size != expected:
        raise ContainerFormatError(
            f"{path}: expected {expected} values for C={channels} W={width} H={height}, "
            f"got {values.size}"
        )
    arr = values.reshape(channels, height, width).astype(np.float64) / 255.0
    return ImageTensor(arr)


def load_image(path: str | Path) -> ImageTensor:
    """Load a text or binary container file as an ImageTensor."""
    path = Path(path)
    raw = path.read_bytes()
    if _looks_like_text(raw):
        return _load_text(raw, path)
    return _load_binary(raw, path)


def _load_text(raw: bytes, path: Path) -> ImageTensor:
    try:
        tokens = raw.decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise ContainerFormatError(f"{path}: not ASCII text") from exc
    if len(tokens) < 3:
        raise ContainerFormatError(f"{path}: missing C W H header")
    try:
        numbers = [int(t) for t in tokens]
    except ValueError as exc:
        raise ContainerFormatError(f"{path}: non-integer token: {exc}") from exc
    dims = tuple(numbers[:3])
    values = np.array(numbers[3:], dtype=np.int64)
    if values.size and (values.min() < 0 or values.max() > 255):
        raise ContainerFormatError(f"{path}: values must lie in 0..255")
    return _from_bytes_payload(dims, values, path)


def _load_binary(raw: bytes, path: Path) -> ImageTensor:
    if len(raw) < _HEADER.size:
        raise ContainerFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    dims = _HEADER.unpack_from(raw)
    values = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size)
    return _from_bytes_payload(dims, values, path)


def save_image(image: ImageTensor, path: str | Path, format: str = "binary") -> None:
    """Write an image container; values are rounded to the 8-bit grid."""
    path = Path(path)
    bytes8 = quantize(image)
    if format == "binary":
        header = _HEADER.pack(image.channels, image.width, image.height)
        path.write_bytes(header + bytes8.tobytes())
    elif format == "text":
        lines = [f"{image.channels} {image.width} {image.height}"]
        for channel in bytes8:
            for row in channel:
                lines.append(" ".join(str(int(v)) for v in row))
        path.write_text("\n".join(lines) + "\n", encoding="ascii")
    else:
        raise ValueError(f"unknown container format {format!r}")

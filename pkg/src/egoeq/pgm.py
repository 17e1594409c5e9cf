"""Binary PGM (P5, 8-bit) reader and writer."""

from pathlib import Path

import numpy as np

from .errors import InputError


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise InputError(f"PGM frames must be 2-D uint8, got {pixels.dtype} {pixels.shape}")
    h, w = pixels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def decode_pgm(data: bytes, name="<bytes>") -> np.ndarray:
    """Parse a P5 image; comments (``#`` to end of line) are allowed in the header."""
    pos = 0
    fields = []
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise InputError(f"{name}: truncated PGM header at byte offset {pos}")
        fields.append((data[start:pos], start))
    magic, _ = fields[0]
    if magic != b"P5":
        raise InputError(f"{name}: bad magic {magic!r} at byte offset 0 (expected P5)")
    try:
        width, height, maxval = (int(f) for f, _ in fields[1:])
    except ValueError:
        bad = next(off for f, off in fields[1:] if not f.isdigit())
        raise InputError(f"{name}: non-numeric PGM header field at byte offset {bad}") from None
    if maxval != 255:
        raise InputError(f"{name}: maxval {maxval} at byte offset {fields[3][1]} (only 255 supported)")
    if width <= 0 or height <= 0:
        raise InputError(f"{name}: invalid size {width}x{height} at byte offset {fields[1][1]}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise InputError(f"{name}: missing whitespace after maxval at byte offset {pos}")
    pos += 1
    need = width * height
    if len(data) - pos < need:
        raise InputError(
            f"{name}: truncated pixel data at byte offset {len(data)}: "
            f"expected {need} bytes from offset {pos}, found {len(data) - pos}"
        )
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(height, width).copy()


def write_pgm(path, pixels):
    Path(path).write_bytes(encode_pgm(pixels))


def read_pgm(path):
    path = Path(path)
    return decode_pgm(path.read_bytes(), str(path))

"""Netpbm image I/O: 8-bit PPM images and 16-bit PGM gradient maps."""

from pathlib import Path

import numpy as np


def encode_ppm(img) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs an HxWx3 image, got {img.shape}")
    h, w, _ = img.shape
    data = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def _read_header(data: bytes, magic: bytes):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated netpbm header")
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"expected {magic!r} file, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    return w, h, maxval, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    w, h, maxval, pos = _read_header(data, b"P6")
    if maxval != 255:
        raise ValueError("only 8-bit PPM is supported")
    raw = np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8)
    if raw.size != w * h * 3:
        raise ValueError("truncated PPM pixel data")
    return (raw.reshape(h, w, 3).astype(np.float32) / 255.0)


def encode_pgm16(values):
    """Max-normalized 16-bit PGM; returns ``(bytes, normalization_factor)``.

    Pixel ``k`` decodes to ``k / 65535 * factor``.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"PGM needs an HxW array, got {v.shape}")
    h, w = v.shape
    factor = float(v.max()) if v.size else 0.0
    scaled = v / factor if factor > 0 else np.zeros_like(v)
    data = np.round(np.clip(scaled, 0, 1) * 65535).astype(">u2")
    return f"P5\n{w} {h}\n65535\n".encode("ascii") + data.tobytes(), factor


def decode_pgm16(data: bytes, factor: float = 1.0) -> np.ndarray:
    w, h, maxval, pos = _read_header(data, b"P5")
    if maxval != 65535:
        raise ValueError("only 16-bit PGM is supported")
    raw = np.frombuffer(data[pos:pos + 2 * w * h], dtype=">u2")
    return raw.reshape(h, w).astype(np.float64) / 65535 * factor


def write_ppm(path, img):
    Path(path).write_bytes(encode_ppm(img))


def read_ppm(path):
    return decode_ppm(Path(path).read_bytes())

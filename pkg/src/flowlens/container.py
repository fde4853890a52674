"""Binary container framing shared by all checkpoint and scene files.

Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON
header, then the concatenated little-endian float32 arrays listed in the
header's ``arrays`` entry (name and shape, in order).
"""

import json
import struct

import numpy as np

FORMAT_VERSION = 1


class ContainerError(ValueError):
    pass


def pack(magic: bytes, header: dict, arrays: dict) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    header = dict(header)
    header.setdefault("format_version", FORMAT_VERSION)
    header["arrays"] = [[name, list(np.shape(a))] for name, a in arrays.items()]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays.values())
    return magic + struct.pack("<I", len(blob)) + blob + body


def unpack(magic: bytes, data: bytes):
    """Inverse of :func:`pack`; returns ``(header, arrays)``."""
    if len(data) < 12:
        raise ContainerError("truncated file: missing header")
    if data[:8] != magic:
        raise ContainerError(f"bad magic {data[:8]!r}, expected {magic!r}")
    (hlen,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + hlen:
        raise ContainerError("truncated file: header cut short")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt header: {exc}") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported version {version!r} (reader supports {FORMAT_VERSION})")
    arrays = {}
    pos = 12 + hlen
    for name, shape in header.pop("arrays"):
        n = int(np.prod(shape)) if shape else 1
        end = pos + 4 * n
        if end > len(data):
            raise ContainerError(f"truncated file: array {name!r} incomplete")
        arrays[name] = np.frombuffer(data[pos:end], dtype="<f4").astype(np.float32).reshape(shape)
        pos = end
    if pos != len(data):
        raise ContainerError(f"{len(data) - pos} trailing bytes after arrays")
    return header, arrays

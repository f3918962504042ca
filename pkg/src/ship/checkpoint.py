"""Binary container shared by generator and head checkpoints.

Layout: u32 header length, UTF-8 JSON header, then one blob per parameter
in sorted name order: u32 name length, name bytes, u32 element count,
float32 little-endian data. Shapes are recorded in the header under
``"shapes"``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


class CheckpointError(ValueError):
    pass


def write_container(path, header: dict, blobs: dict[str, np.ndarray]) -> None:
    header = dict(header)
    header["shapes"] = {k: list(np.shape(v)) for k, v in sorted(blobs.items())}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [struct.pack("<I", len(head)), head]
    for name in sorted(blobs):
        arr = np.ascontiguousarray(blobs[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.size), arr.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def read_container(path, expect_format: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    try:
        (hlen,) = struct.unpack_from("<I", buf, 0)
        header = json.loads(buf[4 : 4 + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint header in {path}: {exc}") from None
    if expect_format is not None and header.get("format") != expect_format:
        raise CheckpointError(f"expected format {expect_format!r}, got {header.get('format')!r}")
    shapes = header.get("shapes", {})
    off = 4 + hlen
    blobs = {}
    while off < len(buf):
        try:
            (nlen,) = struct.unpack_from("<I", buf, off)
            name = buf[off + 4 : off + 4 + nlen].decode("utf-8")
            off += 4 + nlen
            (count,) = struct.unpack_from("<I", buf, off)
            off += 4
        except (struct.error, UnicodeDecodeError) as exc:
            raise CheckpointError(f"truncated checkpoint {path}: {exc}") from None
        if off + 4 * count > len(buf):
            raise CheckpointError(f"truncated checkpoint {path}: blob {name!r}")
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float32)
        off += 4 * count
        blobs[name] = arr.reshape(shapes.get(name, [count]))
    missing = set(shapes) - set(blobs)
    if missing:
        raise CheckpointError(f"checkpoint {path} is missing blobs: {sorted(missing)}")
    return header, blobs

"""Raw float64 images, 8-bit PGM export/import and dataset manifests.

Raw layout: magic ``GVD1``, height and width as little-endian u32, then
``h * w`` little-endian float64 values in row-major order.
"""

from __future__ import annotations

import shlex
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"GVD1"
_HEADER = struct.Struct("<4sII")
MAX_PIXELS = 1 << 28


def image_to_bytes(img) -> bytes:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {a.shape}")
    h, w = a.shape
    return _HEADER.pack(MAGIC, h, w) + np.ascontiguousarray(a, dtype="<f8").tobytes()


def image_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise FormatError("truncated header")
    magic, h, w = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if h == 0 or w == 0 or h * w > MAX_PIXELS:
        raise FormatError(f"dimension overflow: {h} x {w}")
    need = 8 * h * w
    payload = data[_HEADER.size:]
    if len(payload) < need:
        raise FormatError("truncated payload")
    if len(payload) > need:
        raise FormatError("trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(h, w)


def write_image(path, img) -> None:
    Path(path).write_bytes(image_to_bytes(img))


def read_image(path) -> np.ndarray:
    return image_from_bytes(Path(path).read_bytes())


def to_bytes8(img) -> np.ndarray:
    """``floor(255 v + 0.5)`` clamped to ``[0, 255]``."""
    a = np.asarray(img, dtype=np.float64)
    return np.clip(np.floor(a * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_pgm(path, img) -> None:
    b = to_bytes8(img)
    h, w = b.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + b.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
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
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"bad magic {tokens[0]!r}, expected b'P5'")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError("only 8-bit PGM is supported")
    body = data[pos + 1:]
    if len(body) < h * w:
        raise FormatError("truncated payload")
    return np.frombuffer(body[:h * w], dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def write_manifest(path, entries) -> None:
    """One ``observation cartoon texture`` line per triple, paths relative to the manifest."""
    lines = ["# observation cartoon texture"]
    lines += [" ".join(shlex.quote(str(p)) for p in triple) for triple in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest_paths(path):
    base = Path(path).parent
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = shlex.split(line)
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 paths, got {len(parts)}")
        out.append(tuple(base / p for p in parts))
    return out


def read_manifest(path):
    """List of ``(f, c, t)`` arrays; shapes within a triple must agree."""
    triples = []
    for paths in read_manifest_paths(path):
        arrays = tuple(read_image(p) for p in paths)
        if not (arrays[0].shape == arrays[1].shape == arrays[2].shape):
            raise FormatError(f"shape mismatch within triple {paths[0].name}")
        triples.append(arrays)
    return triples

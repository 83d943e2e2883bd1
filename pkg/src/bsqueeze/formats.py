"""PGM/PPM (binary netpbm), the BSQT tensor container and polygon JSON."""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Union

import numpy as np

PathLike = Union[str, os.PathLike]

BSQT_MAGIC = b"BSQT"
BSQT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int = 0, path=None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (at byte {offset})")
        self.offset = offset
        self.path = path


# --- netpbm -------------------------------------------------------------------

def _read_token(data: bytes, pos: int) -> tuple[bytes, int, int]:
    """Next header token after whitespace/comments: ``(token, start, end)``."""
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of header", start)
    return data[start:pos], start, pos


def _parse_netpbm(data: bytes, magic: bytes, channels: int, path=None) -> np.ndarray:
    if data[:2] != magic:
        raise FormatError(f"expected magic {magic.decode()!r}, got {data[:2]!r}", 0, path)
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        try:
            tok, start, pos = _read_token(data, pos)
        except FormatError as e:
            raise FormatError(f"missing {name}", e.offset, path) from None
        if not tok.isdigit():
            raise FormatError(f"bad {name} {tok!r}", start, path)
        fields.append(int(tok))
    width, height, maxval = fields
    if not 0 < maxval < 65536:
        raise FormatError(f"maxval {maxval} out of range", start, path)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after header", pos, path)
    pos += 1
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = width * height * channels * dtype.itemsize
    payload = data[pos:pos + need]
    if len(payload) != need:
        raise FormatError(f"payload truncated: need {need} bytes, have {len(payload)}", pos, path)
    arr = np.frombuffer(payload, dtype=dtype).astype(np.uint16 if maxval > 255 else np.uint8)
    shape = (height, width) if channels == 1 else (height, width, channels)
    return arr.reshape(shape)


def read_pgm(path: PathLike) -> np.ndarray:
    """Read a binary (P5) PGM as a ``(H, W)`` integer array."""
    return _parse_netpbm(Path(path).read_bytes(), b"P5", 1, path)


def write_pgm(path: PathLike, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM image must be 2-D")
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    if img.min(initial=0) < 0 or img.max(initial=0) > 255:
        raise ValueError("PGM values must lie in [0, 255]")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(img.astype(np.uint8).tobytes())


def read_mask_pgm(path: PathLike) -> np.ndarray:
    return read_pgm(path) != 0


def read_ppm(path: PathLike) -> np.ndarray:
    """Read a binary (P6) PPM as ``(H, W, 3)``."""
    return _parse_netpbm(Path(path).read_bytes(), b"P6", 3, path)


def write_ppm(path: PathLike, rgb: np.ndarray) -> None:
    img = np.asarray(rgb)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM image must be (H, W, 3)")
    if img.min(initial=0) < 0 or img.max(initial=0) > 255:
        raise ValueError("PPM values must lie in [0, 255]")
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(img.astype(np.uint8).tobytes())


# --- BSQT -----------------------------------------------------------------------

def encode_bsqt(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise ValueError(f"BSQT stores float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("too many dimensions")
    header = BSQT_MAGIC + struct.pack("<BBB", BSQT_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_bsqt(data: bytes, path=None) -> np.ndarray:
    if data[:4] != BSQT_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}", 0, path)
    if len(data) < 7:
        raise FormatError("truncated header", len(data), path)
    version, code, ndim = struct.unpack_from("<BBB", data, 4)
    if version != BSQT_VERSION:
        raise FormatError(f"unsupported version {version}", 4, path)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", 5, path)
    pos = 7
    if len(data) < pos + 4 * ndim:
        raise FormatError("truncated dims", len(data), path)
    dims = struct.unpack_from(f"<{ndim}I", data, pos)
    pos += 4 * ndim
    dtype = _DTYPES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) - pos != need:
        raise FormatError(f"payload size {len(data) - pos} != expected {need}", pos, path)
    return np.frombuffer(data, dtype=dtype, offset=pos).reshape(dims).astype(dtype.newbyteorder("="))


def write_bsqt(path: PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_bsqt(array))


def read_bsqt(path: PathLike) -> np.ndarray:
    return decode_bsqt(Path(path).read_bytes(), path)


# --- polygon JSON ---------------------------------------------------------------

def read_polygon_json(path: PathLike) -> dict:
    """Load and validate ``{"height", "width", "objects": [{"category", "polygon"}]}``."""
    raw = Path(path).read_bytes()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON: {e.msg}", e.pos, path) from None
    return validate_polygon_doc(doc, path)


def validate_polygon_doc(doc, path=None) -> dict:
    if not isinstance(doc, dict):
        raise FormatError("top level must be an object", 0, path)
    for key in ("height", "width", "objects"):
        if key not in doc:
            raise FormatError(f"missing key {key!r}", 0, path)
    h, w = doc["height"], doc["width"]
    if not (isinstance(h, int) and isinstance(w, int) and h > 0 and w > 0):
        raise FormatError("height and width must be positive integers", 0, path)
    if not isinstance(doc["objects"], list):
        raise FormatError("objects must be a list", 0, path)
    for i, obj in enumerate(doc["objects"]):
        poly = obj.get("polygon") if isinstance(obj, dict) else None
        if not isinstance(poly, list) or len(poly) < 3:
            raise FormatError(f"object {i}: polygon needs >= 3 vertices", 0, path)
        for v in poly:
            if not (isinstance(v, (list, tuple)) and len(v) == 2
                    and all(isinstance(t, (int, float)) for t in v)):
                raise FormatError(f"object {i}: vertices must be [x, y] pairs", 0, path)
        if not isinstance(obj.get("category", ""), str):
            raise FormatError(f"object {i}: category must be a string", 0, path)
    return doc


def write_polygon_json(path: PathLike, height: int, width: int, objects: list) -> None:
    doc = {"height": height, "width": width, "objects": objects}
    validate_polygon_doc(doc)
    Path(path).write_text(json.dumps(doc, indent=1))

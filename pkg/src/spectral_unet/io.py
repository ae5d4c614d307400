"""On-disk formats: STNT tensors, binary PGM/PPM images, checkpoint containers.

STNT layout::

    b"STNT" | uint32 LE header length | UTF-8 JSON {"dtype": "f32"|"f64", "shape": [...]} | raw LE data

A checkpoint is one file with the magic ``STNC``, the same length-prefixed
JSON header (a manifest of named tensors with byte offsets), then the
concatenated little-endian payloads.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

STNT_MAGIC = b"STNT"
CKPT_MAGIC = b"STNC"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_CODES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}


class FormatError(ValueError):
    """A file does not follow the expected on-disk layout."""


def _dtype_code(arr: np.ndarray) -> str:
    try:
        return _CODES[arr.dtype.newbyteorder("=")]
    except KeyError:
        raise FormatError(f"unsupported dtype {arr.dtype}; use float32 or float64") from None


def _write_header(fh, magic: bytes, header: dict) -> None:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    fh.write(magic)
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)


def _read_header(buf: bytes, magic: bytes, path) -> tuple[dict, int]:
    if len(buf) < 8 or buf[:4] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic!r}")
    (length,) = struct.unpack("<I", buf[4:8])
    if 8 + length > len(buf):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(buf[8 : 8 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    return header, 8 + length


def save_stnt(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _dtype_code(arr)
    with open(path, "wb") as fh:
        _write_header(fh, STNT_MAGIC, {"dtype": code, "shape": list(arr.shape)})
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def load_stnt(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    header, start = _read_header(buf, STNT_MAGIC, path)
    if header.get("dtype") not in _DTYPES or not isinstance(header.get("shape"), list):
        raise FormatError(f"{path}: header needs dtype in {sorted(_DTYPES)} and a shape list")
    dtype = _DTYPES[header["dtype"]]
    shape = tuple(int(s) for s in header["shape"])
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - start != count * dtype.itemsize:
        raise FormatError(f"{path}: payload has {len(buf) - start} bytes, expected {count * dtype.itemsize}")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=start).reshape(shape).astype(dtype.newbyteorder("="))


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------

def _pnm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # one whitespace byte separates header and raster


def read_pnm(path) -> np.ndarray:
    """Read binary P5/P6 into float64 in [0, 1], shape (C, H, W)."""
    buf = Path(path).read_bytes()
    if buf[:2] not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary PGM/PPM (P5/P6)")
    channels = 1 if buf[:2] == b"P5" else 3
    (w, h, maxval), start = _pnm_tokens(buf[2:], 3)
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * channels
    raster = np.frombuffer(buf, dtype=dtype, count=n, offset=2 + start)
    img = raster.reshape(h, w, channels).transpose(2, 0, 1).astype(np.float64)
    return img / maxval


def write_pnm(path, img: np.ndarray, maxval: int = 255) -> None:
    """Write (H, W), (1, H, W) or (3, H, W) data in [0, 1] as P5/P6."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise FormatError(f"image must be (H, W), (1, H, W) or (3, H, W), got {img.shape}")
    c, h, w = img.shape
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    raster = np.rint(np.clip(img, 0.0, 1.0) * maxval).astype(dtype).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(b"P5\n" if c == 1 else b"P6\n")
        fh.write(f"{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(raster.tobytes())


def read_image(path) -> np.ndarray:
    """PGM/PPM or STNT, returned as (C, H, W) float64."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == STNT_MAGIC:
        arr = load_stnt(path).astype(np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise FormatError(f"{path}: STNT image must be 2-D or 3-D, got shape {arr.shape}")
        return arr
    return read_pnm(path)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None,
                    kinds: dict[str, str] | None = None) -> None:
    """Write named tensors; ``kinds`` tags each as e.g. "param" or "buffer"."""
    entries, offset, blobs = [], 0, []
    for name in tensors:
        arr = np.asarray(tensors[name])
        code = _dtype_code(arr)
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entry = {"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        if kinds is not None:
            entry["kind"] = kinds.get(name, "param")
        entries.append(entry)
        blobs.append(blob)
        offset += len(blob)
    with open(path, "wb") as fh:
        _write_header(fh, CKPT_MAGIC, {"meta": meta or {}, "tensors": entries})
        for blob in blobs:
            fh.write(blob)


def read_checkpoint_manifest(path) -> dict:
    buf = Path(path).read_bytes()
    header, _ = _read_header(buf, CKPT_MAGIC, path)
    return header


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    header, start = _read_header(buf, CKPT_MAGIC, path)
    out = {}
    for e in header.get("tensors", []):
        dtype = _DTYPES[e["dtype"]]
        count = int(np.prod(e["shape"], dtype=np.int64))
        if start + e["offset"] + e["nbytes"] > len(buf) or count * dtype.itemsize != e["nbytes"]:
            raise FormatError(f"{path}: tensor {e['name']!r} overruns the payload")
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=start + e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(dtype.newbyteorder("="))
    return out, header.get("meta", {})

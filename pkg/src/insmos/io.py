"""Binary and image file formats shared across the package.

TNS0 tensor container (all little-endian)::

    b"TNS0" | u8 dtype code | u8 rank | u64 dim * rank | raw payload

CKPT checkpoint::

    b"CKPT" | u32 count | (u16 name_len | name utf-8 | TNS0 blob) * count

Middlebury ``.flo``: b"PIEH" | i32 W | i32 H | interleaved f32 (u, v) rows.
"""

from __future__ import annotations

import io as _io
import struct
from pathlib import Path

import numpy as np

TNS_MAGIC = b"TNS0"
CKPT_MAGIC = b"CKPT"
FLO_MAGIC = b"PIEH"

DTYPE_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i4"),
    4: np.dtype("<i8"),
    5: np.dtype("u1"),
    6: np.dtype("i1"),
    7: np.dtype("<u2"),
}
_CODE_OF = {dt: code for code, dt in DTYPE_CODES.items()}


class FormatError(ValueError):
    """Raised for malformed or truncated binary files."""


def _read_exact(stream, n, what):
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}")
    return buf


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    code = _CODE_OF.get(arr.dtype.newbyteorder("<"))
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    out = bytearray(TNS_MAGIC)
    out += struct.pack("<BB", code, arr.ndim)
    out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    out += np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()
    return bytes(out)


def decode_tensor(stream) -> np.ndarray:
    if isinstance(stream, (bytes, bytearray)):
        stream = _io.BytesIO(stream)
    if _read_exact(stream, 4, "magic") != TNS_MAGIC:
        raise FormatError("bad magic")
    code, rank = struct.unpack("<BB", _read_exact(stream, 2, "header"))
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank, "dims"))
    dt = DTYPE_CODES[code]
    count = int(np.prod(dims)) if rank else 1
    payload = _read_exact(stream, count * dt.itemsize, "payload")
    return np.frombuffer(payload, dtype=dt).reshape(dims).copy()


def save_tensor(path, arr):
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh)


def save_checkpoint(path, params: dict):
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<I", len(params))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += encode_tensor(arr)
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CKPT_MAGIC:
            raise FormatError("bad magic")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "count"))
        params = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, n, "name").decode("utf-8")
            params[name] = decode_tensor(fh)
        return params


# ---------------------------------------------------------------- images


def write_pgm(path, img):
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def _pnm_header(data, magic):
    if not data.startswith(magic):
        raise FormatError(f"expected {magic.decode()} image")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while data[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    return fields, pos + 1


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (w, h, maxval), pos = _pnm_header(data, b"P5")
    if maxval > 255:
        raise FormatError("only 8-bit PGM is supported")
    body = data[pos : pos + w * h]
    if len(body) != w * h:
        raise FormatError("truncated PGM payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def write_ppm(path, rgb):
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("PPM images are H×W×3")
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (w, h, _), pos = _pnm_header(data, b"P6")
    body = data[pos : pos + 3 * w * h]
    if len(body) != 3 * w * h:
        raise FormatError("truncated PPM payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


# ------------------------------------------------------------------ flow


def write_flo(path, flow):
    """Write a 2×H×W flow field as Middlebury .flo."""
    flow = np.asarray(flow, dtype=np.float32)
    _, h, w = flow.shape
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<ii", w, h))
        fh.write(np.ascontiguousarray(flow.transpose(1, 2, 0), dtype="<f4").tobytes())


def read_flo(path) -> np.ndarray:
    """Read Middlebury .flo into a 2×H×W float32 array."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != FLO_MAGIC:
            raise FormatError("bad magic")
        w, h = struct.unpack("<ii", _read_exact(fh, 8, "size"))
        body = _read_exact(fh, 8 * w * h, "flow payload")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, 2).transpose(2, 0, 1).astype(np.float32)

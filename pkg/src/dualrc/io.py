"""File formats: the DRCT tensor container, PGM/PPM images and the text formats
for matches, annotations, homographies and MMA curves."""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"DRCT"
VERSION = 1


# ---------------------------------------------------------------------------
# tensor container


def encode_container(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_container(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("truncated tensor container")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError("bad magic bytes; not a DRCT container")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("entry name is not UTF-8") from exc
        (ndim,) = struct.unpack("<I", take(4))
        if ndim > 16:
            raise FormatError(f"implausible ndim {ndim} for entry {name!r}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        if name in out:
            raise FormatError(f"duplicate entry {name!r}")
        out[name] = arr
    if pos != len(buf):
        raise FormatError("trailing bytes after last entry")
    return out


def save_container(path, entries: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_container(entries))


def load_container(path) -> "OrderedDict[str, np.ndarray]":
    return decode_container(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# images


def _pnm_header(buf: bytes):
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_image(path) -> np.ndarray:
    """Read binary PGM (P5) or PPM (P6) as a float [1,H,W] array in [0,1].

    Colour input is reduced to grey with 0.299/0.587/0.114 weights.
    """
    buf = Path(path).read_bytes()
    tokens, pos = _pnm_header(buf)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported image type {magic!r}; need P5 or P6")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("malformed PNM header") from exc
    if maxval != 255:
        raise FormatError("only 8-bit PNM images are supported")
    ch = 1 if magic == b"P5" else 3
    n = w * h * ch
    payload = buf[pos:pos + n]
    if len(payload) != n:
        raise FormatError("truncated PNM payload")
    px = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    if ch == 1:
        return px.reshape(1, h, w)
    rgb = px.reshape(h, w, 3)
    grey = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return grey.reshape(1, h, w)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """Write a [1,H,W] or [H,W] float image in [0,1] as binary PGM."""
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[0]
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + to_uint8(arr).tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an [H,W,3] uint8 array as binary PPM."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


def read_ppm_rgb(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = _pnm_header(buf)
    if tokens[0] != b"P6":
        raise FormatError("not a P6 image")
    w, h = int(tokens[1]), int(tokens[2])
    payload = buf[pos:pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise FormatError("truncated PPM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)


# ---------------------------------------------------------------------------
# text formats


def _data_lines(path):
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        yield lineno, line


def _floats(path, width):
    rows = []
    for lineno, line in _data_lines(path):
        fields = line.split()
        if len(fields) != width:
            raise FormatError(f"{path}:{lineno}: expected {width} fields, got {len(fields)}")
        try:
            rows.append([float(f) for f in fields])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return np.array(rows, dtype=np.float64).reshape(-1, width)


def write_matches(path, src, dst, scores, header: str | None = None) -> None:
    lines = []
    if header:
        lines.extend("# " + h for h in header.splitlines())
    for (xa, ya), (xb, yb), s in zip(src, dst, scores):
        lines.append(f"{xa:.6g} {ya:.6g} {xb:.6g} {yb:.6g} {s:.6g}")
    Path(path).write_text("".join(l + "\n" for l in lines), encoding="utf-8")


def read_matches(path):
    """Return (src [N,2], dst [N,2], scores [N])."""
    rows = _floats(path, 5)
    return rows[:, 0:2], rows[:, 2:4], rows[:, 4]


def write_annotations(path, src, dst) -> None:
    lines = [f"{xa:.6g} {ya:.6g} {xb:.6g} {yb:.6g}\n" for (xa, ya), (xb, yb) in zip(src, dst)]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_annotations(path):
    rows = _floats(path, 4)
    return rows[:, 0:2], rows[:, 2:4]


def read_homography(path) -> np.ndarray:
    vals = Path(path).read_text(encoding="utf-8").split()
    if len(vals) != 9:
        raise FormatError(f"{path}: homography needs 9 numbers, got {len(vals)}")
    try:
        return np.array([float(v) for v in vals]).reshape(3, 3)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_homography(path, h: np.ndarray) -> None:
    rows = [" ".join(f"{v:.17g}" for v in row) for row in np.asarray(h)]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def write_curve(path, thresholds, values) -> None:
    lines = ["threshold,mma"] + [f"{t:.6g},{v:.6g}" for t, v in zip(thresholds, values)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_curve(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "threshold,mma":
        raise FormatError(f"{path}: missing 'threshold,mma' header")
    t, v = [], []
    for line in lines[1:]:
        if not line.strip():
            continue
        try:
            a, b = line.split(",")
            t.append(float(a))
            v.append(float(b))
        except ValueError as exc:
            raise FormatError(f"{path}: bad curve row {line!r}") from exc
    return t, v

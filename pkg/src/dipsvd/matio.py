"""Matrix file formats.

Binary "DSVD" layout: 4-byte magic ``DSVD``, little-endian uint32 rows,
uint32 cols, then rows*cols little-endian float64 values in row-major order.
CSV files are header-free comma-separated decimals, one matrix row per line.

All writers go through a temp-file-then-rename so a crash never leaves a
half-written artifact behind.
"""
from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import FormatError
from .linalg import as_matrix

MAGIC = b"DSVD"
_HEADER = struct.Struct("<4sII")

__all__ = [
    "save_dsvd",
    "load_dsvd",
    "save_csv",
    "load_csv",
    "save_matrix_file",
    "load_matrix_file",
    "atomic_write_bytes",
    "atomic_write_text",
]


def atomic_write_bytes(path, payload):
    """Write ``payload`` to ``path`` via temp-then-rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def save_dsvd(a, path):
    """Persist a matrix in the binary DSVD format (bit-exact round trip)."""
    arr = as_matrix(a)
    rows, cols = arr.shape
    header = _HEADER.pack(MAGIC, rows, cols)
    atomic_write_bytes(path, header + arr.astype("<f8", copy=False).tobytes())


def load_dsvd(path):
    """Load a DSVD file, reporting the byte offset of any malformation."""
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_dsvd(data)


def parse_dsvd(data):
    if len(data) == 0:
        raise FormatError("empty file", byte_offset=0)
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("bad magic, expected b'DSVD'", byte_offset=0)
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", byte_offset=len(data))
    _, rows, cols = _HEADER.unpack_from(data)
    if rows == 0 or cols == 0:
        raise FormatError(f"degenerate dimensions {rows}x{cols}", byte_offset=4)
    expected = _HEADER.size + rows * cols * 8
    if len(data) < expected:
        raise FormatError(
            f"truncated payload, expected {expected} bytes for {rows}x{cols}",
            byte_offset=len(data),
        )
    if len(data) > expected:
        raise FormatError("trailing bytes after payload", byte_offset=expected)
    flat = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    arr = flat.reshape(rows, cols).astype(np.float64)
    bad = ~np.isfinite(arr)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise FormatError(
            f"non-finite value at ({i},{j})",
            byte_offset=_HEADER.size + (int(i) * cols + int(j)) * 8,
        )
    return arr


def save_csv(a, path):
    """Persist a matrix as header-free CSV using shortest-round-trip decimals."""
    arr = as_matrix(a)
    lines = [",".join(repr(float(v)) for v in row) for row in arr]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return parse_csv(text)


def parse_csv(text):
    lines = [ln for ln in text.splitlines() if ln.strip() != ""]
    if not lines:
        raise FormatError("empty file", row=0)
    rows = []
    width = None
    for i, line in enumerate(lines):
        cells = line.split(",")
        if width is None:
            width = len(cells)
        elif len(cells) != width:
            raise FormatError(
                f"ragged row: expected {width} values, found {len(cells)}", row=i
            )
        try:
            rows.append([float(c) for c in cells])
        except ValueError:
            raise FormatError("unparseable decimal", row=i) from None
    return as_matrix(np.array(rows, dtype=np.float64), name=f"CSV matrix")


def save_matrix_file(a, path):
    """Dispatch on extension: ``.csv`` writes CSV, anything else DSVD."""
    if str(path).lower().endswith(".csv"):
        save_csv(a, path)
    else:
        save_dsvd(a, path)


def load_matrix_file(path):
    """Sniff the format: DSVD magic wins, otherwise parse as CSV."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) == 0:
        raise FormatError("empty file", byte_offset=0)
    if data[:4] == MAGIC:
        return parse_dsvd(data)
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(
            "neither DSVD magic nor decodable CSV text", byte_offset=0
        ) from exc
    return parse_csv(text)

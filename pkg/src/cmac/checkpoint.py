"""Parameter checkpoint and raw tensor record IO.

Checkpoint layout: a `CMAC-CKPT v1` header line, then one record per tensor.
A record is three parts: the tensor name (UTF-8 text line), the rank followed
by the extents (ASCII integers on one line), and the raw values as
little-endian 64-bit floats. Round trips are bit-exact. Dataset tensor files
reuse the bare record format without the header.
"""
from __future__ import annotations

import io

import numpy as np

from .errors import FormatError

HEADER = b"CMAC-CKPT v1\n"


def write_record(f, name: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype="<f8")
    f.write(name.encode("utf-8") + b"\n")
    dims = " ".join([str(data.ndim)] + [str(e) for e in data.shape])
    f.write(dims.encode("ascii") + b"\n")
    f.write(data.tobytes())


def _read_line(f, what: str) -> bytes:
    at = f.tell()
    line = f.readline()
    if not line.endswith(b"\n"):
        raise FormatError(f"truncated {what} line", offset=at)
    return line[:-1]


def read_record(f) -> tuple[str, np.ndarray] | None:
    """Read one record, or None at a clean end of file."""
    at = f.tell()
    name_line = f.readline()
    if name_line == b"":
        return None
    if not name_line.endswith(b"\n"):
        raise FormatError("truncated tensor name line", offset=at)
    try:
        name = name_line[:-1].decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("tensor name is not valid UTF-8", offset=at) from None
    at = f.tell()
    dims_line = _read_line(f, "tensor extents")
    try:
        fields = [int(tok) for tok in dims_line.split()]
    except ValueError:
        raise FormatError(f"unparsable extents line for tensor {name!r}",
                          offset=at) from None
    if not fields or fields[0] != len(fields) - 1 or any(e <= 0 for e in fields[1:]):
        raise FormatError(f"bad rank/extents {fields} for tensor {name!r}", offset=at)
    shape = tuple(fields[1:])
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    at = f.tell()
    raw = f.read(count * 8)
    if len(raw) != count * 8:
        raise FormatError(
            f"tensor {name!r} data truncated: wanted {count * 8} bytes, got {len(raw)}",
            offset=at)
    arr = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return name, arr


def save_tensor_file(path, name: str, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_record(f, name, arr)


def load_tensor_file(path) -> tuple[str, np.ndarray]:
    with open(path, "rb") as f:
        rec = read_record(f)
        if rec is None:
            raise FormatError(f"{path}: empty tensor file", offset=0)
        trailing = f.read(1)
        if trailing:
            raise FormatError(f"{path}: trailing bytes after tensor record",
                              offset=f.tell() - 1)
        return rec


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(HEADER)
        for name, arr in params.items():
            write_record(f, name, arr)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        head = f.read(len(HEADER))
        if head != HEADER:
            raise FormatError(f"{path}: bad checkpoint header {head!r}", offset=0)
        params: dict[str, np.ndarray] = {}
        while True:
            rec = read_record(f)
            if rec is None:
                return params
            name, arr = rec
            if name in params:
                raise FormatError(f"{path}: duplicate tensor {name!r}")
            params[name] = arr


def checkpoint_bytes(params: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(HEADER)
    for name, arr in params.items():
        write_record(buf, name, arr)
    return buf.getvalue()

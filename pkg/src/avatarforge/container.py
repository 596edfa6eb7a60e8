"""Binary array container ("AVF1").

Layout: the 5 bytes ``AVF1\\n``, then UTF-8 ``key=value`` lines (one per
array, insertion order), a blank line, then the raw array payloads
back-to-back, always little-endian. The format round-trips bit-exactly and
is trivial to parse from any language.
"""

from __future__ import annotations

import numpy as np

from .errors import IoError, ParseError

MAGIC = b"AVF1\n"

_DTYPES = {
    "float64": "<f8",
    "float32": "<f4",
    "int64": "<i8",
    "int32": "<i4",
    "uint64": "<u8",
    "uint8": "|u1",
    "bool": "|b1",
}
_DTYPE_NAMES = {np.dtype(v): k for k, v in _DTYPES.items()}


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays to ``path``. Order and bits are preserved."""
    header_lines = []
    payloads = []
    for name, arr in arrays.items():
        if "=" in name or ";" in name or "\n" in name:
            raise ValueError(f"illegal array name {name!r}")
        arr = np.asarray(arr)
        dtype_name = _DTYPE_NAMES.get(arr.dtype.newbyteorder("="))
        if dtype_name is None:
            raise ValueError(f"unsupported dtype {arr.dtype} for array {name!r}")
        wire = np.ascontiguousarray(arr, dtype=_DTYPES[dtype_name])
        shape = ",".join(str(d) for d in wire.shape)
        header_lines.append(f"{name}=dtype:{dtype_name};shape:{shape}\n")
        payloads.append(wire.tobytes())
    blob = MAGIC + "".join(header_lines).encode("utf-8") + b"\n" + b"".join(payloads)
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_arrays(path) -> dict[str, np.ndarray]:
    """Read a container written by :func:`save_arrays`.

    Arrays come back in native byte order with writeable=False.
    """
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not blob.startswith(MAGIC):
        raise ParseError(f"{path}: bad magic (expected AVF1)")
    header_end = blob.find(b"\n\n", len(MAGIC) - 1)
    if header_end < 0:
        raise ParseError(f"{path}: unterminated header")
    header = blob[len(MAGIC) : header_end + 1].decode("utf-8")
    offset = header_end + 2

    arrays: dict[str, np.ndarray] = {}
    for line in header.splitlines():
        if not line:
            continue
        name, _, meta = line.partition("=")
        if not meta:
            raise ParseError(f"{path}: malformed header line {line!r}")
        fields = dict(item.split(":", 1) for item in meta.split(";") if item)
        if "dtype" not in fields or "shape" not in fields:
            raise ParseError(f"{path}: header line missing dtype/shape: {line!r}")
        if fields["dtype"] not in _DTYPES:
            raise ParseError(f"{path}: unknown dtype {fields['dtype']!r}")
        dtype = np.dtype(_DTYPES[fields["dtype"]])
        shape = tuple(int(d) for d in fields["shape"].split(",")) if fields["shape"] else ()
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(blob):
            raise ParseError(f"{path}: truncated payload for array {name!r}")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape)
        arr = arr.astype(dtype.newbyteorder("="), copy=True)
        arr.flags.writeable = False
        arrays[name] = arr
        offset += nbytes
    if offset != len(blob):
        raise ParseError(f"{path}: {len(blob) - offset} trailing bytes after arrays")
    return arrays

"""PWV1 volume file format.

Layout, in order:

1. 8-byte magic ``PWVOL1\\n\\0``;
2. one UTF-8 JSON header line terminated by ``\\n`` with exactly the keys
   ``dims`` ([c, h, w, d]), ``dtype`` ("f32" or "u8"), ``spacing``
   ([sh, sw, sd] in mm);
3. the raw payload, little-endian, (c, h, w, d) order with d fastest.

``f32`` payloads round-trip bit-exactly. ``u8`` payloads carry label maps
and always have c == 1. Every malformed input raises FormatError naming the
offending field.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import FormatError
from .volume import LabelMap, Volume

MAGIC = b"PWVOL1\n\x00"

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _header_bytes(dims, dtype: str, spacing) -> bytes:
    head = {
        "dims": [int(d) for d in dims],
        "dtype": dtype,
        "spacing": [float(s) for s in spacing],
    }
    return json.dumps(head, separators=(",", ":")).encode("utf-8") + b"\n"


def write_volume(x: Volume | LabelMap, path: str) -> None:
    """Serialize a Volume (f32) or LabelMap (u8, c=1) to a PWV1 file."""
    if isinstance(x, Volume):
        dims = (x.c,) + x.dims
        payload = np.ascontiguousarray(x.data, dtype="<f4").tobytes()
        dtype = "f32"
        spacing = x.spacing
    elif isinstance(x, LabelMap):
        if x.labels.max(initial=0) > 255:
            raise FormatError(
                f"field dims/payload: label {int(x.labels.max())} exceeds u8 range"
            )
        dims = (1,) + x.dims
        payload = np.ascontiguousarray(x.labels, dtype="u1").tobytes()
        dtype = "u8"
        spacing = x.spacing
    else:
        raise TypeError(f"expected Volume or LabelMap, got {type(x).__name__}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_header_bytes(dims, dtype, spacing))
        fh.write(payload)


def _parse_header(line: bytes) -> tuple[tuple[int, int, int, int], str, tuple]:
    try:
        head = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"field header: not a UTF-8 JSON line ({e})") from e
    if not isinstance(head, dict):
        raise FormatError("field header: expected a JSON object")
    extra = sorted(set(head) - {"dims", "dtype", "spacing"})
    if extra:
        raise FormatError(f"field header: unknown key {extra[0]!r}")
    for key in ("dims", "dtype", "spacing"):
        if key not in head:
            raise FormatError(f"field {key}: missing from header")

    dims = head["dims"]
    if (
        not isinstance(dims, list)
        or len(dims) != 4
        or not all(isinstance(d, int) and not isinstance(d, bool) for d in dims)
    ):
        raise FormatError(f"field dims: expected 4 integers, got {dims!r}")
    if min(dims) < 1:
        raise FormatError(f"field dims: all entries must be >= 1, got {dims}")

    dtype = head["dtype"]
    if dtype not in _DTYPES:
        raise FormatError(f"field dtype: expected 'f32' or 'u8', got {dtype!r}")
    if dtype == "u8" and dims[0] != 1:
        raise FormatError(f"field dims: u8 payloads require c == 1, got c={dims[0]}")

    spacing = head["spacing"]
    if (
        not isinstance(spacing, list)
        or len(spacing) != 3
        or not all(isinstance(s, (int, float)) and not isinstance(s, bool) for s in spacing)
    ):
        raise FormatError(f"field spacing: expected 3 numbers, got {spacing!r}")
    spacing = tuple(float(s) for s in spacing)
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise FormatError(f"field spacing: entries must be positive finite, got {spacing}")

    return tuple(dims), dtype, spacing


def read_volume(path: str) -> Volume | LabelMap:
    """Parse a PWV1 file; f32 yields a Volume, u8 yields a LabelMap."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise FormatError(
            f"field magic: expected {MAGIC!r}, got {blob[: len(MAGIC)]!r}"
        )
    nl = blob.find(b"\n", len(MAGIC))
    if nl < 0:
        raise FormatError("field header: no terminating newline")
    dims, dtype, spacing = _parse_header(blob[len(MAGIC) : nl])

    payload = blob[nl + 1 :]
    want = int(np.prod(dims)) * _DTYPES[dtype].itemsize
    if len(payload) != want:
        kind = "truncated" if len(payload) < want else "oversized"
        raise FormatError(
            f"field payload: {kind}, expected {want} bytes for dims {list(dims)}, "
            f"got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(dims)
    if dtype == "u8":
        return LabelMap(arr[0].astype(np.int64), spacing)
    return Volume(arr.astype(np.float64), spacing)

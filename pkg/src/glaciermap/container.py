"""Binary tensor container used for patches, masks, and model checkpoints.

Layout (bit-exact): magic ``GLPX`` (4 bytes) | header length as u32
little-endian | UTF-8 JSON header | raw little-endian row-major payload.
The JSON header carries dtype/shape/channel metadata; the payload is the
tensor bytes (or, for checkpoints, several tensors concatenated in the
order listed in the header).
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"GLPX"

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1"), "f64": np.dtype("<f8")}


def encode(header: dict, payload: bytes) -> bytes:
    head = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + payload


def decode(blob: bytes) -> tuple[dict, bytes]:
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(blob) < 8:
        raise FormatError("file shorter than fixed 8-byte prefix", offset=len(blob))
    (head_len,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + head_len:
        raise FormatError(
            f"truncated header: declared {head_len} bytes, only {len(blob) - 8} present",
            offset=8,
        )
    try:
        header = json.loads(blob[8 : 8 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid UTF-8 JSON: {exc}", offset=8) from exc
    return header, blob[8 + head_len :]


def write_file(path, header: dict, payload: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(encode(header, payload))
    os.replace(tmp, path)


def read_file(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        return decode(fh.read())


def array_payload(arr: np.ndarray) -> bytes:
    """Serialize an array as little-endian row-major bytes."""
    kind = {"f": f"<f{arr.dtype.itemsize}", "u": "u1"}[arr.dtype.kind]
    return np.ascontiguousarray(arr, dtype=kind).tobytes()


def check_payload_size(header: dict, payload: bytes, path="<memory>") -> np.dtype:
    dtype = _DTYPES.get(header.get("dtype"))
    if dtype is None:
        raise FormatError(f"{path}: unknown dtype {header.get('dtype')!r}", offset=8)
    shape = header.get("shape")
    if not isinstance(shape, list) or not all(isinstance(s, int) and s > 0 for s in shape):
        raise FormatError(f"{path}: bad shape {shape!r}", offset=8)
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    return dtype


def decode_array(header: dict, payload: bytes, path="<memory>") -> np.ndarray:
    dtype = check_payload_size(header, payload, path)
    return np.frombuffer(payload, dtype=dtype).reshape(header["shape"]).copy()

"""ISDT: a minimal little-endian tensor file format.

Layout::

    "ISDT" | version:u8 (=1) | dtype:u8 | ndim:u8 | dims:u64[ndim] | payload

``dtype`` is 0 for float32, 1 for float64; the payload is row-major.  A
checkpoint container appends a named-tensor index directly after the payload::

    "ISDI" | meta_len:u32 | meta (UTF-8 JSON) | count:u32 |
        count × ( name_len:u16 | name | dtype:u8 | ndim:u8 | dims:u64[ndim] | payload )

Run ``python -m isdmae.isdt FILE...`` to validate files standalone.
"""
from __future__ import annotations

import json
import os
import struct
import sys
import tempfile
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"ISDT"
INDEX_MAGIC = b"ISDI"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
MAX_BYTES = 1 << 40


def atomic_write(path, payload: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}; ISDT stores float32/float64")
    head = struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def encode(arr: np.ndarray, named: Mapping[str, np.ndarray] | None = None, meta: dict | None = None) -> bytes:
    out = bytearray(MAGIC + struct.pack("<B", VERSION) + _encode_array(arr))
    if named is not None or meta is not None:
        meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
        named = named or {}
        out += INDEX_MAGIC + struct.pack("<I", len(meta_bytes)) + meta_bytes
        out += struct.pack("<I", len(named))
        for name, a in named.items():
            nb = name.encode()
            out += struct.pack("<H", len(nb)) + nb + _encode_array(a)
    return bytes(out)


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.raw):
            raise FormatError(f"{self.source}: truncated file (need {n} bytes at offset {self.pos})")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self) -> np.ndarray:
        code, ndim = self.unpack("<BB")
        if code not in DTYPES:
            raise FormatError(f"{self.source}: unknown dtype code {code}")
        dims = self.unpack(f"<{ndim}Q") if ndim else ()
        count = 1
        for d in dims:
            count *= d
        nbytes = count * DTYPES[code].itemsize
        if nbytes > MAX_BYTES:
            raise FormatError(f"{self.source}: dims {dims} overflow the size limit")
        data = np.frombuffer(self.take(nbytes), dtype=DTYPES[code]).reshape(dims)
        return data.astype(data.dtype.newbyteorder("="))


def decode(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, dict | None, dict[str, np.ndarray] | None]:
    r = _Reader(raw, source)
    if r.take(4) != MAGIC:
        raise FormatError(f"{source}: bad magic")
    (version,) = r.unpack("<B")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    primary = r.array()
    if r.pos == len(raw):
        return primary, None, None
    if r.take(4) != INDEX_MAGIC:
        raise FormatError(f"{source}: trailing bytes after payload")
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: corrupt metadata") from exc
    (count,) = r.unpack("<I")
    named = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode()
        except UnicodeDecodeError as exc:
            raise FormatError(f"{source}: corrupt tensor name") from exc
        named[name] = r.array()
    if r.pos != len(raw):
        raise FormatError(f"{source}: trailing bytes after index")
    return primary, meta, named


def write_isdt(path, arr: np.ndarray) -> None:
    atomic_write(path, encode(arr))


def read_isdt(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    return decode(raw, os.fspath(path))[0]


def write_container(path, named: Mapping[str, np.ndarray], meta: dict) -> None:
    atomic_write(path, encode(np.zeros((), dtype=np.float64), named, meta))


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    _, meta, named = decode(raw, os.fspath(path))
    if meta is None:
        raise FormatError(f"{path}: plain tensor file, not a container")
    return meta, named


def main(argv=None) -> int:
    paths = sys.argv[1:] if argv is None else argv
    status = 0
    for p in paths:
        try:
            with open(p, "rb") as fh:
                arr, meta, named = decode(fh.read(), p)
        except (OSError, FormatError) as exc:
            print(f"{p}: INVALID ({exc})")
            status = 2
            continue
        desc = f"{p}: ok {arr.dtype} {arr.shape}"
        if named is not None:
            desc += f" + {len(named)} named tensors"
        print(desc)
    return status


if __name__ == "__main__":
    sys.exit(main())

"""CFT1 columnar container.

Byte layout (all integers little-endian)::

    header   b"CFT1" | u32 ncols | per column: u16 name_len, name (UTF-8),
             u8 dtype code (1 int64, 2 float64, 3 date, 4 string), u8 nullable
    chunk    u64 nrows | per column:
                 validity bitmap, ceil(nrows/8) bytes, LSB-first, 1 = valid
                 u8 codec (0 none, 1 zlib) | u64 payload_len | payload
             payload before compression:
                 int64/float64  nrows * 8 bytes
                 date           nrows * 4 bytes, int32 days since 1970-01-01
                 string         (nrows + 1) u64 offsets, then UTF-8 bytes
             null slots are written as 0 / 0.0 / ""
    footer   per chunk: u64 offset of the chunk | u64 nchunks |
             u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..errors import ContainerError
from .table import CODE_DTYPES, DTYPE_CODES, ColumnSchema, DType, Table, concat_tables

MAGIC = b"CFT1"
CODEC_NONE = 0
CODEC_ZLIB = 1


def encode_header(schema: Sequence[ColumnSchema]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(schema))]
    for col in schema:
        name = col.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<BB", DTYPE_CODES[col.dtype], 1 if col.nullable else 0))
    return b"".join(parts)


def _encode_values(col: ColumnSchema, values: np.ndarray, valid: np.ndarray) -> bytes:
    if col.dtype is DType.STRING:
        if valid.all():
            strings = values.tolist()
        else:
            strings = [v if ok else "" for v, ok in zip(values.tolist(), valid.tolist())]
        encoded = [s.encode("utf-8") for s in strings]
        offsets = np.zeros(len(encoded) + 1, dtype="<u8")
        if encoded:
            np.cumsum(np.fromiter(map(len, encoded), dtype=np.int64, count=len(encoded)), out=offsets[1:])
        return offsets.tobytes() + b"".join(encoded)
    le = {DType.INT64: "<i8", DType.FLOAT64: "<f8", DType.DATE: "<i4"}[col.dtype]
    arr = np.asarray(values).astype(le, copy=True)
    if not valid.all():
        arr[~valid] = 0
    return arr.tobytes()


def encode_chunk(table: Table, compression: Optional[str] = None) -> bytes:
    """Serialize one table as a chunk (without footer bookkeeping)."""
    codec = CODEC_ZLIB if compression == "zlib" else CODEC_NONE
    parts = [struct.pack("<Q", table.num_rows)]
    for col in table.schema:
        valid = table.validity[col.name]
        parts.append(np.packbits(valid, bitorder="little").tobytes())
        payload = _encode_values(col, table.columns[col.name], valid)
        if codec == CODEC_ZLIB:
            payload = zlib.compress(payload, 6)
        parts.append(struct.pack("<BQ", codec, len(payload)))
        parts.append(payload)
    return b"".join(parts)


def decode_header(buf) -> tuple[tuple[ColumnSchema, ...], int]:
    if bytes(buf[:4]) != MAGIC:
        raise ContainerError("bad magic: not a CFT1 container")
    (ncols,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    cols = []
    for _ in range(ncols):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = bytes(buf[pos:pos + n]).decode("utf-8")
        pos += n
        code, nullable = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if code not in CODE_DTYPES:
            raise ContainerError(f"unknown dtype code {code} for column {name!r}")
        cols.append(ColumnSchema(name, CODE_DTYPES[code], bool(nullable)))
    return tuple(cols), pos


def decode_chunk(buf, pos: int, schema, columns: Optional[Sequence[str]] = None) -> Table:
    """Decode the chunk starting at ``pos``; optionally only the named columns."""
    (nrows,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    wanted = None if columns is None else set(columns)
    nbytes = (nrows + 7) // 8
    data, valid, kept = {}, {}, []
    for col in schema:
        bitmap = buf[pos:pos + nbytes]
        pos += nbytes
        codec, plen = struct.unpack_from("<BQ", buf, pos)
        pos += 9
        payload = buf[pos:pos + plen]
        pos += plen
        if wanted is not None and col.name not in wanted:
            continue
        if codec == CODEC_ZLIB:
            payload = zlib.decompress(payload)
        elif codec != CODEC_NONE:
            raise ContainerError(f"unknown codec {codec}")
        kept.append(col)
        valid[col.name] = np.unpackbits(np.frombuffer(bitmap, dtype=np.uint8), count=nrows,
                                        bitorder="little").astype(bool)
        if col.dtype is DType.STRING:
            offsets = np.frombuffer(payload, dtype="<u8", count=nrows + 1)
            raw = bytes(payload[8 * (nrows + 1):])
            bounds = offsets.tolist()
            if raw.isascii():
                text = raw.decode("ascii")
                vals = [text[a:b] for a, b in zip(bounds, bounds[1:])]
            else:
                vals = [raw[a:b].decode("utf-8") for a, b in zip(bounds, bounds[1:])]
            arr = np.empty(nrows, dtype=object)
            arr[:] = vals
            data[col.name] = arr
        else:
            le = {DType.INT64: "<i8", DType.FLOAT64: "<f8", DType.DATE: "<i4"}[col.dtype]
            native = {DType.INT64: np.int64, DType.FLOAT64: np.float64, DType.DATE: np.int32}[col.dtype]
            data[col.name] = np.frombuffer(payload, dtype=le, count=nrows).astype(native)
    if wanted is not None:
        kept = [c for name in columns for c in kept if c.name == name]
        missing = wanted - {c.name for c in kept}
        if missing:
            raise ContainerError(f"columns not in container: {sorted(missing)}")
    return Table(kept, data, valid, num_rows=nrows)


class ContainerWriter:
    """Sequential single-writer for a CFT1 file; chunks are appended in call order."""

    def __init__(self, path, schema, compression: Optional[str] = None):
        self.path = Path(path)
        self.schema = tuple(schema)
        self.compression = compression
        self._fh = open(self.path, "wb")
        self._crc = 0
        self._offsets: list[int] = []
        self._pos = 0
        self.rows_written = 0
        self._write(encode_header(self.schema))

    @classmethod
    def _reopen(cls, path, schema, offsets, end, crc, rows, compression=None):
        self = cls.__new__(cls)
        self.path = Path(path)
        self.schema = tuple(schema)
        self.compression = compression
        self._fh = open(self.path, "r+b")
        self._fh.seek(end)
        self._fh.truncate()
        self._crc = crc
        self._offsets = list(offsets)
        self._pos = end
        self.rows_written = rows
        return self

    def _write(self, data: bytes) -> None:
        self._fh.write(data)
        self._crc = zlib.crc32(data, self._crc)
        self._pos += len(data)

    def write_table(self, table: Table) -> None:
        if [(c.name, c.dtype) for c in table.schema] != [(c.name, c.dtype) for c in self.schema]:
            raise ContainerError("schema conflict: chunk does not match container schema")
        self.write_encoded(encode_chunk(table, self.compression), table.num_rows)

    def write_encoded(self, chunk: bytes, nrows: int) -> None:
        self._offsets.append(self._pos)
        self._write(chunk)
        self.rows_written += nrows

    def close(self) -> None:
        if self._fh is None:
            return
        footer = np.asarray(self._offsets, dtype="<u8").tobytes() + struct.pack("<Q", len(self._offsets))
        self._write(footer)
        self._fh.write(struct.pack("<I", self._crc & 0xFFFFFFFF))
        self._fh.close()
        self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class Container:
    """Read-side view of a CFT1 file held in memory."""

    def __init__(self, path, verify: bool = True):
        self.path = Path(path)
        buf = self.path.read_bytes()
        if len(buf) < 4 + 4 + 8 + 4 or buf[:4] != MAGIC:
            raise ContainerError(f"{path}: not a CFT1 container (bad magic or truncated)")
        (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
        if verify and zlib.crc32(memoryview(buf)[:-4]) & 0xFFFFFFFF != crc:
            raise ContainerError(f"{path}: checksum mismatch, container is corrupt")
        (nchunks,) = struct.unpack_from("<Q", buf, len(buf) - 12)
        footer_start = len(buf) - 12 - 8 * nchunks
        if footer_start < 8:
            raise ContainerError(f"{path}: corrupt footer")
        self.offsets = np.frombuffer(buf, dtype="<u8", count=nchunks, offset=footer_start).tolist()
        self.schema, header_end = decode_header(buf)
        self.footer_start = footer_start
        self.crc = crc
        self._buf = memoryview(buf)
        if self.offsets and self.offsets[0] != header_end:
            raise ContainerError(f"{path}: first chunk offset does not follow the header")

    @property
    def num_chunks(self) -> int:
        return len(self.offsets)

    def chunk_rows(self, i: int) -> int:
        return struct.unpack_from("<Q", self._buf, self.offsets[i])[0]

    @property
    def num_rows(self) -> int:
        return sum(self.chunk_rows(i) for i in range(self.num_chunks))

    def read_chunk(self, i: int, columns=None) -> Table:
        return decode_chunk(self._buf, self.offsets[i], self.schema, columns)

    def read(self, columns=None) -> Table:
        schema = self.schema if columns is None else [c for n in columns for c in self.schema if c.name == n]
        return concat_tables([self.read_chunk(i, columns) for i in range(self.num_chunks)], schema=schema)


def write_container(table: Table, path, compression: Optional[str] = None) -> None:
    with ContainerWriter(path, table.schema, compression) as w:
        if table.num_rows:
            w.write_table(table)


def read_container(path, columns=None, verify: bool = True) -> Table:
    return Container(path, verify=verify).read(columns)


def append_container(table: Table, path, compression: Optional[str] = None) -> None:
    """Append ``table`` as a new chunk; creates the container if absent."""
    if not os.path.exists(path):
        write_container(table, path, compression)
        return
    c = Container(path, verify=True)
    if [(x.name, x.dtype, x.nullable) for x in c.schema] != \
            [(x.name, x.dtype, x.nullable) for x in table.schema]:
        raise ContainerError(f"{path}: schema conflict on append")
    prefix_crc = zlib.crc32(c._buf[:c.footer_start])
    rows = c.num_rows
    offsets, end = c.offsets, c.footer_start
    del c
    w = ContainerWriter._reopen(path, table.schema, offsets, end, prefix_crc, rows, compression)
    with w:
        w.write_table(table)

"""RFC-4180 CSV ingestion into typed tables (UTF-8, configurable delimiter)."""
from __future__ import annotations

import csv
import logging
from datetime import date

import numpy as np

from ..errors import SchemaError, ValidationError
from ..model import EPOCH_DATE
from .table import DType, NUMPY_DTYPES, Table, schema_from_spec

logger = logging.getLogger(__name__)


class CsvTypeError(ValidationError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


def _parse_date(text: str) -> int:
    head, tail = text[:10], text[10:].strip(" T")
    if tail and tail.strip("0:. ") != "":
        raise ValueError(f"date with non-midnight time: {text!r}")
    return (date.fromisoformat(head) - EPOCH_DATE).days


_SCALAR_PARSERS = {DType.INT64: int, DType.FLOAT64: float, DType.DATE: _parse_date}


def _fast_convert(dtype: DType, values: np.ndarray) -> np.ndarray:
    if dtype is DType.DATE:
        return np.array(values.astype(str), dtype="datetime64[D]").astype(np.int64).astype(np.int32)
    return values.astype(str).astype(NUMPY_DTYPES[dtype])


def _convert_column(col, raw: list[str], first_line: int):
    n = len(raw)
    arr = np.array(raw, dtype=object) if n else np.empty(0, dtype=object)
    valid = arr != "" if n else np.ones(0, dtype=bool)
    if col.dtype is DType.STRING:
        if not col.nullable and not valid.all():
            bad = int(np.argmin(valid))
            raise CsvTypeError(f"empty value in non-nullable column {col.name!r} at line {first_line + bad}",
                               row=bad, column=col.name)
        return np.where(valid, arr, ""), valid, 0
    out = np.zeros(n, dtype=NUMPY_DTYPES[col.dtype])
    idx = np.flatnonzero(valid)
    try:
        if len(idx):
            out[idx] = _fast_convert(col.dtype, arr[idx])
        coerced = 0
    except (ValueError, OverflowError):
        parse = _SCALAR_PARSERS[col.dtype]
        coerced = 0
        for i in idx.tolist():
            try:
                out[i] = parse(arr[i])
            except (ValueError, OverflowError):
                if not col.nullable:
                    raise CsvTypeError(
                        f"cannot parse {arr[i]!r} as {col.dtype.value} in column {col.name!r} "
                        f"at line {first_line + i}", row=i, column=col.name) from None
                valid[i] = False
                coerced += 1
    if not col.nullable and not valid.all():
        bad = int(np.argmin(valid))
        raise CsvTypeError(f"empty value in non-nullable column {col.name!r} at line {first_line + bad}",
                           row=bad, column=col.name)
    return out, valid, coerced


def load_csv(path, schema, delimiter: str = ",") -> Table:
    """Read a CSV file into a typed :class:`Table`.

    Columns are matched by header name, in any order; extra file columns are
    ignored. Empty cells are null. Unparseable cells become null in nullable
    columns (counted in ``table.coerced``) and raise :class:`CsvTypeError`
    otherwise.
    """
    schema = schema_from_spec(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file, expected a header row")
        positions = {name: i for i, name in enumerate(header)}
        missing = [c.name for c in schema if c.name not in positions]
        if missing:
            raise SchemaError(f"{path}: header is missing declared columns {missing}")
        rows = list(reader)
    width = len(header)
    for i, r in enumerate(rows):
        if len(r) != width:
            raise CsvTypeError(f"{path}: line {i + 2} has {len(r)} fields, expected {width}", row=i)
    columns = list(zip(*rows)) if rows else [()] * width
    data, valid, coerced = {}, {}, {}
    for col in schema:
        raw = list(columns[positions[col.name]])
        try:
            data[col.name], valid[col.name], coerced[col.name] = _convert_column(col, raw, 2)
        except CsvTypeError as exc:
            raise CsvTypeError(f"{path}: {exc}", row=exc.row, column=exc.column) from None
    table = Table(schema, data, valid, num_rows=len(rows))
    table.coerced = {k: v for k, v in coerced.items() if v}
    if table.coerced:
        logger.warning("%s: coerced unparseable cells to null: %s", path, table.coerced)
    return table


def _format_column(col, values, valid) -> list[str]:
    if col.dtype is DType.STRING:
        return [v if ok else "" for v, ok in zip(values.tolist(), valid.tolist())]
    if col.dtype is DType.DATE:
        iso = np.asarray(values, dtype=np.int64).astype("datetime64[D]").astype(str)
        return [s if ok else "" for s, ok in zip(iso.tolist(), valid.tolist())]
    if col.dtype is DType.FLOAT64:
        return [repr(v) if ok else "" for v, ok in zip(values.tolist(), valid.tolist())]
    return [str(v) if ok else "" for v, ok in zip(values.tolist(), valid.tolist())]


def write_csv(table: Table, path, delimiter: str = ",") -> None:
    cols = [_format_column(c, table.columns[c.name], table.validity[c.name]) for c in table.schema]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\r\n")
        w.writerow(table.column_names)
        w.writerows(zip(*cols))

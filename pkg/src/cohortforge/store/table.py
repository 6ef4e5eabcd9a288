"""In-memory columnar tables: typed numpy vectors plus boolean validity masks."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from datetime import date, datetime
from typing import Iterable, Optional, Sequence

import numpy as np

from ..errors import SchemaError, ValidationError
from ..model import EPOCH_DATE, date_to_days


class DType(str, enum.Enum):
    INT64 = "int64"
    FLOAT64 = "float64"
    DATE = "date"
    STRING = "string"


DTYPE_CODES = {DType.INT64: 1, DType.FLOAT64: 2, DType.DATE: 3, DType.STRING: 4}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
NUMPY_DTYPES = {DType.INT64: np.int64, DType.FLOAT64: np.float64, DType.DATE: np.int32,
                DType.STRING: object}
_FILL = {DType.INT64: 0, DType.FLOAT64: 0.0, DType.DATE: 0, DType.STRING: ""}


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    dtype: DType
    nullable: bool = True

    def __post_init__(self):
        if not self.name:
            raise SchemaError("column name must be non-empty")
        object.__setattr__(self, "dtype", DType(self.dtype))


def schema_from_spec(spec: Iterable) -> tuple[ColumnSchema, ...]:
    """Build a schema from ColumnSchema objects, dicts or (name, dtype[, nullable]) tuples."""
    cols = []
    for item in spec:
        if isinstance(item, ColumnSchema):
            cols.append(item)
        elif isinstance(item, dict):
            cols.append(ColumnSchema(item["name"], DType(item["dtype"]), bool(item.get("nullable", True))))
        else:
            cols.append(ColumnSchema(*item))
    names = [c.name for c in cols]
    if len(set(names)) != len(names):
        raise SchemaError(f"duplicate column names in schema: {names}")
    return tuple(cols)


def _to_cell(dtype: DType, value):
    if value is None:
        return None
    if dtype is DType.DATE:
        if isinstance(value, (date, datetime)):
            return date_to_days(value)
        return int(value)
    if dtype is DType.INT64:
        return int(value)
    if dtype is DType.FLOAT64:
        return float(value)
    return str(value)


def _from_cell(dtype: DType, value):
    if dtype is DType.DATE:
        return EPOCH_DATE.fromordinal(EPOCH_DATE.toordinal() + int(value))
    if dtype is DType.INT64:
        return int(value)
    if dtype is DType.FLOAT64:
        return float(value)
    return value


class Table:
    """Immutable-by-convention columnar table.

    ``columns[name]`` is a numpy vector (int64, float64, int32 days since
    1970-01-01 for dates, object for strings); ``validity[name]`` is a boolean
    vector where False marks a null. Values at null slots are unspecified.
    """

    __slots__ = ("schema", "columns", "validity", "num_rows", "coerced")

    def __init__(self, schema: Sequence[ColumnSchema], columns: dict, validity: Optional[dict] = None,
                 num_rows: Optional[int] = None):
        self.schema = schema_from_spec(schema)
        self.columns = {}
        self.validity = {}
        self.coerced: dict[str, int] = {}
        if num_rows is None:
            num_rows = len(columns[self.schema[0].name]) if self.schema else 0
        self.num_rows = int(num_rows)
        validity = validity or {}
        for col in self.schema:
            if col.name not in columns:
                raise SchemaError(f"missing data for column {col.name!r}")
            arr = np.asarray(columns[col.name], dtype=NUMPY_DTYPES[col.dtype])
            if arr.ndim != 1 or len(arr) != self.num_rows:
                raise SchemaError(f"column {col.name!r} has length {len(arr)}, expected {self.num_rows}")
            valid = validity.get(col.name)
            valid = np.ones(self.num_rows, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
            if len(valid) != self.num_rows:
                raise SchemaError(f"validity of {col.name!r} has wrong length")
            if not col.nullable and not valid.all():
                raise SchemaError(f"non-nullable column {col.name!r} contains nulls")
            self.columns[col.name] = arr
            self.validity[col.name] = valid

    # construction helpers --------------------------------------------------
    @classmethod
    def from_rows(cls, schema, rows: Iterable[Sequence]) -> "Table":
        schema = schema_from_spec(schema)
        rows = list(rows)
        data = {c.name: [] for c in schema}
        valid = {c.name: [] for c in schema}
        for r in rows:
            if len(r) != len(schema):
                raise SchemaError(f"row {r!r} does not match schema width {len(schema)}")
            for c, v in zip(schema, r):
                cell = _to_cell(c.dtype, v)
                valid[c.name].append(cell is not None)
                data[c.name].append(_FILL[c.dtype] if cell is None else cell)
        return cls(schema, {k: np.array(v, dtype=NUMPY_DTYPES[c.dtype]) if v else
                            np.empty(0, dtype=NUMPY_DTYPES[c.dtype])
                            for c, (k, v) in zip(schema, data.items())},
                   valid, num_rows=len(rows))

    @classmethod
    def from_pydict(cls, schema, data: dict) -> "Table":
        schema = schema_from_spec(schema)
        n = len(data[schema[0].name]) if schema else 0
        return cls.from_rows(schema, zip(*(data[c.name] for c in schema)) if schema else [()] * n)

    @classmethod
    def empty(cls, schema) -> "Table":
        schema = schema_from_spec(schema)
        return cls(schema, {c.name: np.empty(0, dtype=NUMPY_DTYPES[c.dtype]) for c in schema},
                   num_rows=0)

    # accessors ---------------------------------------------------------------
    @property
    def column_names(self) -> list[str]:
        return [c.name for c in self.schema]

    def field(self, name: str) -> ColumnSchema:
        for c in self.schema:
            if c.name == name:
                return c
        raise SchemaError(f"unknown column {name!r}; available: {self.column_names}")

    def __len__(self):
        return self.num_rows

    def __repr__(self):
        cols = ", ".join(f"{c.name}:{c.dtype.value}" for c in self.schema)
        return f"Table({self.num_rows} rows; {cols})"

    def null_count(self, name: str) -> int:
        return int(self.num_rows - self.validity[name].sum())

    def to_pylist(self, name: str) -> list:
        c = self.field(name)
        vals, valid = self.columns[name], self.validity[name]
        if c.dtype is DType.STRING:
            return [v if ok else None for v, ok in zip(vals.tolist(), valid.tolist())]
        return [_from_cell(c.dtype, v) if ok else None for v, ok in zip(vals.tolist(), valid.tolist())]

    def rows(self) -> list[tuple]:
        if not self.schema:
            return [()] * self.num_rows
        return list(zip(*(self.to_pylist(c.name) for c in self.schema)))

    def canonical_rows(self) -> list[tuple]:
        return sorted(self.rows(), key=_null_safe_key)

    def equals(self, other: "Table") -> bool:
        return (self.schema == other.schema and self.num_rows == other.num_rows
                and self.rows() == other.rows())

    # row / column manipulation ------------------------------------------------
    def take(self, indices) -> "Table":
        idx = np.asarray(indices, dtype=np.int64)
        return Table(self.schema, {k: v[idx] for k, v in self.columns.items()},
                     {k: v[idx] for k, v in self.validity.items()}, num_rows=len(idx))

    def mask(self, keep) -> "Table":
        keep = np.asarray(keep, dtype=bool)
        return Table(self.schema, {k: v[keep] for k, v in self.columns.items()},
                     {k: v[keep] for k, v in self.validity.items()}, num_rows=int(keep.sum()))

    def slice(self, start: int, stop: int) -> "Table":
        return Table(self.schema, {k: v[start:stop] for k, v in self.columns.items()},
                     {k: v[start:stop] for k, v in self.validity.items()},
                     num_rows=max(0, min(stop, self.num_rows) - start))

    def with_column(self, col: ColumnSchema, values, valid=None) -> "Table":
        if col.name in self.columns:
            raise SchemaError(f"column {col.name!r} already exists")
        cols = dict(self.columns)
        vals = dict(self.validity)
        cols[col.name] = values
        if valid is not None:
            vals[col.name] = valid
        return Table(self.schema + (col,), cols, vals, num_rows=self.num_rows)

    def rename(self, mapping: dict) -> "Table":
        schema = [ColumnSchema(mapping.get(c.name, c.name), c.dtype, c.nullable) for c in self.schema]
        return Table(schema, {mapping.get(k, k): v for k, v in self.columns.items()},
                     {mapping.get(k, k): v for k, v in self.validity.items()}, num_rows=self.num_rows)


def _null_safe_key(row):
    return tuple((v is not None, v if v is not None else 0) for v in row)


def concat_tables(tables: Sequence[Table], schema=None) -> Table:
    tables = list(tables)
    if not tables:
        if schema is None:
            raise SchemaError("cannot concatenate zero tables without a schema")
        return Table.empty(schema)
    schema = tables[0].schema if schema is None else schema_from_spec(schema)
    for t in tables:
        if [(c.name, c.dtype) for c in t.schema] != [(c.name, c.dtype) for c in schema]:
            raise SchemaError("schema conflict while concatenating tables")
    return Table(schema,
                 {c.name: np.concatenate([t.columns[c.name] for t in tables]) for c in schema},
                 {c.name: np.concatenate([t.validity[c.name] for t in tables]) for c in schema},
                 num_rows=sum(t.num_rows for t in tables))


# the three extractor primitives -------------------------------------------------

def project(t: Table, cols: Sequence[str]) -> Table:
    """Column subset; never looks at values."""
    fields = [t.field(c) for c in cols]
    return Table(fields, {c: t.columns[c] for c in cols}, {c: t.validity[c] for c in cols},
                 num_rows=t.num_rows)


def drop_null_rows(t: Table, cols: Sequence[str]) -> Table:
    for c in cols:
        t.field(c)
    if not cols:
        return t
    keep = np.ones(t.num_rows, dtype=bool)
    for c in cols:
        keep &= t.validity[c]
    if keep.all():
        return t
    return t.mask(keep)


def _encode_allow(col: ColumnSchema, allow) -> np.ndarray:
    out = []
    for v in allow:
        if col.dtype is DType.STRING:
            if not isinstance(v, str):
                raise ValidationError(f"allow-set value {v!r} is not a string for column {col.name!r}")
            out.append(v)
        elif col.dtype is DType.DATE:
            if isinstance(v, (date, datetime)):
                out.append(date_to_days(v))
            elif isinstance(v, (int, np.integer)) and not isinstance(v, bool):
                out.append(int(v))
            else:
                raise ValidationError(f"allow-set value {v!r} is not a date for column {col.name!r}")
        elif col.dtype is DType.INT64:
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise ValidationError(f"allow-set value {v!r} is not an integer for column {col.name!r}")
            out.append(int(v))
        else:
            if isinstance(v, bool) or not isinstance(v, (int, float, np.integer, np.floating)):
                raise ValidationError(f"allow-set value {v!r} is not numeric for column {col.name!r}")
            out.append(float(v))
    return np.array(out, dtype=NUMPY_DTYPES[col.dtype]) if out else np.empty(0, NUMPY_DTYPES[col.dtype])


def isin_mask(t: Table, col: str, allow) -> np.ndarray:
    field_ = t.field(col)
    values = t.columns[col]
    if field_.dtype is DType.STRING:
        allow_set = set(_encode_allow(field_, allow).tolist())
        hit = np.fromiter((v in allow_set for v in values), dtype=bool, count=len(values))
    else:
        hit = np.isin(values, _encode_allow(field_, allow))
    return hit & t.validity[col]


def filter_rows(t: Table, col: str, allow) -> Table:
    """Keep rows whose ``col`` value is in ``allow``; nulls never match."""
    keep = isin_mask(t, col, allow)
    if keep.all():
        return t
    return t.mask(keep)


@dataclass
class PartitionedTable:
    slice_key: str
    slices: dict = field(default_factory=dict)

    @property
    def num_rows(self) -> int:
        return sum(t.num_rows for t in self.slices.values())

    def tables(self) -> list[Table]:
        return list(self.slices.values())

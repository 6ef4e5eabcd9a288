"""Star-schema denormalization: sequential left joins onto a central table.

The central table gets a ``_rowid`` column and each dimension a
``<dim>__rowid`` column before joining, so every flat row can be traced back
to the central row and dimension row that produced it. Work is split into
(slice, chunk) units of central rows; units are joined independently and
appended to the output container in slice order, chunk order.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import parallel
from .errors import IntegrityError, SchemaError, ValidationError
from .findings import ERROR, WARNING, Finding, has_errors
from .store.container import ContainerWriter, encode_chunk
from .store.csvio import load_csv
from .store.table import ColumnSchema, DType, PartitionedTable, Table, schema_from_spec

logger = logging.getLogger(__name__)

ROWID = "_rowid"
UNSLICED = "unsliced"
DEFAULT_CHUNK_ROWS = 1 << 16
DEFAULT_SPARSITY_THRESHOLD = 10.0
SLICE_UNITS = ("none", "month", "year")


@dataclass(frozen=True)
class Dimension:
    table: str
    keys: tuple  # ((left column, right column), ...)

    def __post_init__(self):
        keys = tuple((str(a), str(b)) for a, b in self.keys)
        if not keys:
            raise SchemaError(f"dimension {self.table!r} has no join keys")
        object.__setattr__(self, "keys", keys)


@dataclass(frozen=True)
class JoinSpec:
    central: str
    dimensions: tuple = ()
    join_type: str = "left"

    def __post_init__(self):
        dims = tuple(d if isinstance(d, Dimension) else Dimension(d[0], d[1]) for d in self.dimensions)
        object.__setattr__(self, "dimensions", dims)
        if self.join_type != "left":
            raise SchemaError("only left joins are supported")


@dataclass(frozen=True)
class SlicingSpec:
    column: Optional[str] = None
    unit: str = "none"

    def __post_init__(self):
        if self.unit not in SLICE_UNITS:
            raise SchemaError(f"unknown slicing unit {self.unit!r}; expected one of {SLICE_UNITS}")
        if self.unit != "none" and not self.column:
            raise SchemaError("a slicing column is required when unit is not 'none'")


@dataclass
class StageCount:
    dimension: str
    rows_before: int
    rows_after: int


@dataclass
class FlatteningReport:
    central_table: str
    central_rows: int = 0
    flat_rows: int = 0
    stages: list = field(default_factory=list)
    non_null: dict = field(default_factory=dict)
    distinct_central_keys_in: int = 0
    distinct_central_keys_out: int = 0
    slicing_unit: str = "none"
    slices: dict = field(default_factory=dict)
    column_sources: dict = field(default_factory=dict)
    findings: list = field(default_factory=list)

    @property
    def expansion_factor(self) -> float:
        if self.central_rows == 0:
            return 1.0
        return self.flat_rows / self.central_rows

    def to_dict(self) -> dict:
        return {
            "central_table": self.central_table,
            "central_rows": self.central_rows,
            "flat_rows": self.flat_rows,
            "expansion_factor": round(self.expansion_factor, 9),
            "distinct_central_keys_in": self.distinct_central_keys_in,
            "distinct_central_keys_out": self.distinct_central_keys_out,
            "slicing_unit": self.slicing_unit,
            "slices": dict(self.slices),
            "stages": [{"dimension": s.dimension, "rows_before": s.rows_before,
                        "rows_after": s.rows_after} for s in self.stages],
            "non_null": dict(self.non_null),
            "column_sources": dict(self.column_sources),
            "findings": [f.to_dict() for f in self.findings],
        }

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


# --- slicing -----------------------------------------------------------------

def _period_labels(days: np.ndarray, unit: str) -> np.ndarray:
    d = days.astype("datetime64[D]")
    if unit == "year":
        return d.astype("datetime64[Y]").astype(np.int64)
    return d.astype("datetime64[M]").astype(np.int64)


def _format_period(code: int, unit: str) -> str:
    if unit == "year":
        return str(np.datetime64(int(code), "Y"))
    return str(np.datetime64(int(code), "M"))


def slice_central(central: Table, slicing: SlicingSpec) -> PartitionedTable:
    """Split central rows by calendar period, keeping row order inside each period.

    Rows with a null slicing date go to a trailing ``"unsliced"`` partition.
    """
    if slicing.unit == "none":
        return PartitionedTable("none", {"all": central})
    col = central.field(slicing.column)
    if col.dtype is not DType.DATE:
        raise SchemaError(f"slicing column {slicing.column!r} must have dtype date, not {col.dtype.value}")
    valid = central.validity[slicing.column]
    codes = _period_labels(central.columns[slicing.column], slicing.unit)
    slices = {}
    valid_idx = np.flatnonzero(valid)
    if len(valid_idx):
        vcodes = codes[valid_idx]
        order = np.argsort(vcodes, kind="stable")
        sorted_codes = vcodes[order]
        uniq, starts = np.unique(sorted_codes, return_index=True)
        bounds = list(starts) + [len(sorted_codes)]
        for j, code in enumerate(uniq):
            rows = valid_idx[order[bounds[j]:bounds[j + 1]]]
            slices[_format_period(code, slicing.unit)] = central.take(rows)
    null_idx = np.flatnonzero(~valid)
    if len(null_idx):
        slices[UNSLICED] = central.take(null_idx)
    return PartitionedTable(slicing.unit, slices)


# --- joins ---------------------------------------------------------------------

class DimensionIndex:
    """Lookup structure for one dimension's join keys."""

    def __init__(self, table: Table, right_cols: Sequence[str]):
        self.right_cols = list(right_cols)
        self.dtypes = [table.field(c).dtype for c in right_cols]
        valid = np.ones(table.num_rows, dtype=bool)
        for c in right_cols:
            valid &= table.validity[c]
        self.numeric = len(right_cols) == 1 and self.dtypes[0] in (DType.INT64, DType.DATE)
        rows = np.flatnonzero(valid)
        if self.numeric:
            codes = table.columns[right_cols[0]][rows].astype(np.int64)
            self.lookup = None
        else:
            self.lookup = {}
            keys = zip(*(table.columns[c][rows].tolist() for c in right_cols))
            codes = np.fromiter((self.lookup.setdefault(k, len(self.lookup)) for k in keys),
                                dtype=np.int64, count=len(rows))
        order = np.argsort(codes, kind="stable")
        self.sorted_codes = codes[order]
        self.order = rows[order]

    def match(self, left: Table, left_cols: Sequence[str]):
        """Return (first position in sorted order, match count) per left row."""
        n = left.num_rows
        valid = np.ones(n, dtype=bool)
        for c in left_cols:
            valid &= left.validity[c]
        if self.numeric:
            codes = left.columns[left_cols[0]].astype(np.int64)
        else:
            get = self.lookup.get
            keys = zip(*(left.columns[c].tolist() for c in left_cols))
            codes = np.fromiter((get(k, -1) for k in keys), dtype=np.int64, count=n)
            valid &= codes >= 0
        lo = np.searchsorted(self.sorted_codes, codes, side="left")
        hi = np.searchsorted(self.sorted_codes, codes, side="right")
        counts = np.where(valid, hi - lo, 0)
        return lo, counts


def expand_matches(lo: np.ndarray, counts: np.ndarray, order: np.ndarray):
    """Left-join row expansion: left row i appears max(1, counts[i]) times."""
    reps = np.maximum(counts, 1)
    total = int(reps.sum())
    left_idx = np.repeat(np.arange(len(counts), dtype=np.int64), reps)
    starts = np.cumsum(reps) - reps
    within = np.arange(total, dtype=np.int64) - np.repeat(starts, reps)
    matched = np.repeat(counts, reps) > 0
    right_idx = np.full(total, -1, dtype=np.int64)
    pos = np.repeat(lo, reps)[matched] + within[matched]
    right_idx[matched] = order[pos]
    return left_idx, right_idx


def left_join(left: Table, right: Table, keys, index: Optional[DimensionIndex] = None,
              rename: Optional[dict] = None) -> Table:
    """Left-join ``right`` onto ``left``; right-key columns named like their left key are dropped."""
    keys = [(a, b) for a, b in keys]
    index = index or DimensionIndex(right, [b for _, b in keys])
    lo, counts = index.match(left, [a for a, _ in keys])
    left_idx, right_idx = expand_matches(lo, counts, index.order)
    out = left.take(left_idx)
    hit = right_idx >= 0
    safe = np.where(hit, right_idx, 0)
    dropped = {b for a, b in keys if a == b}
    rename = rename or {}
    schema = list(out.schema)
    cols, valid = dict(out.columns), dict(out.validity)
    for col in right.schema:
        if col.name in dropped:
            continue
        name = rename.get(col.name, col.name)
        if name in cols:
            raise SchemaError(f"column collision on {name!r}")
        schema.append(ColumnSchema(name, col.dtype, True))
        if right.num_rows:
            cols[name] = right.columns[col.name][safe]
            valid[name] = hit & right.validity[col.name][safe]
        else:
            cols[name] = np.zeros(len(right_idx), dtype=right.columns[col.name].dtype)
            if col.dtype is DType.STRING:
                cols[name][:] = ""
            valid[name] = np.zeros(len(right_idx), dtype=bool)
    return Table(schema, cols, valid, num_rows=len(left_idx))


@dataclass
class _PreparedDim:
    name: str
    table: Table
    keys: list
    index: DimensionIndex
    rename: dict


def _check_key_types(left_field: ColumnSchema, right_field: ColumnSchema, dim: str):
    if left_field.dtype != right_field.dtype:
        raise SchemaError(
            f"join key type mismatch for {dim}: {left_field.name} is {left_field.dtype.value}, "
            f"{right_field.name} is {right_field.dtype.value}")


def prepare_dimensions(central: Table, dims: dict, join: JoinSpec, collision_prefix: bool = True):
    """Validate the join plan and build dimension indexes; returns (prepared, output schema, sources)."""
    if ROWID in central.columns:
        raise SchemaError(f"central table already has a {ROWID!r} column")
    schema = list(central.schema) + [ColumnSchema(ROWID, DType.INT64, False)]
    sources = {c.name: f"{join.central}.{c.name}" for c in central.schema}
    sources[ROWID] = f"{join.central}.<row>"
    prepared = []
    for dim in join.dimensions:
        if dim.table not in dims:
            raise SchemaError(f"dimension table {dim.table!r} not provided")
        table = dims[dim.table]
        rid = f"{dim.table}__rowid"
        if rid in table.columns:
            raise SchemaError(f"dimension {dim.table!r} already has a {rid!r} column")
        table = table.with_column(ColumnSchema(rid, DType.INT64, False),
                                  np.arange(table.num_rows, dtype=np.int64))
        current = {c.name: c for c in schema}
        for a, b in dim.keys:
            if a not in current:
                raise SchemaError(f"join key {a!r} missing on the left side of {dim.table!r}")
            if b not in table.columns:
                raise SchemaError(f"join key {b!r} missing in dimension {dim.table!r}")
            _check_key_types(current[a], table.field(b), dim.table)
        dropped = {b for a, b in dim.keys if a == b}
        rename = {}
        for col in table.schema:
            if col.name in dropped:
                continue
            name = col.name
            if name in current:
                if not collision_prefix:
                    raise SchemaError(f"column {name!r} of {dim.table!r} collides and prefixing is off")
                name = f"{dim.table}__{col.name}"
                if name in current:
                    raise SchemaError(f"column collision on {name!r} even after prefixing")
                rename[col.name] = name
            schema.append(ColumnSchema(name, col.dtype, True))
            current[name] = schema[-1]
            sources[name] = f"{dim.table}.{col.name}"
        sources[rid] = f"{dim.table}.<row>"
        index = DimensionIndex(table, [b for _, b in dim.keys])
        prepared.append(_PreparedDim(dim.table, table, list(dim.keys), index, rename))
    return prepared, tuple(schema), sources


def join_chunk(chunk: Table, prepared: Sequence[_PreparedDim]):
    """Sequentially left-join every dimension onto a central chunk."""
    out = chunk
    stages = []
    for dim in prepared:
        before = out.num_rows
        out = left_join(out, dim.table, dim.keys, dim.index, dim.rename)
        stages.append((dim.name, before, out.num_rows))
    return out, stages


def _flatten_unit(unit):
    label, start, stop = unit
    part = parallel.shared("slices")[label].slice(start, stop)
    flat, stages = join_chunk(part, parallel.shared("prepared"))
    schema = parallel.shared("schema")
    if [c.name for c in flat.schema] != [c.name for c in schema]:
        raise SchemaError("joined chunk does not match the planned flat schema")
    flat = Table(schema, flat.columns, flat.validity, num_rows=flat.num_rows)
    non_null = {c.name: int(flat.validity[c.name].sum()) for c in schema}
    rowids = np.unique(flat.columns[ROWID])
    return encode_chunk(flat, parallel.shared("compression")), flat.num_rows, stages, non_null, rowids


def flatten(central: Table, dims: dict, join: JoinSpec, slicing: SlicingSpec = SlicingSpec(),
            out_path=None, *, workers: int = 1, chunk_rows: int = DEFAULT_CHUNK_ROWS,
            collision_prefix: bool = True, sparsity_threshold: float = DEFAULT_SPARSITY_THRESHOLD,
            compression: Optional[str] = None) -> FlatteningReport:
    """Denormalize ``central`` with ``dims`` into the container at ``out_path``.

    Raises IntegrityError (with the report attached) when central rows were lost.
    """
    if out_path is None:
        raise ValidationError("out_path is required")
    if chunk_rows <= 0:
        raise ValidationError("chunk_rows must be positive")
    central = central.with_column(ColumnSchema(ROWID, DType.INT64, False),
                                  np.arange(central.num_rows, dtype=np.int64))
    central_plain = Table(central.schema[:-1], {k: central.columns[k] for k in central.columns if k != ROWID},
                          {k: central.validity[k] for k in central.validity if k != ROWID},
                          num_rows=central.num_rows)
    prepared, schema, sources = prepare_dimensions(central_plain, dims, join, collision_prefix)
    parts = slice_central(central, slicing)
    units = []
    for label, table in parts.slices.items():
        for start in range(0, table.num_rows, chunk_rows):
            units.append((label, start, min(start + chunk_rows, table.num_rows)))

    report = FlatteningReport(join.central, central_rows=central.num_rows, slicing_unit=slicing.unit,
                              slices={k: v.num_rows for k, v in parts.slices.items()},
                              distinct_central_keys_in=central.num_rows, column_sources=sources)
    stage_totals = {d.name: [0, 0] for d in prepared}
    non_null = {c.name: 0 for c in schema}
    seen = np.zeros(central.num_rows, dtype=bool)
    state = {"slices": parts.slices, "prepared": prepared, "schema": schema, "compression": compression}
    with ContainerWriter(out_path, schema, compression) as writer:
        for chunk, nrows, stages, nn, rowids in parallel.imap_ordered(_flatten_unit, units, workers, state):
            writer.write_encoded(chunk, nrows)
            for name, before, after in stages:
                stage_totals[name][0] += before
                stage_totals[name][1] += after
            for k, v in nn.items():
                non_null[k] += v
            seen[rowids] = True
    report.flat_rows = writer.rows_written
    report.stages = [StageCount(n, b, a) for n, (b, a) in stage_totals.items()]
    report.non_null = non_null
    report.distinct_central_keys_out = int(seen.sum())
    report.findings = verify_flattening(report, sparsity_threshold)
    logger.info("flattened %s: %d -> %d rows (x%.3f)", join.central, report.central_rows,
                report.flat_rows, report.expansion_factor)
    if has_errors(report.findings):
        raise IntegrityError("flattening lost central rows", report=report, findings=report.findings)
    return report


def verify_flattening(report: FlatteningReport,
                      sparsity_threshold: float = DEFAULT_SPARSITY_THRESHOLD) -> list[Finding]:
    findings = []
    if report.distinct_central_keys_out < report.distinct_central_keys_in:
        findings.append(Finding(ERROR, "central_keys_lost",
                                f"{report.distinct_central_keys_in - report.distinct_central_keys_out} "
                                f"central rows missing from the flat table"))
    if report.flat_rows < report.central_rows:
        findings.append(Finding(ERROR, "expansion_below_one",
                                f"flat table has {report.flat_rows} rows for {report.central_rows} "
                                f"central rows (factor {report.expansion_factor:.4f})"))
    if report.expansion_factor > sparsity_threshold:
        findings.append(Finding(WARNING, "not_block_sparse",
                                f"expansion factor {report.expansion_factor:.2f} exceeds "
                                f"{sparsity_threshold:g}; dimension fan-out multiplies rows"))
    return findings


# --- configuration ---------------------------------------------------------------

@dataclass
class TableSource:
    name: str
    path: Path
    schema: tuple
    medical: bool = True
    join: tuple = ()
    delimiter: str = ","


@dataclass
class FlatteningConfig:
    tables: dict
    join: JoinSpec
    slicing: SlicingSpec
    collision_prefix: bool = True
    sparsity_threshold: float = DEFAULT_SPARSITY_THRESHOLD
    chunk_rows: int = DEFAULT_CHUNK_ROWS
    compression: Optional[str] = None


def load_flattening_config(path) -> FlatteningConfig:
    """Parse a YAML flattening config; relative paths resolve against its directory.

    When ``dimensions`` is omitted, every table tagged ``medical`` that declares
    ``join`` keys is joined, in schema order.
    """
    path = Path(path)
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    base = path.parent / raw.get("input_dir", ".")
    tables = {}
    for name, spec in (raw.get("tables") or {}).items():
        tables[name] = TableSource(
            name=name, path=(base / spec["path"]), schema=schema_from_spec(spec["columns"]),
            medical=bool(spec.get("medical", True)),
            join=tuple(tuple(k) for k in spec.get("join", ())),
            delimiter=spec.get("delimiter", raw.get("delimiter", ",")))
    central = raw.get("central")
    if central not in tables:
        raise SchemaError(f"central table {central!r} is not declared under 'tables'")
    if raw.get("dimensions") is not None:
        dims = tuple(Dimension(d["table"], tuple(tuple(k) for k in d["keys"])) for d in raw["dimensions"])
    else:
        dims = tuple(Dimension(t.name, t.join) for t in tables.values()
                     if t.name != central and t.medical and t.join)
    slicing_raw = raw.get("slicing") or {}
    return FlatteningConfig(
        tables=tables,
        join=JoinSpec(central, dims),
        slicing=SlicingSpec(slicing_raw.get("column"), slicing_raw.get("unit", "none")),
        collision_prefix=bool(raw.get("collision_prefix", True)),
        sparsity_threshold=float(raw.get("sparsity_threshold", DEFAULT_SPARSITY_THRESHOLD)),
        chunk_rows=int(raw.get("chunk_rows", DEFAULT_CHUNK_ROWS)),
        compression=raw.get("compression"),
    )


def run_flattening(config: FlatteningConfig, out_path, workers: int = 1) -> FlatteningReport:
    needed = [config.join.central] + [d.table for d in config.join.dimensions]
    loaded = {}
    for name in needed:
        src = config.tables[name]
        loaded[name] = load_csv(src.path, src.schema, src.delimiter)
    central = loaded.pop(config.join.central)
    return flatten(central, loaded, config.join, config.slicing, out_path, workers=workers,
                   chunk_rows=config.chunk_rows, collision_prefix=config.collision_prefix,
                   sparsity_threshold=config.sparsity_threshold, compression=config.compression)

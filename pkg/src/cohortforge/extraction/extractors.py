"""Extractors: flat table rows -> standardized events.

Every extractor runs the same pipeline over a flat table:
project the referenced columns, drop rows with nulls in the filter columns,
optionally keep rows whose values are in allow-sets, then conform each row to
zero or more :class:`~cohortforge.model.Event` records.
"""
from __future__ import annotations

import hashlib
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import IntervalError, SchemaError, ValidationError
from ..model import Event, Gender, Patient, day_to_datetime
from ..store.table import DType, Table, drop_null_rows, filter_rows, project

EVENT_FIELDS = ("patient_id", "value", "start", "end", "group_id", "weight")
REQUIRED_FIELDS = ("patient_id", "value", "start")
PATIENT_FIELDS = ("patient_id", "gender", "birth_date", "death_date")


@dataclass(frozen=True)
class ValueFilter:
    column: str
    allow: frozenset

    def __post_init__(self):
        object.__setattr__(self, "allow", frozenset(self.allow))


def _freeze_granularity(g) -> Optional[dict]:
    if g is None:
        return None
    out = {}
    for raw, emitted in g.items():
        codes = (emitted,) if isinstance(emitted, str) else tuple(emitted)
        if not codes or not all(codes):
            raise ValidationError(f"granularity entry for {raw!r} must name at least one code")
        out[str(raw)] = codes
    return out


@dataclass(frozen=True)
class ExtractorSpec:
    """Declarative extractor.

    ``columns`` maps event fields (patient_id, value, start and optionally end,
    group_id, weight) to flat column names. Columns mapped to patient_id, value
    and start are always part of the null filter. ``distinct_on`` names columns
    identifying the source row (for instance a dimension rowid) so that rows
    replicated by other dimensions' fan-out are conformed once.
    """

    name: str
    category: str
    columns: dict
    null_filter: tuple = ()
    value_filters: tuple = ()
    granularity: Optional[dict] = None
    distinct_on: tuple = ()
    on_unmapped: str = "error"
    sources: tuple = ()

    def __post_init__(self):
        if not self.name or not self.category:
            raise ValidationError("extractor name and category must be non-empty")
        cols = dict(self.columns)
        unknown = set(cols) - set(EVENT_FIELDS)
        if unknown:
            raise ValidationError(f"{self.name}: unknown event fields {sorted(unknown)}")
        missing = [f for f in REQUIRED_FIELDS if f not in cols]
        if missing:
            raise ValidationError(f"{self.name}: column map must cover {missing}")
        nf = list(self.null_filter)
        for f in REQUIRED_FIELDS:
            if cols[f] not in nf:
                nf.append(cols[f])
        vfs = tuple(v if isinstance(v, ValueFilter) else ValueFilter(v[0], v[1])
                    for v in self.value_filters)
        if self.on_unmapped not in ("error", "skip"):
            raise ValidationError("on_unmapped must be 'error' or 'skip'")
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "null_filter", tuple(nf))
        object.__setattr__(self, "value_filters", vfs)
        object.__setattr__(self, "granularity", _freeze_granularity(self.granularity))
        object.__setattr__(self, "distinct_on", tuple(self.distinct_on))

    def referenced_columns(self) -> list[str]:
        out = []
        for c in list(self.columns.values()) + list(self.null_filter) + \
                [v.column for v in self.value_filters] + list(self.distinct_on):
            if c not in out:
                out.append(c)
        return out

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "category": self.category,
            "columns": dict(sorted(self.columns.items())),
            "null_filter": list(self.null_filter),
            "value_filters": [{"column": v.column, "allow": sorted(map(str, v.allow))}
                              for v in self.value_filters],
            "granularity": None if self.granularity is None else
            {k: list(v) for k, v in sorted(self.granularity.items())},
            "distinct_on": list(self.distinct_on),
            "on_unmapped": self.on_unmapped,
        }

    def digest(self) -> str:
        return config_digest(self.to_dict())


def config_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


@dataclass
class ExtractionStats:
    rows_in: int = 0
    rows_after_null_filter: int = 0
    rows_after_value_filter: int = 0
    rows_after_distinct: int = 0
    unmapped_skipped: int = 0
    events: int = 0

    def merge(self, other: "ExtractionStats") -> None:
        for k in self.__dataclass_fields__:
            setattr(self, k, getattr(self, k) + getattr(other, k))


@dataclass
class KeyedEvents:
    """Extractor output plus the distinct_on key of each event's source row."""

    events: list = field(default_factory=list)
    keys: Optional[list] = None
    stats: ExtractionStats = field(default_factory=ExtractionStats)


def _distinct_rows(t: Table, cols) -> tuple[Table, list]:
    keys = list(zip(*(t.to_pylist(c) for c in cols)))
    seen = set()
    keep = np.zeros(t.num_rows, dtype=bool)
    kept_keys = []
    for i, k in enumerate(keys):
        if k not in seen:
            seen.add(k)
            keep[i] = True
            kept_keys.append(k)
    return (t if keep.all() else t.mask(keep)), kept_keys


def _as_strings(t: Table, col: str) -> list:
    f = t.field(col)
    vals, valid = t.columns[col], t.validity[col]
    if f.dtype is DType.STRING:
        out = vals.tolist()
    elif f.dtype is DType.DATE:
        out = [str(v) for v in vals.astype("datetime64[D]")]
    else:
        out = [str(v) for v in vals.tolist()]
    if not valid.all():
        out = [v if ok else None for v, ok in zip(out, valid.tolist())]
    return out


def _as_timestamps(t: Table, col: str, spec_name: str) -> list:
    f = t.field(col)
    if f.dtype is not DType.DATE:
        raise SchemaError(f"{spec_name}: column {col!r} mapped to a timestamp must be a date, "
                          f"not {f.dtype.value}")
    vals = t.columns[col].tolist()
    valid = t.validity[col].tolist()
    return [day_to_datetime(v) if ok else None for v, ok in zip(vals, valid)]


def extract_keyed(flat: Table, spec: ExtractorSpec) -> KeyedEvents:
    stats = ExtractionStats(rows_in=flat.num_rows)
    for c in spec.referenced_columns():
        if c not in flat.columns:
            raise SchemaError(f"{spec.name}: column {c!r} not in flat table")
    t = project(flat, spec.referenced_columns())
    t = drop_null_rows(t, spec.null_filter)
    stats.rows_after_null_filter = t.num_rows
    for vf in spec.value_filters:
        t = filter_rows(t, vf.column, vf.allow)
    stats.rows_after_value_filter = t.num_rows
    keys = None
    if spec.distinct_on:
        t, keys = _distinct_rows(t, spec.distinct_on)
    stats.rows_after_distinct = t.num_rows
    cols = spec.columns
    pids = _as_strings(t, cols["patient_id"])
    values = _as_strings(t, cols["value"])
    starts = _as_timestamps(t, cols["start"], spec.name)
    ends = _as_timestamps(t, cols["end"], spec.name) if "end" in cols else [None] * t.num_rows
    groups = _as_strings(t, cols["group_id"]) if "group_id" in cols else [None] * t.num_rows
    if "weight" in cols:
        wf = t.field(cols["weight"])
        if wf.dtype not in (DType.INT64, DType.FLOAT64):
            raise SchemaError(f"{spec.name}: weight column must be numeric")
        wvals = t.columns[cols["weight"]].astype(np.float64)
        if not np.isfinite(wvals[t.validity[cols["weight"]]]).all():
            raise ValidationError(f"{spec.name}: non-finite weight")
        weights = np.where(t.validity[cols["weight"]], wvals, 1.0).tolist()
    else:
        weights = [1.0] * t.num_rows
    category = spec.category
    gran = spec.granularity
    events, out_keys = [], ([] if keys is not None else None)
    for i, (pid, val, s, e, g, w) in enumerate(zip(pids, values, starts, ends, groups, weights)):
        if e is not None and e < s:
            raise IntervalError(f"{spec.name}: end {e.date()} precedes start {s.date()} for patient {pid}")
        if gran is None:
            emitted = (val,)
        else:
            emitted = gran.get(val)
            if emitted is None:
                if spec.on_unmapped == "error":
                    raise ValidationError(f"{spec.name}: code {val!r} missing from granularity map")
                stats.unmapped_skipped += 1
                continue
        for code in emitted:
            events.append(Event(pid, category, g, code, w, s, e))
            if out_keys is not None:
                out_keys.append(keys[i])
    stats.events = len(events)
    return KeyedEvents(events, out_keys, stats)


def run_extractor(flat: Table, spec: ExtractorSpec) -> list[Event]:
    return extract_keyed(flat, spec).events


def merge_keyed(parts) -> KeyedEvents:
    """Concatenate per-chunk outputs in order, keeping the first event set per source key."""
    merged = KeyedEvents()
    seen = set()
    for part in parts:
        merged.stats.merge(part.stats)
        if part.keys is None:
            merged.events.extend(part.events)
            continue
        # a source row fans out to several events with the same key; keep them all
        fresh = set()
        for ev, key in zip(part.events, part.keys):
            if key in seen:
                continue
            fresh.add(key)
            merged.events.append(ev)
        seen |= fresh
    merged.stats.events = len(merged.events)
    return merged


# --- catalog helpers --------------------------------------------------------------

def extract_drug_dispenses(flat: Table, spec: ExtractorSpec, granularity=None, allow=None) -> list[Event]:
    """Drug dispenses at the requested granularity; ``allow`` restricts raw codes."""
    overrides = {}
    if granularity is not None:
        overrides["granularity"] = granularity
    if allow is not None:
        overrides["value_filters"] = tuple(v for v in spec.value_filters
                                           if v.column != spec.columns["value"]) + \
            (ValueFilter(spec.columns["value"], allow),)
    if overrides:
        spec = ExtractorSpec(**{**_spec_kwargs(spec), **overrides})
    return run_extractor(flat, spec)


def _spec_kwargs(spec: ExtractorSpec) -> dict:
    return {k: getattr(spec, k) for k in spec.__dataclass_fields__}


def extract_acts(flat: Table, spec: ExtractorSpec) -> list[Event]:
    if "end" in spec.columns:
        raise ValidationError("acts are punctual; do not map an end column")
    return run_extractor(flat, spec)


DIAGNOSIS_POSITIONS = ("main", "associated", "linked")


def diagnosis_spec(name: str, position: str, columns: dict, position_column: str, **kw) -> ExtractorSpec:
    if position not in DIAGNOSIS_POSITIONS:
        raise ValidationError(f"diagnosis position must be one of {DIAGNOSIS_POSITIONS}")
    filters = tuple(kw.pop("value_filters", ())) + (ValueFilter(position_column, {position}),)
    return ExtractorSpec(name, f"diagnosis_{position}", columns, value_filters=filters, **kw)


def extract_diagnoses(flat: Table, spec: ExtractorSpec) -> list[Event]:
    if not spec.category.startswith("diagnosis_"):
        raise ValidationError("diagnosis extractors must use a diagnosis_<position> category")
    return run_extractor(flat, spec)


def extract_hospital_stays(flat: Table, spec: ExtractorSpec) -> list[Event]:
    if "end" not in spec.columns or "group_id" not in spec.columns:
        raise ValidationError("hospital stays need end and group_id (stay identifier) columns")
    if spec.columns["end"] not in spec.null_filter:
        spec = ExtractorSpec(**{**_spec_kwargs(spec),
                                "null_filter": spec.null_filter + (spec.columns["end"],)})
    return run_extractor(flat, spec)


# --- patients -----------------------------------------------------------------------

@dataclass(frozen=True)
class PatientSpec:
    name: str
    columns: dict
    distinct_on: tuple = ()
    sources: tuple = ()

    def __post_init__(self):
        missing = [f for f in ("patient_id", "gender", "birth_date") if f not in self.columns]
        if missing:
            raise ValidationError(f"{self.name}: demographic columns missing: {missing}")
        object.__setattr__(self, "columns", dict(self.columns))
        object.__setattr__(self, "distinct_on", tuple(self.distinct_on))

    def referenced_columns(self) -> list[str]:
        out = [self.columns[f] for f in PATIENT_FIELDS if f in self.columns]
        return out + [c for c in self.distinct_on if c not in out]

    def to_dict(self) -> dict:
        return {"name": self.name, "columns": dict(sorted(self.columns.items())),
                "distinct_on": list(self.distinct_on)}

    def digest(self) -> str:
        return config_digest(self.to_dict())


@dataclass
class PatientVotes:
    """Per-patient demographic observations."""

    gender: dict = field(default_factory=lambda: defaultdict(Counter))
    birth: dict = field(default_factory=lambda: defaultdict(Counter))
    death: dict = field(default_factory=dict)
    seen: set = field(default_factory=set)
    patients: set = field(default_factory=set)

    def add(self, pid, gender, birth, death) -> None:
        self.patients.add(pid)
        if gender in (1, 2):
            self.gender[pid][gender] += 1
        if birth is not None:
            self.birth[pid][birth] += 1
        if death is not None:
            cur = self.death.get(pid)
            self.death[pid] = death if cur is None else min(cur, death)

    def add_rows(self, rows) -> None:
        """Tally (key, pid, gender, birth, death) rows, skipping keys already seen."""
        for key, pid, g, b, d in rows:
            if key is not None:
                if key in self.seen:
                    continue
                self.seen.add(key)
            self.add(pid, g, b, d)


def patient_rows(flat: Table, spec: PatientSpec) -> list[tuple]:
    """Demographic observations of one flat chunk as (key, pid, gender, birth, death) rows."""
    for c in spec.referenced_columns():
        if c not in flat.columns:
            raise SchemaError(f"{spec.name}: demographic column {c!r} not in flat table")
    cols = spec.columns
    t = project(flat, spec.referenced_columns())
    t = drop_null_rows(t, [cols["patient_id"]])
    keys = [None] * t.num_rows
    if spec.distinct_on:
        t, keys = _distinct_rows(t, spec.distinct_on)
    pids = t.columns[cols["patient_id"]].tolist()
    genders = t.to_pylist(cols["gender"])
    births = np.where(t.validity[cols["birth_date"]], t.columns[cols["birth_date"]], -1).tolist()
    bvalid = t.validity[cols["birth_date"]].tolist()
    if "death_date" in cols:
        deaths = t.columns[cols["death_date"]].tolist()
        dvalid = t.validity[cols["death_date"]].tolist()
    else:
        deaths = dvalid = [False] * t.num_rows
    return [(k, pid, g, b if bok else None, d if dok else None)
            for k, pid, g, b, bok, d, dok in zip(keys, pids, genders, births, bvalid, deaths, dvalid)]


def reconcile_patients(votes: PatientVotes) -> list[Patient]:
    """Majority gender (tie -> unknown), modal birth date (tie -> earliest), earliest death."""
    patients = []
    for pid in sorted(votes.patients):
        births = votes.birth.get(pid)
        if not births:
            continue
        top = max(births.values())
        birth = min(d for d, n in births.items() if n == top)
        g = votes.gender.get(pid, Counter())
        if g[1] > g[2]:
            gender = Gender.MALE
        elif g[2] > g[1]:
            gender = Gender.FEMALE
        else:
            gender = Gender.UNKNOWN
        death = votes.death.get(pid)
        if death is not None and death < birth:
            death = None
        patients.append(Patient(pid, gender, day_to_datetime(birth),
                                None if death is None else day_to_datetime(death)))
    return patients


def extract_patients(flat: Table, spec: PatientSpec) -> list[Patient]:
    votes = PatientVotes()
    votes.add_rows(patient_rows(flat, spec))
    return reconcile_patients(votes)


def weights_finite(events) -> bool:
    return all(math.isfinite(e.weight) for e in events)

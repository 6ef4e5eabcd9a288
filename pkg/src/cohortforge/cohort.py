"""Cohorts: subjects plus their events in a time window, with set algebra and lineage."""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

from .errors import ValidationError
from .extraction.lineage import CohortEntry, code_digest, read_metadata, write_metadata
from .findings import WARNING, Finding
from .model import (Event, Patient, events_from_csv, events_to_csv, format_ts,
                    patients_from_csv, patients_to_csv, to_utc)


@dataclass(eq=False)
class Cohort:
    """Named subjects and events inside ``window``; operations return new cohorts."""

    name: str
    subjects: dict
    events: tuple = ()
    window: Optional[tuple] = None
    origin: Optional[str] = None
    fragments: tuple = ()
    operations: tuple = ()
    findings: tuple = ()

    def __post_init__(self):
        if not isinstance(self.subjects, dict):
            self.subjects = {p.patient_id: p for p in self.subjects}
        self.events = tuple(self.events)
        ids = self.subjects
        stray = [e.patient_id for e in self.events if e.patient_id not in ids]
        if stray:
            raise ValidationError(f"cohort {self.name!r}: events for patients outside the subjects, "
                                  f"e.g. {stray[0]!r}")
        if self.window is None:
            self.window = _span(self.events)
        else:
            self.window = (to_utc(self.window[0]), to_utc(self.window[1]))
        if self.window is not None and self.window[0] > self.window[1]:
            raise ValidationError(f"cohort {self.name!r}: window start after end")
        if self.origin is None:
            self.origin = self.name
        if not self.operations:
            self.operations = (f"load:{self.name}",)

    # accessors ---------------------------------------------------------------
    @property
    def subject_ids(self) -> frozenset:
        return frozenset(self.subjects)

    @property
    def subject_count(self) -> int:
        return len(self.subjects)

    @property
    def event_count(self) -> int:
        return len(self.events)

    def categories(self) -> list[str]:
        return sorted({e.category for e in self.events})

    def describe(self) -> str:
        text = f"Events are {self.origin}."
        if self.fragments:
            text += f" Events contain only subjects with event {self.origin} " + " ".join(self.fragments) + "."
        return text

    def __repr__(self):
        return f"Cohort({self.name!r}, subjects={self.subject_count}, events={self.event_count})"

    # algebra -------------------------------------------------------------------
    def _derive(self, name, subjects, events, window, fragment, op, findings=()):
        return Cohort(name, subjects, events, window, self.origin, self.fragments + (fragment,),
                      self.operations + (op,), self.findings + tuple(findings))

    def intersection(self, other: "Cohort") -> "Cohort":
        keep = {pid: p for pid, p in self.subjects.items() if pid in other.subjects}
        events = tuple(e for e in self.events if e.patient_id in keep)
        window, notes = _intersect_windows(self.window, other.window, self.name, other.name)
        return self._derive(f"{self.name}&{other.name}", keep, events, window,
                            f"with {other.name}", f"intersection:{other.name}", notes)

    def difference(self, other: "Cohort") -> "Cohort":
        keep = {pid: p for pid, p in self.subjects.items() if pid not in other.subjects}
        events = tuple(e for e in self.events if e.patient_id in keep)
        return self._derive(f"{self.name}-{other.name}", keep, events, self.window,
                            f"without subjects with event {other.name}", f"difference:{other.name}")

    def union(self, other: "Cohort") -> "Cohort":
        merged = dict(self.subjects)
        conflicts = 0
        for pid, p in other.subjects.items():
            if pid not in merged:
                merged[pid] = p
            elif merged[pid] != p:
                conflicts += 1
        notes = []
        if conflicts:
            notes.append(Finding(WARNING, "patient_conflict",
                                 f"{conflicts} patients differ between {self.name} and {other.name}; "
                                 f"left operand kept"))
        window = _union_windows(self.window, other.window)
        return self._derive(f"{self.name}|{other.name}", merged, self.events + other.events, window,
                            f"or {other.name}", f"union:{other.name}", notes)

    __and__ = intersection
    __or__ = union
    __sub__ = difference


def _span(events) -> Optional[tuple]:
    if not events:
        return None
    return (min(e.start for e in events), max(e.stop for e in events))


def _intersect_windows(a, b, an: str, bn: str):
    if a is None or b is None:
        return (a or b), ()
    s, e = max(a[0], b[0]), min(a[1], b[1])
    if s > e:
        note = Finding(WARNING, "empty_window",
                       f"windows of {an} and {bn} do not overlap; window set to [{format_ts(s)}, {format_ts(s)}]")
        return (s, s), (note,)
    return (s, e), ()


def _union_windows(a, b):
    if a is None or b is None:
        return a or b
    return (min(a[0], b[0]), max(a[1], b[1]))


def make_cohort(name: str, patients: Iterable[Patient], events: Iterable[Event] = (), window=None) -> Cohort:
    return Cohort(name, {p.patient_id: p for p in patients}, tuple(events), window)


# --- storage -------------------------------------------------------------------------------

def write_cohort(c: Cohort, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    patients_to_csv(c.subjects.values(), d / "subjects.csv")
    events_to_csv(c.events, d / "events.csv")
    (d / "description.txt").write_text(c.describe() + "\n", encoding="utf-8")
    return d


def read_cohort(name: str, directory, window=None) -> Cohort:
    d = Path(directory)
    if not (d / "subjects.csv").exists():
        raise ValidationError(f"cohort {name!r}: storage path {d} has no subjects.csv")
    patients = patients_from_csv(d / "subjects.csv")
    events = events_from_csv(d / "events.csv") if (d / "events.csv").exists() else []
    return make_cohort(name, patients, events, window)


class CohortCollection:
    """Named cohorts backed by a lineage document; cohorts load on first access."""

    def __init__(self, entries: Sequence[CohortEntry] = (), base: Optional[Path] = None,
                 findings: Sequence[Finding] = ()):
        self._entries = {e.name: e for e in entries}
        if len(self._entries) != len(entries):
            raise ValidationError("duplicate cohort names in collection")
        self._base = base or Path(".")
        self._loaded: dict = {}
        self._lock = threading.Lock()
        self.findings = list(findings)

    @classmethod
    def from_metadata(cls, path, check_digest: bool = True) -> "CohortCollection":
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"lineage document {path} does not exist")
        doc = read_metadata(path)
        entries = [CohortEntry.from_dict(d) for d in doc["cohorts"]]
        base = path.parent
        for e in entries:
            if not (base / e.path).is_dir():
                raise ValidationError(f"cohort {e.name!r}: storage path {base / e.path} is missing")
        findings = []
        if check_digest and entries:
            current = code_digest()
            stale = sorted(e.name for e in entries if e.code_digest != current)
            if doc.get("code_digest") != current:
                findings.append(Finding(WARNING, "code_digest_mismatch",
                                        "lineage was produced by a different code version"))
            if stale:
                findings.append(Finding(WARNING, "code_digest_mismatch",
                                        f"cohorts built by a different code version: {', '.join(stale)}"))
        return cls(entries, base, findings)

    from_json = from_metadata

    @property
    def cohorts_names(self) -> set:
        return set(self._entries)

    def entry(self, name: str) -> CohortEntry:
        return self._entries[name]

    def get(self, name: str) -> Cohort:
        if name not in self._entries and name not in self._loaded:
            raise KeyError(f"no cohort named {name!r}")
        with self._lock:
            c = self._loaded.get(name)
            if c is None:
                e = self._entries[name]
                window = tuple(e.window) if e.window else None
                c = read_cohort(name, self._base / e.path, window)
                self._loaded[name] = c
            return c

    def add(self, cohort: Cohort, entry: Optional[CohortEntry] = None) -> None:
        if cohort.name in self._entries:
            raise ValidationError(f"cohort {cohort.name!r} already in collection")
        self._entries[cohort.name] = entry or CohortEntry(cohort.name, "", _category(cohort),
                                                          count=cohort.event_count,
                                                          subjects=cohort.subject_count,
                                                          operations=list(cohort.operations))
        self._loaded[cohort.name] = cohort

    def __contains__(self, name) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._entries))

    def __len__(self) -> int:
        return len(self._entries)


def _category(c: Cohort) -> str:
    cats = c.categories()
    return cats[0] if len(cats) == 1 else ("subjects" if not cats else "mixed")


def save_collection(cohorts: Sequence[Cohort], out_dir, digest: Optional[str] = None) -> dict:
    """Write cohorts under ``out_dir/cohorts`` plus a lineage document recording their op logs."""
    out = Path(out_dir)
    digest = code_digest() if digest is None else digest
    entries = []
    for c in cohorts:
        write_cohort(c, out / "cohorts" / _safe(c.name))
        entries.append(CohortEntry(
            name=c.name, path=f"cohorts/{_safe(c.name)}", category=_category(c), sources=[],
            count=c.event_count, subjects=c.subject_count, code_digest=digest,
            operations=list(c.operations),
            window=[format_ts(c.window[0]), format_ts(c.window[1])] if c.window else None))
    return write_metadata(entries, out / "lineage.meta", digest=digest, unique_categories=False)


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "_-." else "_" for ch in name)


# --- flows -------------------------------------------------------------------------------------

@dataclass
class CohortFlow:
    """Left fold of subject intersections: stage k = ((c0 & c1) & ...) & ck."""

    stages: list
    rationales: list = field(default_factory=list)

    @property
    def steps(self) -> Iterator[Cohort]:
        return iter(self.stages)

    def counts(self) -> list[int]:
        return [s.subject_count for s in self.stages]

    def __len__(self):
        return len(self.stages)


def flow(inputs: Sequence[Cohort], rationales: Optional[Sequence[str]] = None) -> CohortFlow:
    inputs = list(inputs)
    if not inputs:
        raise ValidationError("a cohort flow needs at least one input")
    stages = [inputs[0]]
    for c in inputs[1:]:
        stages.append(stages[-1].intersection(c))
    rats = list(rationales or [])
    if len(rats) > len(stages) - 1:
        raise ValidationError("more rationales than flow transitions")
    rats += [""] * (len(stages) - 1 - len(rats))
    return CohortFlow(stages, rats)


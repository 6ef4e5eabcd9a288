"""Descriptive statistics over cohorts, flowcharts, and the statistic registry.

Reports are plain tables (key tuple -> count or real) serialized as CSV plot
data; rendering is left to consumers.
"""
from __future__ import annotations

import csv
import io
import threading
import weakref
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable, Optional, Sequence

from .cohort import Cohort, CohortCollection, CohortFlow, flow
from .errors import ValidationError
from .model import to_utc


@dataclass(frozen=True)
class StatReport:
    stat_name: str
    cohort_name: str
    key_names: tuple
    rows: tuple
    render_hints: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        keys = [k for k, _ in self.rows]
        if len(set(keys)) != len(keys):
            raise ValidationError(f"{self.stat_name}: duplicate report keys")
        if any(v < 0 for _, v in self.rows):
            raise ValidationError(f"{self.stat_name}: negative count")

    @property
    def total(self):
        return sum(v for _, v in self.rows)

    def as_dict(self) -> dict:
        return dict(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(list(self.key_names) + ["value"])
        for key, value in self.rows:
            w.writerow(list(key) + [value])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"statistic: {self.stat_name}", f"cohort: {self.cohort_name}",
                 f"rows: {len(self.rows)}", f"total: {self.total}"]
        for k, v in sorted(self.render_hints.items()):
            lines.append(f"{k}: {v}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class _Stat:
    name: str
    fn: Callable
    key_names: tuple
    kind: str
    hints: dict


_REGISTRY: dict = {}
_REGISTRY_LOCK = threading.Lock()
_CACHE: dict = {}
_CACHE_LOCK = threading.Lock()
COMPUTE_COUNTS: Counter = Counter()


def register_stat(name: str, fn: Callable, key_names: Sequence[str] = ("key",), kind: str = "event",
                  hints: Optional[dict] = None) -> None:
    """Register ``fn(cohort, **params) -> iterable of (key tuple, value)`` under ``name``."""
    if kind not in ("event", "patient", "other"):
        raise ValidationError("kind must be event, patient or other")
    with _REGISTRY_LOCK:
        if name in _REGISTRY:
            raise ValidationError(f"statistic {name!r} is already registered")
        _REGISTRY[name] = _Stat(name, fn, tuple(key_names), kind, dict(hints or {}))


def unregister_stat(name: str) -> None:
    with _REGISTRY_LOCK:
        _REGISTRY.pop(name, None)
    clear_cache()


def registered_stats() -> list[str]:
    return sorted(_REGISTRY)


def clear_cache() -> None:
    with _CACHE_LOCK:
        _CACHE.clear()


def _freeze(params: dict):
    return tuple(sorted((k, repr(v)) for k, v in params.items()))


def _evict(key):
    with _CACHE_LOCK:
        _CACHE.pop(key, None)


def event_stats(c: Cohort, which: str, **params) -> StatReport:
    """Compute (or fetch from the per-cohort cache) the registered statistic ``which``."""
    stat = _REGISTRY.get(which)
    if stat is None:
        raise ValidationError(f"unknown statistic {which!r}; known: {', '.join(registered_stats())}")
    key = (id(c), which, _freeze(params))
    with _CACHE_LOCK:
        hit = _CACHE.get(key)
        if hit is not None and hit[0]() is c:
            return hit[1]
    COMPUTE_COUNTS[which] += 1
    rows = tuple(sorted(((tuple(k), v) for k, v in stat.fn(c, **params)), key=lambda kv: _sort_key(kv[0])))
    report = StatReport(which, c.name, stat.key_names, rows, dict(stat.hints))
    with _CACHE_LOCK:
        _CACHE[key] = (weakref.ref(c, lambda _r, k=key: _evict(k)), report)
    return report


def _sort_key(key: tuple):
    return tuple((0, v, "") if isinstance(v, (int, float)) else (1, 0, str(v)) for v in key)


# --- built-in statistics -------------------------------------------------------------------

def _age(birth: datetime, ref: datetime) -> int:
    b, r = birth.date(), ref.date()
    return r.year - b.year - ((r.month, r.day) < (b.month, b.day))


def _reference(c: Cohort, reference_date) -> datetime:
    if reference_date is not None:
        return to_utc(reference_date)
    if c.window is None:
        raise ValidationError(f"cohort {c.name!r} has no window; pass reference_date")
    return c.window[0]


def _gender_age(c: Cohort, reference_date=None, bucket_years: int = 5):
    if bucket_years <= 0:
        raise ValidationError("bucket_years must be positive")
    if not c.subjects:
        return []
    ref = _reference(c, reference_date)
    counts = Counter()
    for p in c.subjects.values():
        lo = (_age(p.birth_date, ref) // bucket_years) * bucket_years
        counts[(int(p.gender), lo)] += 1
    return counts.items()


def _gender(c: Cohort):
    return Counter((int(p.gender),) for p in c.subjects.values()).items()


def _events_per_subject(c: Cohort):
    per = Counter(e.patient_id for e in c.events)
    return Counter((per.get(pid, 0),) for pid in c.subjects).items()


def _distinct_codes(c: Cohort):
    codes = defaultdict(set)
    for e in c.events:
        codes[e.category].add(e.value)
    return [((cat,), len(v)) for cat, v in codes.items()]


def _events_per_month(c: Cohort):
    return Counter((e.start.strftime("%Y-%m"),) for e in c.events).items()


def _duration_histogram(c: Cohort, bucket_days: int = 30):
    if bucket_days <= 0:
        raise ValidationError("bucket_days must be positive")
    out = Counter()
    for e in c.events:
        days = (e.stop - e.start).days
        out[((days // bucket_days) * bucket_days,)] += 1
    return out.items()


def _code_frequency(c: Cohort):
    return Counter((e.category, e.value) for e in c.events).items()


def _subjects_per_code(c: Cohort):
    subjects = defaultdict(set)
    for e in c.events:
        subjects[(e.category, e.value)].add(e.patient_id)
    return [(k, len(v)) for k, v in subjects.items()]


BUILTIN_STATS = {
    "gender_age_bucket": (_gender_age, ("gender", "age_bucket_start"), "patient",
                          {"x": "age bucket start (years)", "y": "subjects", "hue": "gender"}),
    "gender": (_gender, ("gender",), "patient", {"x": "gender", "y": "subjects"}),
    "events_per_subject": (_events_per_subject, ("events",), "patient",
                           {"x": "events per subject", "y": "subjects"}),
    "distinct_codes": (_distinct_codes, ("category",), "other", {"x": "category", "y": "distinct codes"}),
    "events_per_month": (_events_per_month, ("month",), "event", {"x": "month", "y": "events"}),
    "duration_histogram": (_duration_histogram, ("duration_days",), "event",
                           {"x": "duration (days, bucket start)", "y": "events"}),
    "code_frequency": (_code_frequency, ("category", "code"), "event", {"x": "code", "y": "events"}),
    "subjects_per_code": (_subjects_per_code, ("category", "code"), "other",
                          {"x": "code", "y": "subjects"}),
}

for _name, (_fn, _keys, _kind, _hints) in BUILTIN_STATS.items():
    register_stat(_name, _fn, _keys, _kind, _hints)


def stat_kind(name: str) -> str:
    return _REGISTRY[name].kind


def distribution_by_gender_age_bucket(cohort: Cohort, reference_date=None, bucket_years: int = 5) -> StatReport:
    return event_stats(cohort, "gender_age_bucket", reference_date=reference_date, bucket_years=bucket_years)



# --- flowcharts -----------------------------------------------------------------------------------

@dataclass(frozen=True)
class Flowchart:
    stages: tuple
    transitions: tuple

    def __post_init__(self):
        if not self.stages:
            raise ValidationError("a flowchart needs at least one stage")
        if len(self.transitions) != len(self.stages) - 1:
            raise ValidationError("one transition per pair of consecutive stages")
        for (_, prev), (_, cur), (dropped, _) in zip(self.stages, self.stages[1:], self.transitions):
            if dropped != prev - cur or dropped < 0:
                raise ValidationError("flowchart drops must equal non-negative count differences")

    def to_text(self) -> str:
        lines = []
        for i, (name, count) in enumerate(self.stages):
            dropped, rationale = (0, "") if i == 0 else self.transitions[i - 1]
            lines.append(f"{name}\t{count}\t{dropped}\t{rationale}")
        return "\n".join(lines) + "\n"


def flowchart_from_flow(f: CohortFlow, labels: Optional[Sequence[str]] = None) -> Flowchart:
    names = list(labels) if labels else [s.name for s in f.stages]
    if len(names) != len(f.stages):
        raise ValidationError("one label per flow stage")
    counts = f.counts()
    stages = tuple(zip(names, counts))
    rats = list(f.rationales) + [""] * (len(counts) - 1 - len(f.rationales))
    transitions = tuple((a - b, r) for a, b, r in zip(counts, counts[1:], rats))
    return Flowchart(stages, transitions)


def flowchart_from_metadata(doc, names: Sequence[str], rationales: Optional[Sequence[str]] = None) -> Flowchart:
    """Fold the named cohorts of a lineage document (path or collection) into a flowchart."""
    cc = doc if isinstance(doc, CohortCollection) else CohortCollection.from_metadata(Path(doc))
    if not names:
        raise ValidationError("a flowchart needs at least one stage")
    f = flow([cc.get(n) for n in names], rationales)
    return flowchart_from_flow(f, labels=names)


def write_report(report: StatReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{_safe(report.cohort_name)}__{report.stat_name}.csv"
    path.write_text(report.to_csv(), encoding="utf-8")
    return path


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "_-." else "_" for ch in name)


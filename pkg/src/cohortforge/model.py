"""Patients, events and the time conventions shared by every pipeline stage.

Timestamps are timezone-aware ``datetime`` objects in UTC. Calendar fields
(birth and death dates, day-grained claim dates) sit at UTC midnight.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from collections.abc import Iterable
from datetime import date, datetime, time, timedelta, timezone
from pathlib import Path
from typing import NamedTuple, Optional

from .errors import IntervalError, ValidationError

UTC = timezone.utc
EPOCH = datetime(1970, 1, 1, tzinfo=UTC)
EPOCH_DATE = date(1970, 1, 1)

EVENT_FIELDS = ("patientID", "category", "groupID", "value", "weight", "start", "end")
PATIENT_FIELDS = ("patientID", "gender", "birthDate", "deathDate")


class Gender(enum.IntEnum):
    UNKNOWN = 0
    MALE = 1
    FEMALE = 2


def to_utc(value) -> datetime:
    """Normalize a date, naive datetime (read as UTC), zoned datetime or ISO string to UTC."""
    if isinstance(value, str):
        try:
            value = date.fromisoformat(value) if len(value) == 10 else \
                datetime.fromisoformat(value.replace("Z", "+00:00"))
        except ValueError:
            raise ValidationError(f"not an ISO date: {value!r}") from None
    if isinstance(value, datetime):
        if value.tzinfo is None:
            return value.replace(tzinfo=UTC)
        return value.astimezone(UTC)
    if isinstance(value, date):
        return datetime.combine(value, time(), tzinfo=UTC)
    raise ValidationError(f"not a date or datetime: {value!r}")


_DAY_CACHE: dict[int, datetime] = {}


def day_to_datetime(days: int) -> datetime:
    """UTC midnight ``days`` days after 1970-01-01."""
    dt = _DAY_CACHE.get(days)
    if dt is None:
        dt = EPOCH + timedelta(days=int(days))
        if len(_DAY_CACHE) < 200_000:
            _DAY_CACHE[days] = dt
    return dt


def date_to_days(value) -> int:
    if isinstance(value, datetime):
        value = to_utc(value).date()
    return (value - EPOCH_DATE).days


def is_utc(ts: datetime) -> bool:
    return ts.tzinfo is not None and ts.utcoffset() == timedelta(0)


class Patient(NamedTuple):
    patient_id: str
    gender: Gender
    birth_date: datetime
    death_date: Optional[datetime] = None


def make_patient(patient_id, gender, birth_date, death_date=None) -> Patient:
    if not patient_id:
        raise ValidationError("patientID must be non-empty")
    birth = to_utc(birth_date)
    death = None if death_date is None else to_utc(death_date)
    if death is not None and death < birth:
        raise IntervalError(f"deathDate {death} precedes birthDate {birth} for {patient_id}")
    return Patient(str(patient_id), Gender(int(gender)), birth, death)


class Event(NamedTuple):
    """A punctual (``end is None``) or continuous medical event.

    Plain construction does not validate; use :func:`make_punctual`,
    :func:`make_continuous` or :func:`validate_event` for checked records.
    """

    patient_id: str
    category: str
    group_id: Optional[str]
    value: str
    weight: float
    start: datetime
    end: Optional[datetime] = None

    @property
    def is_punctual(self) -> bool:
        return self.end is None

    @property
    def stop(self) -> datetime:
        return self.start if self.end is None else self.end


def validate_event(e: Event) -> Event:
    if not e.patient_id:
        raise ValidationError("patientID must be non-empty")
    if not e.category:
        raise ValidationError("category must be non-empty")
    if not e.value:
        raise ValidationError("value must be non-empty")
    if not isinstance(e.weight, (int, float)) or not math.isfinite(e.weight):
        raise ValidationError(f"weight must be finite, got {e.weight!r}")
    if e.end is not None and e.end < e.start:
        raise IntervalError(f"event end {e.end} precedes start {e.start}")
    return e


def make_punctual(patient_id, category, value, weight=1.0, start=None, group_id=None) -> Event:
    if start is None:
        raise ValidationError("start is required")
    e = Event(patient_id, category, group_id, value, float(weight), to_utc(start), None)
    return validate_event(e)


def make_continuous(patient_id, category, value, weight=1.0, start=None, end=None,
                    group_id=None) -> Event:
    if start is None or end is None:
        raise ValidationError("start and end are required for a continuous event")
    e = Event(patient_id, category, group_id, value, float(weight), to_utc(start), to_utc(end))
    return validate_event(e)


def overlaps(e1: Event, e2: Event) -> bool:
    """Closed-interval intersection test; punctual events are [start, start]."""
    return e1.start <= e2.stop and e2.start <= e1.stop


def canonical_key(e: Event):
    # (patientID, category, start, value, groupID) then end and weight so that
    # sorting is total even when those leading fields tie
    return (e.patient_id, e.category, e.start, e.value, e.group_id or "",
            e.stop, e.end is not None, e.weight)


def canonical_sort(events: Iterable[Event]) -> list[Event]:
    return sorted(events, key=canonical_key)


# --- serialization -----------------------------------------------------------

def format_ts(ts: Optional[datetime]) -> str:
    if ts is None:
        return ""
    if ts.tzinfo is not None and ts.utcoffset() != timedelta(0):
        ts = ts.astimezone(UTC)
    if ts.hour == 0 and ts.minute == 0 and ts.second == 0 and ts.microsecond == 0:
        return ts.strftime("%Y-%m-%d")
    return ts.replace(tzinfo=UTC).isoformat()


def parse_ts(text: str) -> Optional[datetime]:
    if not text:
        return None
    if len(text) == 10:
        return datetime.combine(date.fromisoformat(text), time(), tzinfo=UTC)
    return to_utc(datetime.fromisoformat(text.replace("Z", "+00:00")))


def event_row(e: Event) -> list[str]:
    return [e.patient_id, e.category, e.group_id or "", e.value, repr(float(e.weight)),
            format_ts(e.start), format_ts(e.end)]


def events_to_csv(events: Iterable[Event], path=None, sort: bool = True) -> str:
    """Write events in the canonical CSV layout; returns the text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(EVENT_FIELDS)
    w.writerows(event_row(e) for e in (canonical_sort(events) if sort else events))
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def events_from_csv(path) -> list[Event]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(header) != EVENT_FIELDS:
            raise ValidationError(f"unexpected event header {header}")
        return [Event(r[0], r[1], r[2] or None, r[3], float(r[4]), parse_ts(r[5]), parse_ts(r[6]))
                for r in reader]


def patients_to_csv(patients: Iterable[Patient], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(PATIENT_FIELDS)
    for p in sorted(patients, key=lambda p: p.patient_id):
        w.writerow([p.patient_id, int(p.gender), format_ts(p.birth_date), format_ts(p.death_date)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def patients_from_csv(path) -> list[Patient]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(header) != PATIENT_FIELDS:
            raise ValidationError(f"unexpected patient header {header}")
        return [Patient(r[0], Gender(int(r[1])), parse_ts(r[2]), parse_ts(r[3])) for r in reader]

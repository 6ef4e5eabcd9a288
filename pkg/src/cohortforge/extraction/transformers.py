"""Transformers: per-patient event collections -> derived events.

All date arithmetic is done on whole days (UTC). Intervals are closed on both
ends, so an event ending on the follow-up end date is inside follow-up.
"""
from __future__ import annotations

import calendar
from collections import defaultdict
from dataclasses import dataclass
from datetime import date, datetime
from typing import Iterable, Optional

from ..errors import ValidationError
from ..model import EPOCH, EPOCH_DATE, Event, Patient, day_to_datetime, to_utc


def day_of(ts: datetime) -> int:
    return (ts - EPOCH).days


def as_day(value) -> int:
    if isinstance(value, int):
        return value
    return day_of(to_utc(value))


def add_months(day: int, months: int) -> int:
    d = EPOCH_DATE.fromordinal(EPOCH_DATE.toordinal() + day)
    m = d.month - 1 + months
    y = d.year + m // 12
    m = m % 12 + 1
    dd = min(d.day, calendar.monthrange(y, m)[1])
    return (date(y, m, dd) - EPOCH_DATE).days


def by_patient(events: Iterable[Event]) -> dict:
    out = defaultdict(list)
    for e in events:
        out[e.patient_id].append(e)
    return out


# --- observation period -----------------------------------------------------------

def transform_observation_period(events: Iterable[Event], study_start, study_end) -> list[Event]:
    """[max(study start, first event), study end] for every patient with events."""
    s0, s1 = as_day(study_start), as_day(study_end)
    if s0 > s1:
        raise ValidationError("study start must not be after study end")
    first = {}
    for e in events:
        d = day_of(e.start)
        cur = first.get(e.patient_id)
        if cur is None or d < cur:
            first[e.patient_id] = d
    out = []
    for pid in sorted(first):
        start = max(s0, first[pid])
        if start > s1:
            continue
        out.append(Event(pid, "observation_period", None, "observation_period", 1.0,
                         day_to_datetime(start), day_to_datetime(s1)))
    return out


# --- trackloss -------------------------------------------------------------------------

@dataclass(frozen=True)
class TracklossSpec:
    study_end: object
    gap_months: int = 4
    purchase_duration: int = 30

    def __post_init__(self):
        if self.gap_months <= 0:
            raise ValidationError("gap_months must be positive")
        if self.purchase_duration <= 0:
            raise ValidationError("purchase_duration must be positive")


def transform_trackloss(patients: Iterable[Patient], dispenses: Iterable[Event],
                        spec: TracklossSpec) -> list[Event]:
    """Punctual trackloss at the end of coverage preceding the first gap longer than gap_months.

    Coverage of a dispense runs ``purchase_duration`` days from its date; the
    last coverage end is compared against the study end.
    """
    known = {p.patient_id for p in patients}
    end = as_day(spec.study_end)
    days = defaultdict(set)
    for e in dispenses:
        if e.patient_id in known:
            days[e.patient_id].add(day_of(e.start))
    out = []
    for pid in sorted(days):
        ds = sorted(days[pid])
        covered = None
        for i, d in enumerate(ds):
            covered = d + spec.purchase_duration if covered is None else max(covered, d + spec.purchase_duration)
            nxt = ds[i + 1] if i + 1 < len(ds) else end
            if nxt > add_months(covered, spec.gap_months):
                if covered <= end:
                    out.append(Event(pid, "trackloss", None, "trackloss", 1.0, day_to_datetime(covered)))
                break
    return out


# --- follow-up -----------------------------------------------------------------------------

@dataclass(frozen=True)
class FollowUpSpec:
    delay_days: int = 0

    def __post_init__(self):
        if self.delay_days < 0:
            raise ValidationError("delay_days must be non-negative")


def transform_followup(patients: Iterable[Patient], observations: Iterable[Event],
                       tracklosses: Iterable[Event], spec: FollowUpSpec = FollowUpSpec()) -> list[Event]:
    """[observation start + delay, earliest of observation end, death, trackloss]."""
    people = {p.patient_id: p for p in patients}
    obs = {}
    for e in observations:
        if e.patient_id in obs:
            raise ValidationError(f"patient {e.patient_id} has several observation periods")
        obs[e.patient_id] = e
    lost = {}
    for e in tracklosses:
        d = day_of(e.start)
        lost[e.patient_id] = min(d, lost.get(e.patient_id, d))
    out = []
    for pid in sorted(obs):
        p = people.get(pid)
        if p is None:
            continue
        o = obs[pid]
        start = day_of(o.start) + spec.delay_days
        stop = day_of(o.stop)
        if p.death_date is not None:
            stop = min(stop, day_of(p.death_date))
        if pid in lost:
            stop = min(stop, lost[pid])
        if start <= stop:
            out.append(Event(pid, "follow_up", None, "follow_up", 1.0,
                             day_to_datetime(start), day_to_datetime(stop)))
    return out


# --- exposures -------------------------------------------------------------------------------

@dataclass(frozen=True)
class ExposureSpec:
    purchase_duration: int = 30
    gap_tolerance: int = 30
    strategy: str = "limited"
    min_purchases: int = 1

    def __post_init__(self):
        if self.purchase_duration <= 0:
            raise ValidationError("purchase_duration must be positive")
        if self.gap_tolerance < 0:
            raise ValidationError("gap_tolerance must be non-negative")
        if self.strategy not in ("limited", "unlimited"):
            raise ValidationError("strategy must be 'limited' or 'unlimited'")
        if self.min_purchases < 1:
            raise ValidationError("min_purchases must be at least 1")


def merge_dispenses(days: list[int], duration: int, gap_tolerance: int) -> list[tuple[int, int, int]]:
    """Merge sorted dispense days into (start, end, n_dispenses) covered periods.

    A dispense covers [day, day + duration]. Two periods merge when at most
    ``gap_tolerance`` whole uncovered days separate them.
    """
    out = []
    cur_s = cur_e = None
    n = 0
    for d in days:
        if cur_s is not None and d - cur_e - 1 <= gap_tolerance:
            cur_e = max(cur_e, d + duration)
            n += 1
            continue
        if cur_s is not None:
            out.append((cur_s, cur_e, n))
        cur_s, cur_e, n = d, d + duration, 1
    if cur_s is not None:
        out.append((cur_s, cur_e, n))
    return out


def _follow_up_bounds(followups: Iterable[Event]) -> dict:
    bounds = {}
    for f in followups:
        if f.patient_id in bounds:
            raise ValidationError(f"patient {f.patient_id} has several follow-up periods")
        bounds[f.patient_id] = (day_of(f.start), day_of(f.stop))
    return bounds


def dispenses_without_follow_up(dispenses: Iterable[Event], followups: Iterable[Event]) -> int:
    fu = _follow_up_bounds(followups)
    return sum(1 for e in dispenses if e.patient_id not in fu)


def transform_exposure(dispenses: Iterable[Event], followups: Iterable[Event],
                       spec: ExposureSpec = ExposureSpec()) -> list[Event]:
    fu = _follow_up_bounds(followups)
    groups = defaultdict(list)
    for e in dispenses:
        if e.patient_id in fu:
            groups[(e.patient_id, e.value)].append(day_of(e.start))
    out = []
    for (pid, drug) in sorted(groups):
        days = sorted(groups[(pid, drug)])
        fs, fe = fu[pid]
        if spec.strategy == "unlimited":
            inside = [d for d in days if fs <= d <= fe]
            if len(inside) >= spec.min_purchases:
                out.append(Event(pid, "exposure", None, drug, 1.0,
                                 day_to_datetime(inside[0]), day_to_datetime(fe)))
            continue
        for s, e, n in merge_dispenses(days, spec.purchase_duration, spec.gap_tolerance):
            if n < spec.min_purchases:
                continue
            s, e = max(s, fs), min(e, fe)
            if s <= e:
                out.append(Event(pid, "exposure", None, drug, 1.0, day_to_datetime(s), day_to_datetime(e)))
    return out


# --- outcomes ------------------------------------------------------------------------------------

@dataclass(frozen=True)
class OutcomeSite:
    acts: frozenset
    diagnoses: frozenset

    def __post_init__(self):
        object.__setattr__(self, "acts", frozenset(self.acts))
        object.__setattr__(self, "diagnoses", frozenset(self.diagnoses))


def _sites(code_config: dict) -> dict:
    if not code_config:
        raise ValidationError("outcome code configuration is empty")
    out = {}
    for site, cfg in code_config.items():
        if isinstance(cfg, OutcomeSite):
            out[site] = cfg
        else:
            out[site] = OutcomeSite(cfg.get("acts", ()), cfg.get("diagnoses", ()))
        if not out[site].acts or not out[site].diagnoses:
            raise ValidationError(f"outcome site {site!r} needs both act and diagnosis codes")
    return out


def transform_outcome(acts: Iterable[Event], diagnoses: Iterable[Event], code_config: dict,
                      main_category: str = "diagnosis_main") -> list[Event]:
    """One outcome per (patient, site, stay) or (patient, site, day) co-occurrence.

    A qualifying act matches a qualifying main diagnosis of the same stay
    (same group id); an act without a stay matches a main diagnosis recorded
    the same calendar day. The outcome is dated at the earliest start among
    the matched records.
    """
    sites = _sites(code_config)
    by_group = defaultdict(list)
    by_day = defaultdict(list)
    for d in diagnoses:
        if d.category != main_category:
            continue
        if d.group_id is not None:
            by_group[(d.patient_id, d.group_id)].append(d)
        by_day[(d.patient_id, day_of(d.start))].append(d)
    found = {}
    for a in acts:
        for site, cfg in sites.items():
            if a.value not in cfg.acts:
                continue
            if a.group_id is not None:
                cands = by_group.get((a.patient_id, a.group_id), ())
                key = (a.patient_id, site, "stay", a.group_id)
            else:
                day = day_of(a.start)
                cands = by_day.get((a.patient_id, day), ())
                key = (a.patient_id, site, "day", day)
            for d in cands:
                if d.value in cfg.diagnoses:
                    t = min(a.start, d.start)
                    if key not in found or t < found[key]:
                        found[key] = t
    out = []
    for (pid, site, kind, ref), t in sorted(found.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[1])):
        out.append(Event(pid, "outcome", ref if kind == "stay" else None, site, 1.0, t))
    return out


# --- prevalent users --------------------------------------------------------------------------

def filter_prevalent_users(dispenses: Iterable[Event], cutoff, drugs: Optional[Iterable[str]] = None) -> set:
    """Patients whose earliest qualifying dispense is strictly before ``cutoff``."""
    cut = to_utc(cutoff)
    allowed = None if drugs is None else set(drugs)
    first = {}
    for e in dispenses:
        if allowed is not None and e.value not in allowed:
            continue
        cur = first.get(e.patient_id)
        if cur is None or e.start < cur:
            first[e.patient_id] = e.start
    return {pid for pid, t in first.items() if t < cut}

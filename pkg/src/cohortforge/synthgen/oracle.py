"""Independent nested-loop oracle over the normalized synthetic tables.

Reads the CSV files with the csv module, walks each patient's claims and
their matching dimension rows, and applies extractor and transformer rules
with deliberately naive code (day-by-day rasters, pairwise scans). Nothing
here imports the flattening, store or extraction code paths.
"""
from __future__ import annotations

import calendar
import csv
from collections import defaultdict
from dataclasses import dataclass
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Optional

import yaml

from ..model import Event, Gender, Patient

UTC = timezone.utc
POSITIONS = ("main", "associated", "linked")


def _ts(text: str) -> datetime:
    return datetime.combine(date.fromisoformat(text), datetime.min.time(), tzinfo=UTC)


def _read(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _by(rows: list[dict], key: str) -> dict:
    out = defaultdict(list)
    for r in rows:
        out[r[key]].append(r)
    return out


@dataclass
class OracleSpec:
    drug_allow: Optional[set]
    drug_classes: dict
    outcome_sites: dict


def load_oracle_spec(data_dir) -> OracleSpec:
    d = Path(data_dir)
    allow = {r["code"] for r in _read(d / "codes" / "drug_allow.csv")}
    classes = defaultdict(list)
    for r in _read(d / "codes" / "drug_classes.csv"):
        classes[r["raw"]].append(r["code"])
    sites = yaml.safe_load((d / "codes" / "outcome_sites.yaml").read_text(encoding="utf-8"))
    return OracleSpec(allow, dict(classes), sites)


def oracle_extract(data_dir, spec: Optional[OracleSpec] = None) -> tuple[list, dict]:
    """Patients and per-extractor events straight from the normalized CSVs."""
    d = Path(data_dir)
    spec = spec or load_oracle_spec(d)
    claims = _read(d / "claims.csv")
    expected = {"flow_id", "patient_id", "claim_date", "gender", "stay_id"}
    if claims and not expected <= set(claims[0]):
        raise ValueError(f"claims.csv lacks columns {sorted(expected - set(claims[0]))}")
    people = {r["patient_id"]: r for r in _read(d / "patients.csv")}
    drugs = _by(_read(d / "drugs.csv"), "flow_id")
    acts = _by(_read(d / "acts.csv"), "flow_id")
    stays = _by(_read(d / "stays.csv"), "stay_id")
    diags = _by(_read(d / "diagnoses.csv"), "stay_id")

    per_patient = defaultdict(list)
    for c in claims:
        if c["patient_id"]:
            per_patient[c["patient_id"]].append(c)

    events = {"drug_purchases": [], "acts": [], "extract_hospital_stays": []}
    for pos in POSITIONS:
        events[f"diagnoses_{pos}"] = []
    patients = []
    for pid in sorted(per_patient):
        genders = [int(c["gender"]) for c in per_patient[pid] if c["gender"]]
        m, f = genders.count(1), genders.count(2)
        person = people.get(pid)
        if person is not None:
            patients.append(Patient(pid, Gender.MALE if m > f else Gender.FEMALE if f > m else Gender.UNKNOWN,
                                    _ts(person["birth_date"]),
                                    _ts(person["death_date"]) if person["death_date"] else None))
        for c in per_patient[pid]:
            for dr in drugs.get(c["flow_id"], ()):
                code = dr["drug_code"]
                if not code or not c["claim_date"]:
                    continue
                if spec.drug_allow is not None and code not in spec.drug_allow:
                    continue
                for cls in spec.drug_classes[code]:
                    events["drug_purchases"].append(Event(pid, "drug_purchase", None, cls, float(dr["boxes"]),
                                                          _ts(c["claim_date"])))
            for a in acts.get(c["flow_id"], ()):
                if a["act_code"] and a["act_date"]:
                    events["acts"].append(Event(pid, "medical_act", c["stay_id"] or None, a["act_code"], 1.0,
                                                _ts(a["act_date"])))
            if not c["stay_id"]:
                continue
            for s in stays.get(c["stay_id"], ()):
                events["extract_hospital_stays"].append(Event(pid, "hospital_stay", c["stay_id"], s["drg_code"],
                                                              1.0, _ts(s["stay_start"]), _ts(s["stay_end"])))
                for dg in diags.get(c["stay_id"], ()):
                    pos = dg["diag_position"]
                    events[f"diagnoses_{pos}"].append(Event(pid, f"diagnosis_{pos}", c["stay_id"], dg["diag_code"],
                                                            1.0, _ts(s["stay_start"])))
    return patients, events


# --- transformer oracles ---------------------------------------------------------------

def _d(ts: datetime) -> date:
    return ts.astimezone(UTC).date()


def _add_months(d: date, months: int) -> date:
    m = d.month - 1 + months
    y = d.year + m // 12
    m = m % 12 + 1
    return date(y, m, min(d.day, calendar.monthrange(y, m)[1]))


def _runs(days: set) -> list[tuple[date, date]]:
    """Maximal runs of consecutive days."""
    out = []
    for d in sorted(days):
        if out and d == out[-1][1] + timedelta(days=1):
            out[-1] = (out[-1][0], d)
        else:
            out.append((d, d))
    return out


def _cover(start: date, duration: int) -> set:
    return {start + timedelta(days=k) for k in range(duration + 1)}


def oracle_observation_period(events, study_start: date, study_end: date) -> list[Event]:
    out = []
    first = {}
    for e in events:
        first[e.patient_id] = min(first.get(e.patient_id, _d(e.start)), _d(e.start))
    for pid, d in first.items():
        s = max(d, study_start)
        if s <= study_end:
            out.append(Event(pid, "observation_period", None, "observation_period", 1.0, _ts(s.isoformat()),
                             _ts(study_end.isoformat())))
    return out


def oracle_trackloss(patients, dispenses, study_end: date, gap_months: int, duration: int) -> list[Event]:
    """Raster the union of covered days; trackloss ends the first run followed by a long gap."""
    known = {p.patient_id for p in patients}
    covered = defaultdict(set)
    for e in dispenses:
        if e.patient_id in known:
            covered[e.patient_id] |= _cover(_d(e.start), duration)
    out = []
    for pid, days in covered.items():
        runs = _runs(days)
        for i, (_, end) in enumerate(runs):
            nxt = runs[i + 1][0] if i + 1 < len(runs) else study_end
            if nxt > _add_months(end, gap_months):
                if end <= study_end:
                    out.append(Event(pid, "trackloss", None, "trackloss", 1.0, _ts(end.isoformat())))
                break
    return out


def oracle_followup(patients, observations, tracklosses, delay_days: int) -> list[Event]:
    people = {p.patient_id: p for p in patients}
    lost = defaultdict(list)
    for t in tracklosses:
        lost[t.patient_id].append(_d(t.start))
    out = []
    for o in observations:
        p = people.get(o.patient_id)
        if p is None:
            continue
        ends = [_d(o.end)] + lost[o.patient_id]
        if p.death_date is not None:
            ends.append(_d(p.death_date))
        s, e = _d(o.start) + timedelta(days=delay_days), min(ends)
        if s <= e:
            out.append(Event(o.patient_id, "follow_up", None, "follow_up", 1.0, _ts(s.isoformat()),
                             _ts(e.isoformat())))
    return out


def oracle_exposure(dispenses, followups, duration: int, gap_tolerance: int, strategy: str,
                    min_purchases: int) -> list[Event]:
    """Day raster of covered days, gaps of at most ``gap_tolerance`` days filled, then re-segmented."""
    fu = {f.patient_id: (_d(f.start), _d(f.end)) for f in followups}
    groups = defaultdict(list)
    for e in dispenses:
        if e.patient_id in fu:
            groups[(e.patient_id, e.value)].append(_d(e.start))
    out = []
    for (pid, drug), starts in groups.items():
        fs, fe = fu[pid]
        if strategy == "unlimited":
            inside = sorted(s for s in starts if fs <= s <= fe)
            if len(inside) >= min_purchases:
                out.append(Event(pid, "exposure", None, drug, 1.0, _ts(inside[0].isoformat()),
                                 _ts(fe.isoformat())))
            continue
        days = set()
        for s in starts:
            days |= _cover(s, duration)
        runs = _runs(days)
        filled = set(days)
        for (_, a), (b, _) in zip(runs, runs[1:]):
            if (b - a).days - 1 <= gap_tolerance:
                filled |= {a + timedelta(days=k) for k in range(1, (b - a).days)}
        for s, e in _runs(filled):
            n = sum(1 for x in starts if s <= x <= e)
            if n < min_purchases:
                continue
            cs, ce = max(s, fs), min(e, fe)
            if cs <= ce:
                out.append(Event(pid, "exposure", None, drug, 1.0, _ts(cs.isoformat()), _ts(ce.isoformat())))
    return out


def oracle_outcome(acts, diagnoses, sites: dict, main_category: str = "diagnosis_main") -> list[Event]:
    found = {}
    mains = defaultdict(list)
    for d in diagnoses:
        if d.category == main_category:
            mains[d.patient_id].append(d)
    for a in acts:
        for site, cfg in sites.items():
            if a.value not in cfg["acts"]:
                continue
            for d in mains[a.patient_id]:
                if d.value not in cfg["diagnoses"]:
                    continue
                if a.group_id is not None:
                    if d.group_id != a.group_id:
                        continue
                    key = (a.patient_id, site, "stay", a.group_id)
                elif _d(d.start) == _d(a.start):
                    key = (a.patient_id, site, "day", _d(a.start))
                else:
                    continue
                t = min(a.start, d.start)
                found[key] = min(found.get(key, t), t)
    return [Event(pid, "outcome", ref if kind == "stay" else None, site, 1.0, t)
            for (pid, site, kind, ref), t in found.items()]


def oracle_prevalent(dispenses, cutoff: date) -> set:
    first = {}
    for e in dispenses:
        first[e.patient_id] = min(first.get(e.patient_id, _d(e.start)), _d(e.start))
    return {pid for pid, d in first.items() if d < cutoff}


def oracle_pipeline(data_dir) -> tuple[list, dict]:
    """Oracle patients and outputs for every extractor and transformer named in extract.yaml."""
    d = Path(data_dir)
    conf = yaml.safe_load((d / "extract.yaml").read_text(encoding="utf-8"))
    t = conf["transformers"]
    s0, s1 = date.fromisoformat(str(conf["study"]["start"])), date.fromisoformat(str(conf["study"]["end"]))
    patients, ev = oracle_extract(d)
    known = {p.patient_id for p in patients}
    out = {k: [e for e in v if e.patient_id in known] for k, v in ev.items()}
    obs_inputs = t["observation_period"]["inputs"]
    out["observation_period"] = oracle_observation_period(
        [e for n in obs_inputs for e in out[n]], s0, s1)
    tl = t["trackloss"]
    out["trackloss"] = oracle_trackloss(patients, out[tl["dispenses"]], s1, tl["gap_months"],
                                        tl["purchase_duration"])
    out["follow_up"] = oracle_followup(patients, out["observation_period"], out["trackloss"],
                                       t["follow_up"]["delay_days"])
    ex = t["exposures"]
    out[ex["name"]] = oracle_exposure(out[ex["dispenses"]], out["follow_up"], ex["purchase_duration"],
                                      ex["gap_tolerance"], ex["strategy"], ex["min_purchases"])
    oc = t["outcome"]
    sites = yaml.safe_load((d / oc["sites_file"]).read_text(encoding="utf-8"))
    out[oc["name"]] = oracle_outcome(out[oc["acts"]], [e for n in oc["diagnoses"] for e in out[n]], sites)
    pu = t["prevalent_users"]
    prevalent = oracle_prevalent(out[pu["dispenses"]], date.fromisoformat(str(pu["cutoff"])))
    out[pu["name"] + ":subjects"] = sorted(known - prevalent)
    return patients, out

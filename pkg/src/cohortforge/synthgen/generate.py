"""Seeded synthetic star-schema claims corpus with generation-time ground truth.

Layout written by :func:`write_corpus`::

    claims.csv      central table, one row per cash flow
    patients.csv    patient_id -> birth/death dates
    drugs.csv       flow_id -> dispensed drug rows (one or more per drug claim)
    acts.csv        flow_id -> medical acts (outpatient claims and hospital stays)
    stays.csv       stay_id -> hospital stay dates and DRG code
    diagnoses.csv   stay_id -> main/associated/linked diagnoses
    codes/          allow-list, drug class map, outcome site codes
    flatten.yaml    join plan over the tables above
    extract.yaml    extractor and transformer configuration
    truth/          ground-truth patients and extractor events
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from datetime import date
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from ..model import EPOCH_DATE, Event, Gender, Patient, day_to_datetime, events_to_csv, patients_to_csv
from ..store.csvio import write_csv
from ..store.table import DType, Table
from .rng import Stream

# stream ids; each random quantity gets its own stream so adding one never shifts another
S_GENDER, S_BIRTH, S_DEATH, S_DEATH_DAY, S_NCLAIMS, S_KIND, S_CLAIM_DAY, S_NULL_PID, S_NULL_DATE, \
    S_GENDER_NOISE, S_DRUG_EXTRA, S_DRUG_EXTRA_N, S_DRUG_CODE, S_NULL_DRUG, S_BOXES, S_ACT_CODE, \
    S_NULL_ACT, S_NULL_ACT_DATE, S_STAY_LEN, S_DRG, S_STAY_NACTS, S_STAY_ACT_DAY, S_NASSOC, S_NLINKED, \
    S_DIAG_CODE = range(1, 26)

POSITIONS = ("main", "associated", "linked")

CLAIMS_SCHEMA = (("flow_id", DType.INT64, False), ("patient_id", DType.STRING, True),
                 ("claim_date", DType.DATE, True), ("gender", DType.INT64, True),
                 ("stay_id", DType.INT64, True))
PATIENTS_SCHEMA = (("patient_id", DType.STRING, False), ("birth_date", DType.DATE, False),
                   ("death_date", DType.DATE, True))
DRUGS_SCHEMA = (("flow_id", DType.INT64, False), ("drug_code", DType.STRING, True),
                ("boxes", DType.INT64, False))
ACTS_SCHEMA = (("flow_id", DType.INT64, False), ("act_code", DType.STRING, True),
               ("act_date", DType.DATE, True))
STAYS_SCHEMA = (("stay_id", DType.INT64, False), ("stay_start", DType.DATE, False),
                ("stay_end", DType.DATE, False), ("drg_code", DType.STRING, False))
DIAGNOSES_SCHEMA = (("stay_id", DType.INT64, False), ("diag_code", DType.STRING, False),
                    ("diag_position", DType.STRING, False))

TABLE_SCHEMAS = {"claims": CLAIMS_SCHEMA, "patients": PATIENTS_SCHEMA, "drugs": DRUGS_SCHEMA,
                 "acts": ACTS_SCHEMA, "stays": STAYS_SCHEMA, "diagnoses": DIAGNOSES_SCHEMA}
JOIN_PLAN = (("patients", "patient_id"), ("drugs", "flow_id"), ("acts", "flow_id"),
             ("stays", "stay_id"), ("diagnoses", "stay_id"))


def _default_nulls() -> dict:
    return {"patient_id": 0.01, "claim_date": 0.01, "drug_code": 0.02, "act_code": 0.02, "act_date": 0.01}


@dataclass
class SynthConfig:
    seed: int = 42
    n_patients: int = 1000
    start: date = date(2010, 1, 1)
    end: date = date(2014, 12, 31)
    claims_per_patient: int = 12
    # claim kinds, per mille; the remainder are hospital stays
    drug_permille: int = 600
    act_permille: int = 300
    n_drugs: int = 60
    n_drug_classes: int = 12
    n_acts: int = 30
    n_diagnoses: int = 30
    n_drgs: int = 10
    null_probability: dict = field(default_factory=_default_nulls)
    gender_noise: float = 0.15
    death_probability: float = 0.1
    drug_extra_probability: float = 0.05
    drug_extra_max: int = 2
    stay_max_days: int = 14
    stay_acts: tuple = (0, 3)
    stay_associated_max: int = 2
    stay_linked_max: int = 1
    orphan_rows: int = 3
    allow_fraction: float = 0.8
    prevalence_cutoff: date = date(2010, 7, 1)

    def __post_init__(self):
        if self.n_patients < 0 or self.claims_per_patient < 0:
            raise ValueError("counts must be non-negative")
        if not 0 <= self.drug_permille + self.act_permille <= 1000:
            raise ValueError("claim kind shares must sum to at most 1000 per mille")
        if self.start > self.end:
            raise ValueError("start must not be after end")
        for k, p in self.null_probability.items():
            if not 0 <= p <= 1:
                raise ValueError(f"null probability for {k} out of range")
        self.stay_acts = tuple(self.stay_acts)

    @classmethod
    def dcir_like(cls, **kw) -> "SynthConfig":
        """Mostly single-row dimensions: expansion factor stays close to 1."""
        base = dict(drug_permille=700, act_permille=295, drug_extra_probability=0.04,
                    stay_acts=(0, 1), stay_associated_max=0, stay_linked_max=0)
        return cls(**{**base, **kw})

    @classmethod
    def pmsi_like(cls, **kw) -> "SynthConfig":
        """Every claim a hospital stay with many acts and diagnoses: heavy fan-out."""
        base = dict(drug_permille=0, act_permille=0, stay_acts=(4, 10), stay_associated_max=6,
                    stay_linked_max=3)
        return cls(**{**base, **kw})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["start"], d["end"] = self.start.isoformat(), self.end.isoformat()
        d["prevalence_cutoff"] = self.prevalence_cutoff.isoformat()
        d["stay_acts"] = list(self.stay_acts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for k in ("start", "end", "prevalence_cutoff"):
            if isinstance(d.get(k), str):
                d[k] = date.fromisoformat(d[k])
        return cls(**d)


def _day(d: date) -> int:
    return (d - EPOCH_DATE).days


def drug_codes(cfg: SynthConfig) -> list[str]:
    return [f"DRUG{i:03d}" for i in range(cfg.n_drugs)]


def drug_allow(cfg: SynthConfig) -> list[str]:
    return drug_codes(cfg)[:int(round(cfg.n_drugs * cfg.allow_fraction))]


def drug_classes(cfg: SynthConfig) -> dict:
    """Raw drug code -> ATC-like classes; every seventh code belongs to two classes."""
    out = {}
    k = max(1, cfg.n_drug_classes)
    for i, code in enumerate(drug_codes(cfg)):
        classes = [f"ATC{i % k:02d}"]
        if i % 7 == 3 and k > 1:
            classes.append(f"ATC{(i + 1) % k:02d}")
        out[code] = classes
    return out


def outcome_sites(cfg: SynthConfig) -> dict:
    return {"hip": {"acts": ["ACT000", "ACT001", "ACT002"], "diagnoses": ["DIA000", "DIA001", "DIA002"]},
            "wrist": {"acts": ["ACT003", "ACT004"], "diagnoses": ["DIA003", "DIA004"]}}


@dataclass
class Corpus:
    config: SynthConfig
    tables: dict
    truth_patients: list
    truth_events: dict


def _codes(prefix: str, idx: np.ndarray) -> np.ndarray:
    out = np.empty(len(idx), dtype=object)
    out[:] = [f"{prefix}{i:03d}" for i in idx.tolist()]
    return out


def generate(cfg: SynthConfig) -> Corpus:
    """Build all tables plus ground truth; single-threaded and integer-only."""
    st = {i: Stream(cfg.seed, i) for i in range(1, 26)}
    nulls = {**_default_nulls(), **cfg.null_probability}
    n = cfg.n_patients
    p_idx = np.arange(n, dtype=np.int64)
    d0, d1 = _day(cfg.start), _day(cfg.end)
    span = d1 - d0 + 1

    # patients
    true_gender = 1 + st[S_GENDER].integers(p_idx, 2)
    b0, b1 = _day(date(1920, 1, 1)), _day(date(1995, 12, 31))
    birth = b0 + st[S_BIRTH].integers(p_idx, b1 - b0 + 1)
    dies = st[S_DEATH].bernoulli(p_idx, cfg.death_probability)
    death = d0 + st[S_DEATH_DAY].integers(p_idx, span)
    pid_str = np.empty(n, dtype=object)
    pid_str[:] = [f"P{i:07d}" for i in range(n)]

    # claims
    counts = st[S_NCLAIMS].integers(p_idx, 2 * cfg.claims_per_patient + 1)
    owner = np.repeat(p_idx, counts)
    c = len(owner)
    c_idx = np.arange(c, dtype=np.int64)
    flow_id = c_idx + 1
    kind_draw = st[S_KIND].integers(c_idx, 1000)
    is_drug = kind_draw < cfg.drug_permille
    is_act = (~is_drug) & (kind_draw < cfg.drug_permille + cfg.act_permille)
    is_stay = ~(is_drug | is_act)
    claim_day = d0 + st[S_CLAIM_DAY].integers(c_idx, span)
    pid_ok = ~st[S_NULL_PID].bernoulli(c_idx, nulls["patient_id"])
    date_ok = ~st[S_NULL_DATE].bernoulli(c_idx, nulls["claim_date"])
    flip = st[S_GENDER_NOISE].bernoulli(c_idx, cfg.gender_noise)
    rec_gender = np.where(flip, 3 - true_gender[owner], true_gender[owner])
    stay_of_claim = np.full(c, -1, dtype=np.int64)
    stay_claims = np.flatnonzero(is_stay)
    stay_of_claim[stay_claims] = np.arange(1, len(stay_claims) + 1)

    claims = Table(CLAIMS_SCHEMA, {
        "flow_id": flow_id, "patient_id": pid_str[owner] if c else np.empty(0, dtype=object),
        "claim_date": claim_day.astype(np.int32), "gender": rec_gender,
        "stay_id": np.maximum(stay_of_claim, 0)},
        {"patient_id": pid_ok, "claim_date": date_ok, "stay_id": stay_of_claim > 0}, num_rows=c)

    # drugs: one row per drug claim, sometimes more
    drug_claims = np.flatnonzero(is_drug)
    extra = np.where(st[S_DRUG_EXTRA].bernoulli(drug_claims, cfg.drug_extra_probability),
                     1 + st[S_DRUG_EXTRA_N].integers(drug_claims, max(1, cfg.drug_extra_max)), 0)
    drug_claim_of_row = np.repeat(drug_claims, 1 + extra)
    orphan_flows = c + 1 + np.arange(cfg.orphan_rows, dtype=np.int64)
    r_idx = np.arange(len(drug_claim_of_row) + cfg.orphan_rows, dtype=np.int64)
    drug_code_idx = st[S_DRUG_CODE].integers(r_idx, cfg.n_drugs)
    drug_ok = ~st[S_NULL_DRUG].bernoulli(r_idx, nulls["drug_code"])
    boxes = 1 + st[S_BOXES].integers(r_idx, 3)
    drugs = Table(DRUGS_SCHEMA, {
        "flow_id": np.concatenate([flow_id[drug_claim_of_row], orphan_flows]),
        "drug_code": _codes("DRUG", drug_code_idx), "boxes": boxes},
        {"drug_code": drug_ok}, num_rows=len(r_idx))

    # stays
    s_n = len(stay_claims)
    s_idx = np.arange(s_n, dtype=np.int64)
    stay_start = claim_day[stay_claims]
    stay_end = stay_start + st[S_STAY_LEN].integers(s_idx, cfg.stay_max_days + 1)
    stays = Table(STAYS_SCHEMA, {
        "stay_id": s_idx + 1, "stay_start": stay_start.astype(np.int32),
        "stay_end": stay_end.astype(np.int32), "drg_code": _codes("DRG", st[S_DRG].integers(s_idx, cfg.n_drgs))},
        num_rows=s_n)

    # acts: one per outpatient act claim, a variable number per stay
    lo, hi = cfg.stay_acts
    stay_nacts = lo + st[S_STAY_NACTS].integers(s_idx, hi - lo + 1) if s_n else np.zeros(0, dtype=np.int64)
    act_claims_out = np.flatnonzero(is_act)
    stay_of_act = np.repeat(s_idx, stay_nacts)
    act_claim = np.concatenate([act_claims_out, stay_claims[stay_of_act]]).astype(np.int64)
    a_n = len(act_claim)
    a_idx = np.arange(a_n, dtype=np.int64)
    act_day = np.concatenate([claim_day[act_claims_out],
                              stay_start[stay_of_act] + st[S_STAY_ACT_DAY].integers(
                                  a_idx[len(act_claims_out):], (stay_end - stay_start + 1)[stay_of_act])])
    order = np.argsort(flow_id[act_claim], kind="stable")
    act_claim, act_day = act_claim[order], act_day[order]
    act_code_ok = ~st[S_NULL_ACT].bernoulli(a_idx, nulls["act_code"])
    act_date_ok = ~st[S_NULL_ACT_DATE].bernoulli(a_idx, nulls["act_date"])
    acts = Table(ACTS_SCHEMA, {
        "flow_id": flow_id[act_claim], "act_code": _codes("ACT", st[S_ACT_CODE].integers(a_idx, cfg.n_acts)),
        "act_date": act_day.astype(np.int32)},
        {"act_code": act_code_ok, "act_date": act_date_ok}, num_rows=a_n)

    # diagnoses: one main, some associated and linked per stay
    n_assoc = st[S_NASSOC].integers(s_idx, cfg.stay_associated_max + 1)
    n_linked = st[S_NLINKED].integers(s_idx, cfg.stay_linked_max + 1)
    per_stay = 1 + n_assoc + n_linked
    diag_stay = np.repeat(s_idx, per_stay)
    within = np.arange(len(diag_stay)) - np.repeat(np.cumsum(per_stay) - per_stay, per_stay)
    pos = np.where(within == 0, 0, np.where(within <= np.repeat(n_assoc, per_stay), 1, 2))
    g_idx = np.arange(len(diag_stay), dtype=np.int64)
    pos_str = np.empty(len(pos), dtype=object)
    pos_str[:] = [POSITIONS[p] for p in pos.tolist()]
    diagnoses = Table(DIAGNOSES_SCHEMA, {
        "stay_id": diag_stay + 1, "diag_code": _codes("DIA", st[S_DIAG_CODE].integers(g_idx, cfg.n_diagnoses)),
        "diag_position": pos_str}, num_rows=len(diag_stay))

    patients = Table(PATIENTS_SCHEMA, {"patient_id": pid_str, "birth_date": birth.astype(np.int32),
                                       "death_date": death.astype(np.int32)},
                     {"death_date": dies}, num_rows=n)
    tables = {"claims": claims, "patients": patients, "drugs": drugs, "acts": acts,
              "stays": stays, "diagnoses": diagnoses}

    truth_patients, truth_events = _ground_truth(
        cfg, pid_str, birth, death, dies, owner, pid_ok, date_ok, rec_gender, claim_day,
        flow_id, stay_of_claim, drugs, acts, stays, diagnoses)
    return Corpus(cfg, tables, truth_patients, truth_events)


def _ground_truth(cfg, pid_str, birth, death, dies, owner, pid_ok, date_ok, rec_gender, claim_day,
                  flow_id, stay_of_claim, drugs, acts, stays, diagnoses):
    """Expected extractor outputs, computed from generation arrays rather than files."""
    claim_of_flow = {int(f): i for i, f in enumerate(flow_id.tolist())}
    votes: dict = {}
    for i in np.flatnonzero(pid_ok).tolist():
        p = int(owner[i])
        votes.setdefault(p, [0, 0])[int(rec_gender[i]) - 1] += 1
    patients = []
    for p in sorted(votes, key=lambda p: pid_str[p]):
        m, f = votes[p]
        g = Gender.MALE if m > f else Gender.FEMALE if f > m else Gender.UNKNOWN
        patients.append(Patient(pid_str[p], g, day_to_datetime(int(birth[p])),
                                day_to_datetime(int(death[p])) if dies[p] else None))

    allow = set(drug_allow(cfg))
    classes = drug_classes(cfg)
    events: dict = {"drug_purchases": [], "acts": [], "extract_hospital_stays": []}
    for pos in POSITIONS:
        events[f"diagnoses_{pos}"] = []

    def claim_pid(flow):
        i = claim_of_flow.get(flow)
        if i is None or not pid_ok[i]:
            return None, None
        return i, pid_str[owner[i]]

    dv = drugs.validity["drug_code"].tolist()
    for f, code, ok, boxes in zip(drugs.columns["flow_id"].tolist(), drugs.columns["drug_code"].tolist(),
                                  dv, drugs.columns["boxes"].tolist()):
        i, pid = claim_pid(f)
        if pid is None or not ok or not date_ok[i] or code not in allow:
            continue
        for cls in classes[code]:
            events["drug_purchases"].append(Event(pid, "drug_purchase", None, cls, float(boxes),
                                                  day_to_datetime(int(claim_day[i]))))
    for f, code, cok, day, dok in zip(acts.columns["flow_id"].tolist(), acts.columns["act_code"].tolist(),
                                      acts.validity["act_code"].tolist(), acts.columns["act_date"].tolist(),
                                      acts.validity["act_date"].tolist()):
        i, pid = claim_pid(f)
        if pid is None or not cok or not dok:
            continue
        stay = int(stay_of_claim[i])
        events["acts"].append(Event(pid, "medical_act", str(stay) if stay > 0 else None, code, 1.0,
                                    day_to_datetime(day)))
    stay_claim = {int(s): i for i, s in enumerate(stay_of_claim.tolist()) if s > 0}
    stay_rows = {}
    for sid, s0, s1, drg in zip(stays.columns["stay_id"].tolist(), stays.columns["stay_start"].tolist(),
                                stays.columns["stay_end"].tolist(), stays.columns["drg_code"].tolist()):
        stay_rows[sid] = (s0, s1)
        i = stay_claim[sid]
        if not pid_ok[i]:
            continue
        events["extract_hospital_stays"].append(Event(pid_str[owner[i]], "hospital_stay", str(sid), drg, 1.0,
                                                      day_to_datetime(s0), day_to_datetime(s1)))
    for sid, code, pos in zip(diagnoses.columns["stay_id"].tolist(), diagnoses.columns["diag_code"].tolist(),
                              diagnoses.columns["diag_position"].tolist()):
        i = stay_claim[sid]
        if not pid_ok[i]:
            continue
        events[f"diagnoses_{pos}"].append(Event(pid_str[owner[i]], f"diagnosis_{pos}", str(sid), code, 1.0,
                                                day_to_datetime(stay_rows[sid][0])))
    return patients, events


# --- writing ---------------------------------------------------------------------------

def flatten_config(cfg: SynthConfig, chunk_rows: Optional[int] = None, slicing_unit: str = "month") -> dict:
    tables = {}
    keys = dict(JOIN_PLAN)
    for name, schema in TABLE_SCHEMAS.items():
        entry = {"path": f"{name}.csv",
                 "columns": [{"name": n, "dtype": t.value, "nullable": nl} for n, t, nl in schema]}
        if name in keys:
            entry["join"] = [[keys[name], keys[name]]]
        tables[name] = entry
    out = {"tables": tables, "central": "claims",
           "dimensions": [{"table": t, "keys": [[k, k]]} for t, k in JOIN_PLAN],
           "slicing": {"column": "claim_date", "unit": slicing_unit},
           "collision_prefix": True, "sparsity_threshold": 10.0}
    if chunk_rows:
        out["chunk_rows"] = chunk_rows
    return out


def extract_config(cfg: SynthConfig) -> dict:
    extractors = [
        {"name": "drug_purchases", "kind": "drug_dispenses",
         "columns": {"patient_id": "patient_id", "value": "drug_code", "start": "claim_date",
                     "weight": "boxes"},
         "value_filters": [{"column": "drug_code", "allow_file": "codes/drug_allow.csv"}],
         "granularity_file": "codes/drug_classes.csv", "distinct_on": ["drugs__rowid"]},
        {"name": "acts", "kind": "acts",
         "columns": {"patient_id": "patient_id", "value": "act_code", "start": "act_date",
                     "group_id": "stay_id"},
         "distinct_on": ["acts__rowid"]},
    ]
    for pos in POSITIONS:
        extractors.append({
            "name": f"diagnoses_{pos}", "kind": "diagnoses", "position": pos,
            "position_column": "diag_position",
            "columns": {"patient_id": "patient_id", "value": "diag_code", "start": "stay_start",
                        "group_id": "stay_id"},
            "distinct_on": ["diagnoses__rowid"]})
    extractors.append({
        "name": "extract_hospital_stays", "kind": "hospital_stays",
        "columns": {"patient_id": "patient_id", "value": "drg_code", "start": "stay_start",
                    "end": "stay_end", "group_id": "stay_id"},
        "distinct_on": ["stays__rowid"]})
    return {
        "study": {"start": cfg.start.isoformat(), "end": cfg.end.isoformat()},
        "patients": {"name": "extract_patients",
                     "columns": {"patient_id": "patient_id", "gender": "gender",
                                 "birth_date": "birth_date", "death_date": "death_date"},
                     "distinct_on": ["_rowid"]},
        "extractors": extractors,
        "transformers": {
            "observation_period": {"name": "observation_period",
                                   "inputs": [e["name"] for e in extractors]},
            "trackloss": {"name": "trackloss", "dispenses": "drug_purchases", "gap_months": 4,
                          "purchase_duration": 30},
            "follow_up": {"name": "follow_up", "delay_days": 30},
            "exposures": {"name": "exposures", "dispenses": "drug_purchases", "purchase_duration": 30,
                          "gap_tolerance": 30, "strategy": "limited", "min_purchases": 1},
            "outcome": {"name": "fractures", "acts": "acts", "diagnoses": ["diagnoses_main"],
                        "sites_file": "codes/outcome_sites.yaml"},
            "prevalent_users": {"name": "filter_patients", "dispenses": "drug_purchases",
                                "cutoff": cfg.prevalence_cutoff.isoformat()},
        },
    }


def _dump_yaml(obj, path: Path) -> None:
    path.write_text(yaml.safe_dump(obj, sort_keys=False, default_flow_style=None), encoding="utf-8")


def write_corpus(corpus: Corpus, out_dir, chunk_rows: Optional[int] = None,
                 slicing_unit: str = "month") -> Path:
    out = Path(out_dir)
    (out / "codes").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(parents=True, exist_ok=True)
    cfg = corpus.config
    for name, table in corpus.tables.items():
        write_csv(table, out / f"{name}.csv")
    (out / "codes" / "drug_allow.csv").write_text(
        "code\n" + "".join(f"{c}\n" for c in drug_allow(cfg)), encoding="utf-8")
    (out / "codes" / "drug_classes.csv").write_text(
        "raw,code\n" + "".join(f"{raw},{c}\n" for raw, cs in drug_classes(cfg).items() for c in cs),
        encoding="utf-8")
    _dump_yaml(outcome_sites(cfg), out / "codes" / "outcome_sites.yaml")
    _dump_yaml(flatten_config(cfg, chunk_rows, slicing_unit), out / "flatten.yaml")
    _dump_yaml(extract_config(cfg), out / "extract.yaml")
    (out / "synth.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
                                    encoding="utf-8")
    patients_to_csv(corpus.truth_patients, out / "truth" / "patients.csv")
    for name, events in corpus.truth_events.items():
        events_to_csv(events, out / "truth" / f"{name}.csv")
    return out


def generate_to(cfg: SynthConfig, out_dir, **kw) -> Corpus:
    corpus = generate(cfg)
    write_corpus(corpus, out_dir, **kw)
    return corpus

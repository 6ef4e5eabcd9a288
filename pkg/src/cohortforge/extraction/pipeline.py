"""Config-driven extraction run: flat container -> cohorts on disk + lineage document."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .. import parallel
from ..errors import ValidationError
from ..findings import WARNING, Finding
from ..model import events_to_csv, format_ts, patients_to_csv, to_utc
from ..store.container import Container
from .extractors import (ExtractorSpec, PatientSpec, PatientVotes, ValueFilter, config_digest,
                         diagnosis_spec, extract_keyed, merge_keyed, patient_rows, reconcile_patients)
from .lineage import CohortEntry, code_digest, dumps_metadata, write_metadata
from .transformers import (ExposureSpec, FollowUpSpec, TracklossSpec, dispenses_without_follow_up,
                           filter_prevalent_users, transform_exposure, transform_followup,
                           transform_observation_period, transform_outcome, transform_trackloss)

log = logging.getLogger(__name__)

EXTRACTOR_KINDS = ("generic", "drug_dispenses", "acts", "diagnoses", "hospital_stays")
DEFAULT_CATEGORIES = {"drug_dispenses": "drug_purchase", "acts": "medical_act",
                      "hospital_stays": "hospital_stay"}


@dataclass
class ExtractorConfig:
    spec: ExtractorSpec
    kind: str


@dataclass
class ExtractionConfig:
    flat: Optional[Path]
    study_start: object
    study_end: object
    patients: PatientSpec
    extractors: list
    transformers: dict = field(default_factory=dict)
    source: Optional[Path] = None

    def names(self) -> list[str]:
        return [e.spec.name for e in self.extractors]


def _read_code_list(path: Path) -> list[str]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if rows and rows[0] and rows[0][0] == "code":
        rows = rows[1:]
    return [r[0] for r in rows if r and r[0]]


def _read_code_map(path: Path) -> dict:
    out: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["raw"], []).append(row["code"])
    return out


def _codes(raw: dict, key: str, base: Path):
    if f"{key}_file" in raw:
        return _read_code_list(base / raw[f"{key}_file"])
    return raw.get(key)


def _extractor_from_dict(d: dict, base: Path) -> ExtractorConfig:
    kind = d.get("kind", "generic")
    if kind not in EXTRACTOR_KINDS:
        raise ValidationError(f"unknown extractor kind {kind!r}")
    filters = []
    for vf in d.get("value_filters", ()):
        allow = _codes(vf, "allow", base)
        if allow is None:
            raise ValidationError(f"{d['name']}: value filter on {vf['column']!r} needs allow or allow_file")
        filters.append(ValueFilter(vf["column"], allow))
    gran = d.get("granularity")
    if "granularity_file" in d:
        gran = _read_code_map(base / d["granularity_file"])
    kw = dict(columns=d["columns"], null_filter=tuple(d.get("null_filter", ())),
              value_filters=tuple(filters), granularity=gran,
              distinct_on=tuple(d.get("distinct_on", ())), on_unmapped=d.get("on_unmapped", "error"),
              sources=tuple(d.get("sources", ())))
    if kind == "diagnoses":
        spec = diagnosis_spec(d["name"], d["position"], position_column=d["position_column"], **kw)
    else:
        if kind == "hospital_stays":
            cols = kw["columns"]
            if "end" not in cols or "group_id" not in cols:
                raise ValidationError(f"{d['name']}: hospital stays need end and group_id columns")
            if cols["end"] not in kw["null_filter"]:
                kw["null_filter"] = kw["null_filter"] + (cols["end"],)
        if kind == "acts" and "end" in kw["columns"]:
            raise ValidationError(f"{d['name']}: acts are punctual; do not map an end column")
        category = d.get("category") or DEFAULT_CATEGORIES.get(kind)
        if not category:
            raise ValidationError(f"{d['name']}: category is required")
        spec = ExtractorSpec(d["name"], category, **kw)
    return ExtractorConfig(spec, kind)


def load_extraction_config(path) -> ExtractionConfig:
    """Parse a YAML extraction config; relative paths resolve against its directory."""
    path = Path(path)
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    base = path.parent
    try:
        study = raw["study"]
        pat = raw["patients"]
        patients = PatientSpec(pat.get("name", "extract_patients"), pat["columns"],
                               tuple(pat.get("distinct_on", ())), tuple(pat.get("sources", ())))
        extractors = [_extractor_from_dict(d, base) for d in raw.get("extractors", ())]
        cfg = ExtractionConfig(
            flat=(base / raw["flat"]) if raw.get("flat") else None,
            study_start=to_utc(study["start"]), study_end=to_utc(study["end"]),
            patients=patients, extractors=extractors,
            transformers=dict(raw.get("transformers") or {}), source=path)
    except KeyError as exc:
        raise ValidationError(f"{path}: missing config key {exc}") from None
    except TypeError as exc:
        raise ValidationError(f"{path}: malformed config: {exc}") from None
    if cfg.study_start > cfg.study_end:
        raise ValidationError("study start must not be after study end")
    names = cfg.names() + [patients.name]
    if len(set(names)) != len(names):
        raise ValidationError("extractor names must be unique")
    for key, t in cfg.transformers.items():
        if "outcome" == key and "sites_file" in t:
            t["sites"] = yaml.safe_load((base / t["sites_file"]).read_text(encoding="utf-8"))
    return cfg


# --- chunk-parallel extraction ----------------------------------------------------------

def _needed_columns(cfg: ExtractionConfig, schema) -> list[str]:
    want = set(cfg.patients.referenced_columns())
    for e in cfg.extractors:
        want.update(e.spec.referenced_columns())
    return [c.name for c in schema if c.name in want]


def _extract_chunk(i: int):
    container = parallel.shared("container")
    cfg = parallel.shared("config")
    cols = parallel.shared("columns")
    chunk = container.read_chunk(i, cols)
    parts = [extract_keyed(chunk, e.spec) for e in cfg.extractors]
    return parts, patient_rows(chunk, cfg.patients)


@dataclass
class ExtractionResult:
    patients: list
    outputs: dict
    entries: list
    findings: list
    metadata: dict
    stats: dict

    def events(self, name: str) -> list:
        return self.outputs[name][1]


def extract_all(cfg: ExtractionConfig, workers: int = 1):
    """Run every extractor and the patient extractor over the flat container."""
    if cfg.flat is None:
        raise ValidationError("no flat container given (set 'flat' in the config)")
    container = Container(cfg.flat, verify=True)
    missing = [c for e in cfg.extractors for c in e.spec.referenced_columns()
               if c not in {s.name for s in container.schema}]
    missing += [c for c in cfg.patients.referenced_columns() if c not in {s.name for s in container.schema}]
    if missing:
        raise ValidationError(f"columns not in flat table: {sorted(set(missing))}")
    cols = _needed_columns(cfg, container.schema)
    per_spec = [[] for _ in cfg.extractors]
    votes = PatientVotes()
    state = {"container": container, "config": cfg, "columns": cols}
    for parts, prow in parallel.imap_ordered(_extract_chunk, range(container.num_chunks), workers, state):
        for acc, part in zip(per_spec, parts):
            acc.append(part)
        votes.add_rows(prow)
    merged = {e.spec.name: merge_keyed(p) for e, p in zip(cfg.extractors, per_spec)}
    return reconcile_patients(votes), merged


def _flat_sources(flat: Path) -> dict:
    report = flat.parent / "report.txt"
    if not report.exists():
        return {}
    try:
        return json.loads(report.read_text(encoding="utf-8")).get("column_sources", {})
    except (json.JSONDecodeError, AttributeError):
        return {}


def _source_entry(flat_name: str, columns, origins: dict) -> list:
    cols = list(columns)
    return [{"table": flat_name, "columns": cols,
             "origin": sorted({origins[c] for c in cols if c in origins})}]


def _by_name(outputs: dict, name: str, what: str) -> list:
    if name not in outputs:
        raise ValidationError(f"transformer input {what}={name!r} is not an extracted cohort")
    return outputs[name][1]


def run_extraction(cfg: ExtractionConfig, out_dir=None, workers: int = 1,
                   digest: Optional[str] = None) -> ExtractionResult:
    """Extract, transform and (when ``out_dir`` is given) write cohorts plus lineage."""
    digest = code_digest() if digest is None else digest
    patients, merged = extract_all(cfg, workers)
    known = {p.patient_id for p in patients}
    window = [format_ts(cfg.study_start), format_ts(cfg.study_end)]
    origins = _flat_sources(cfg.flat)
    flat_name = cfg.flat.name
    findings = []
    stats = {}
    # name -> (category, events, subjects or None, sources, config, operations)
    outputs: dict = {}
    outputs[cfg.patients.name] = ("patients", [], known, _source_entry(
        flat_name, cfg.patients.referenced_columns(), origins), cfg.patients.to_dict(),
        ["extract:patients"])
    for e in cfg.extractors:
        ke = merged[e.spec.name]
        stats[e.spec.name] = ke.stats.__dict__.copy()
        events = ke.events
        orphans = sum(1 for ev in events if ev.patient_id not in known)
        if orphans:
            findings.append(Finding(WARNING, "orphan_events",
                                    f"{e.spec.name}: {orphans} events without a patient record dropped"))
            events = [ev for ev in events if ev.patient_id in known]
        outputs[e.spec.name] = (e.spec.category, events, None,
                                _source_entry(flat_name, e.spec.referenced_columns(), origins),
                                e.spec.to_dict(), [f"extract:{e.kind}"])
    _run_transformers(cfg, patients, outputs, findings, stats)

    entries = []
    for name, (category, events, subjects, sources, conf, ops) in outputs.items():
        subj = subjects if subjects is not None else {ev.patient_id for ev in events}
        entries.append(CohortEntry(
            name=name, path=f"cohorts/{name}", category=category, sources=sources,
            count=len(events) if subjects is None else len(subj), subjects=len(subj),
            config_digest=config_digest(conf), code_digest=digest, operations=ops, window=window))
    doc = write_metadata(entries, digest=digest)
    result = ExtractionResult(patients, {k: (v[0], v[1], v[2]) for k, v in outputs.items()},
                              entries, findings, doc, stats)
    if out_dir is not None:
        write_outputs(result, Path(out_dir))
    return result


def _run_transformers(cfg: ExtractionConfig, patients, outputs: dict, findings: list, stats: dict):
    t = cfg.transformers
    if "observation_period" in t:
        spec = t["observation_period"] or {}
        name = spec.get("name", "observation_period")
        inputs = spec.get("inputs") or [e.spec.name for e in cfg.extractors]
        evs = [ev for n in inputs for ev in _by_name(outputs, n, "inputs")]
        out = transform_observation_period(evs, cfg.study_start, cfg.study_end)
        outputs[name] = ("observation_period", out, None, [{"cohort": n} for n in inputs],
                         {"study": [format_ts(cfg.study_start), format_ts(cfg.study_end)], "inputs": inputs},
                         ["transform:observation_period"])
    if "trackloss" in t:
        spec = t["trackloss"] or {}
        name = spec.get("name", "trackloss")
        src = spec.get("dispenses", "drug_purchases")
        ts = TracklossSpec(cfg.study_end, int(spec.get("gap_months", 4)),
                           int(spec.get("purchase_duration", 30)))
        out = transform_trackloss(patients, _by_name(outputs, src, "dispenses"), ts)
        outputs[name] = ("trackloss", out, None, [{"cohort": src}],
                         {"gap_months": ts.gap_months, "purchase_duration": ts.purchase_duration,
                          "study_end": format_ts(cfg.study_end)}, ["transform:trackloss"])
    if "follow_up" in t:
        spec = t["follow_up"] or {}
        name = spec.get("name", "follow_up")
        obs_name = spec.get("observation") or \
            (t.get("observation_period") or {}).get("name", "observation_period")
        tl_name = spec.get("trackloss", (t.get("trackloss") or {}).get("name", "trackloss"))
        fs = FollowUpSpec(int(spec.get("delay_days", 0)))
        tl = outputs[tl_name][1] if tl_name in outputs else []
        out = transform_followup(patients, _by_name(outputs, obs_name, "observation"), tl, fs)
        srcs = [{"cohort": obs_name}] + ([{"cohort": tl_name}] if tl_name in outputs else [])
        outputs[name] = ("follow_up", out, None, srcs, {"delay_days": fs.delay_days},
                         ["transform:follow_up"])
    if "exposures" in t:
        spec = t["exposures"] or {}
        name = spec.get("name", "exposures")
        src = spec.get("dispenses", "drug_purchases")
        fu_name = spec.get("follow_up", (t.get("follow_up") or {}).get("name", "follow_up"))
        es = ExposureSpec(int(spec.get("purchase_duration", 30)), int(spec.get("gap_tolerance", 30)),
                          spec.get("strategy", "limited"), int(spec.get("min_purchases", 1)))
        disp = _by_name(outputs, src, "dispenses")
        fus = _by_name(outputs, fu_name, "follow_up")
        ignored = dispenses_without_follow_up(disp, fus)
        stats[name] = {"dispenses_without_follow_up": ignored}
        out = transform_exposure(disp, fus, es)
        outputs[name] = ("exposure", out, None, [{"cohort": src}, {"cohort": fu_name}],
                         es.__dict__.copy(), ["transform:exposure"])
    if "outcome" in t:
        spec = t["outcome"] or {}
        name = spec.get("name", "fractures")
        acts = spec.get("acts", "acts")
        diags = spec.get("diagnoses", ["diagnoses_main"])
        devs = [ev for n in diags for ev in _by_name(outputs, n, "diagnoses")]
        sites = spec.get("sites") or {}
        out = transform_outcome(_by_name(outputs, acts, "acts"), devs, sites,
                                spec.get("main_category", "diagnosis_main"))
        outputs[name] = ("outcome", out, None, [{"cohort": n} for n in [acts] + list(diags)],
                         {"sites": {k: {kk: sorted(vv) for kk, vv in v.items()} for k, v in sites.items()}},
                         ["transform:outcome"])
    if "prevalent_users" in t:
        spec = t["prevalent_users"] or {}
        name = spec.get("name", "filter_patients")
        src = spec.get("dispenses", "drug_purchases")
        cutoff = to_utc(spec.get("cutoff", cfg.study_start))
        drugs = spec.get("drugs")
        prevalent = filter_prevalent_users(_by_name(outputs, src, "dispenses"), cutoff, drugs)
        kept = {p.patient_id for p in patients} - prevalent
        stats[name] = {"prevalent_users": len(prevalent)}
        outputs[name] = ("patients_filtered", [], kept, [{"cohort": cfg.patients.name}, {"cohort": src}],
                         {"cutoff": format_ts(cutoff), "drugs": sorted(drugs) if drugs else None},
                         ["transform:prevalent_users"])


def write_outputs(result: ExtractionResult, out_dir: Path) -> None:
    """cohorts/<name>/{subjects,events}.csv plus lineage.meta, all deterministic."""
    out_dir.mkdir(parents=True, exist_ok=True)
    people = {p.patient_id: p for p in result.patients}
    for name, (category, events, subjects) in result.outputs.items():
        d = out_dir / "cohorts" / name
        d.mkdir(parents=True, exist_ok=True)
        ids = subjects if subjects is not None else {ev.patient_id for ev in events}
        patients_to_csv([people[i] for i in ids if i in people], d / "subjects.csv")
        events_to_csv(events, d / "events.csv")
    (out_dir / "lineage.meta").write_text(dumps_metadata(result.metadata), encoding="utf-8")

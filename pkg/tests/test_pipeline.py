import json
from collections import Counter

import pytest
import yaml

from cohortforge.errors import ValidationError
from cohortforge.extraction.lineage import (CohortEntry, LINEAGE_FORMAT, build_metadata, code_digest,
                                            read_metadata, write_metadata)
from cohortforge.extraction.pipeline import load_extraction_config, run_extraction
from cohortforge.model import canonical_key, events_from_csv, patients_from_csv
from cohortforge.store.container import read_container

from conftest import oracle_differences


def test_pipeline_equals_oracle(small_pipeline):
    _, _, result, data, _ = small_pipeline
    assert oracle_differences(result, data) == {}


def test_pipeline_equals_generator_truth(small_pipeline):
    corpus, _, result, _, _ = small_pipeline
    assert sorted(result.patients) == sorted(corpus.truth_patients)
    for name, events in corpus.truth_events.items():
        assert Counter(result.events(name)) == Counter(events), name


def test_event_invariants(small_pipeline):
    _, _, result, _, _ = small_pipeline
    known = {p.patient_id for p in result.patients}
    for name, (category, events, _) in result.outputs.items():
        for e in events:
            assert e.patient_id in known and e.category == category and e.value
            assert e.end is None or e.end >= e.start
            assert e.start.tzinfo is not None


def test_exposures_inside_follow_up_without_overlap(small_pipeline):
    _, _, result, _, _ = small_pipeline
    fu = {e.patient_id: e for e in result.events("follow_up")}
    per = {}
    for e in result.events("exposures"):
        f = fu[e.patient_id]
        assert f.start <= e.start <= e.end <= f.end
        per.setdefault((e.patient_id, e.value), []).append(e)
    for spans in per.values():
        spans.sort(key=canonical_key)
        for a, b in zip(spans, spans[1:]):
            assert a.end < b.start


def test_lineage_document(small_pipeline):
    _, _, result, _, run = small_pipeline
    doc = json.loads((run / "lineage.meta").read_text(encoding="utf-8"))
    assert doc["format"] == LINEAGE_FORMAT and doc["code_digest"] == code_digest()
    names = {c["name"] for c in doc["cohorts"]}
    assert {"extract_patients", "exposures", "fractures", "follow_up", "acts"} <= names
    first = doc["cohorts"][0]
    assert list(first) == ["name", "path", "category", "sources", "count", "config_digest", "code_digest",
                           "operations", "subjects", "window"]
    exp = next(c for c in doc["cohorts"] if c["name"] == "exposures")
    assert exp["count"] == len(result.events("exposures"))
    assert exp["operations"][0].startswith("transform:")
    drug = next(c for c in doc["cohorts"] if c["name"] == "drug_purchases")
    assert "drugs.drug_code" in drug["sources"][0]["origin"]
    for c in doc["cohorts"]:
        stored = run / c["path"]
        assert (stored / "subjects.csv").exists()
        if c["category"] not in ("patients", "patients_filtered"):
            assert len(events_from_csv(stored / "events.csv")) == c["count"]
        assert len(patients_from_csv(stored / "subjects.csv")) == c["subjects"]


def test_lineage_rules(tmp_path):
    a = CohortEntry("a", "cohorts/a", "cat", count=1)
    with pytest.raises(ValidationError):
        build_metadata([a, CohortEntry("b", "cohorts/b", "cat")])
    with pytest.raises(ValidationError):
        build_metadata([a, CohortEntry("a", "cohorts/a2", "other")])
    doc = write_metadata([a], tmp_path / "m.json", digest="x")
    assert read_metadata(tmp_path / "m.json") == doc
    (tmp_path / "empty.json").write_text("", encoding="utf-8")
    assert read_metadata(tmp_path / "empty.json")["cohorts"] == []
    assert CohortEntry.from_dict(a.to_dict()) == a


@pytest.mark.parametrize("unit", ["none", "year"])
def test_extraction_invariant_to_slicing_and_workers(small_pipeline, tmp_path, unit):
    from cohortforge.flattening import load_flattening_config, run_flattening

    _, _, result, data, run = small_pipeline
    conf = yaml.safe_load((data / "flatten.yaml").read_text(encoding="utf-8"))
    conf["slicing"]["unit"] = unit
    conf["chunk_rows"] = 97
    for t in conf["tables"].values():
        t["path"] = str(data / t["path"])
    (tmp_path / "flatten.yaml").write_text(yaml.safe_dump(conf), encoding="utf-8")
    run_flattening(load_flattening_config(tmp_path / "flatten.yaml"), tmp_path / "flat.cft", workers=2)
    assert sorted(read_container(tmp_path / "flat.cft").rows(), key=str) == \
        sorted(read_container(run / "flat.cft").rows(), key=str)
    cfg = load_extraction_config(data / "extract.yaml")
    cfg.flat = tmp_path / "flat.cft"
    again = run_extraction(cfg, workers=2)
    assert sorted(again.patients) == sorted(result.patients)
    for name in result.outputs:
        assert Counter(again.events(name)) == Counter(result.events(name)), name


def test_config_errors(tmp_path, small_pipeline):
    _, _, _, data, _ = small_pipeline
    (tmp_path / "bad.yaml").write_text("study: {start: 2010-01-01}\n", encoding="utf-8")
    with pytest.raises(ValidationError):
        load_extraction_config(tmp_path / "bad.yaml")
    cfg = load_extraction_config(data / "extract.yaml")
    with pytest.raises(ValidationError):
        run_extraction(cfg)

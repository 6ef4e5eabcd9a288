import json
from pathlib import Path

import pytest
import yaml
from click.testing import CliRunner

from cohortforge import flattening
from cohortforge.cli import main


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)


def manifest(out: Path) -> dict:
    fields: dict = {}
    for line in (out / "manifest.txt").read_text().splitlines():
        key, _, value = line.partition(": ")
        fields.setdefault(key, []).append(value)
    return fields


SCRIPT = {
    "lineage": "run/lineage.meta",
    "steps": [
        {"op": "load", "name": "exposures"},
        {"op": "load", "name": "extract_patients"},
        {"op": "load", "name": "fractures"},
        {"op": "intersection", "left": "exposures", "right": "extract_patients", "name": "exposed"},
        {"op": "difference", "left": "exposed", "right": "fractures", "name": "final"},
    ],
    "outputs": ["extract_patients", "exposures", "exposed", "final"],
    "flow": {"stages": ["extract_patients", "exposures", "exposed", "final"],
             "rationales": ["exposed", "in base", "no fracture"]},
}


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, run = root / "data", root / "run"
    assert invoke("synth", "--seed", 7, "--patients", 120, "--chunk-rows", 500, "--out", data).exit_code == 0
    assert invoke("flatten", "--config", data / "flatten.yaml", "--workers", 1, "--out", run).exit_code == 0
    assert invoke("extract", "--config", data / "extract.yaml", "--workers", 1, "--out", run).exit_code == 0
    (root / "script.yaml").write_text(yaml.safe_dump(SCRIPT))
    assert invoke("cohort", "--config", root / "script.yaml", "--out", root / "cohorts").exit_code == 0
    return root


def test_synth_and_flatten_outputs(chain):
    m = manifest(chain / "data")
    assert m["command"] == ["synth"] and m["exit_status"] == ["0"]
    assert "seed: 7" in (chain / "data" / "report.txt").read_text()
    fm = manifest(chain / "run")
    assert fm["exit_status"] == ["0"] and fm["command"] == ["extract"]
    assert (chain / "run" / "flat.cft").exists() and "column" in (chain / "run" / "report.txt").read_text()
    rep = json.loads((chain / "run" / "extract_report.txt").read_text())
    assert rep["flat"] == "flat.cft" and rep["cohorts"]["exposures"]["category"] == "exposure"
    assert any(t.startswith("extract ") for t in fm["timing"])


def test_cohort_script(chain):
    out = chain / "cohorts"
    lines = (out / "report.txt").read_text().splitlines()
    final = [line for line in lines if line.startswith("final\t")][0]
    assert final.endswith("Events are exposures. Events contain only subjects with event exposures "
                          "with extract_patients without subjects with event fractures.")
    chart = [line.split("\t") for line in (out / "flowchart.tsv").read_text().splitlines()]
    counts = [int(row[1]) for row in chart]
    assert counts == sorted(counts, reverse=True) and chart[-1][3] == "no fracture"
    assert (out / "lineage.meta").exists()


def test_stats_and_export(chain):
    lin = chain / "cohorts" / "lineage.meta"
    out = chain / "stats"
    r = invoke("stats", "--lineage", lin, "--cohort", "final", "--stat", "gender", "--stat", "code_frequency",
               "--flow", "extract_patients,exposures,final", "--out", out)
    assert r.exit_code == 0, r.output
    assert sorted(p.name for p in (out / "stats").iterdir()) == ["final__code_frequency.csv", "final__gender.csv"]
    assert len((out / "flowchart.tsv").read_text().splitlines()) == 3
    ex = chain / "export"
    r = invoke("export", "--lineage", lin, "--cohort", "final", "--bucket-days", 14, "--out", ex)
    assert r.exit_code == 0, r.output
    assert {"final.counts.sclt", "final.events.sclt", "final.tsv", "report.txt", "manifest.txt"} <= \
        {p.name for p in ex.iterdir()}
    rep = dict(line.split(": ") for line in (ex / "report.txt").read_text().splitlines())
    assert rep["bucket_days"] == "14" and rep["dropped_events"] == "0"
    assert len(manifest(ex)["output"]) == 4


def test_missing_config_and_bad_cohort(tmp_path, chain):
    r = invoke("flatten", "--config", tmp_path / "nope.yaml", "--out", tmp_path / "o")
    assert r.exit_code == 1 and "does not exist" in r.output
    m = manifest(tmp_path / "o")
    assert m["exit_status"] == ["1"] and m["error"]
    r = invoke("export", "--lineage", chain / "cohorts" / "lineage.meta", "--cohort", "zzz", "--out", tmp_path / "e")
    assert r.exit_code == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("steps: [\n")
    assert invoke("cohort", "--config", bad, "--out", tmp_path / "c").exit_code == 1
    assert invoke("flatten", "--config", chain / "data" / "flatten.yaml", "--workers", 0,
                  "--out", tmp_path / "w").exit_code == 1


def test_integrity_failure_exit_2(tmp_path, chain, monkeypatch):
    real = flattening.join_chunk

    def lossy(chunk, prepared):
        out, stages = real(chunk, prepared)
        return out.slice(0, max(0, out.num_rows - 1)), stages

    monkeypatch.setattr(flattening, "join_chunk", lossy)
    out = tmp_path / "f"
    r = invoke("flatten", "--config", chain / "data" / "flatten.yaml", "--workers", 1, "--out", out)
    assert r.exit_code == 2
    assert manifest(out)["exit_status"] == ["2"] and (out / "report.txt").exists()


def test_sanity_failure_exit_2(tmp_path, chain):
    src = chain / "cohorts"
    doc = json.loads((src / "lineage.meta").read_text())
    entry = [e for e in doc["cohorts"] if e["name"] == "final"][0]
    events = src / entry["path"] / "events.csv"
    original = events.read_bytes()
    lines = original.decode().splitlines(keepends=True)
    # shift one punctual event far outside the cohort window
    fields = lines[1].rstrip("\r\n").split(",")
    fields[5], fields[6] = "2031-01-01", ""
    lines[1] = ",".join(fields) + "\r\n"
    events.write_text("".join(lines), newline="")
    try:
        r = invoke("export", "--lineage", src / "lineage.meta", "--cohort", "final", "--out", tmp_path / "x")
        assert r.exit_code == 2 and "outside_window" in r.output
        assert manifest(tmp_path / "x")["exit_status"] == ["2"]
        r = invoke("export", "--lineage", src / "lineage.meta", "--cohort", "final", "--drop-invalid",
                   "--out", tmp_path / "y")
        assert r.exit_code == 0 and "dropped_events: 1" in (tmp_path / "y" / "report.txt").read_text()
    finally:
        events.write_bytes(original)

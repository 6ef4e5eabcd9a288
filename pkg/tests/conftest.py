from __future__ import annotations

from collections import Counter
from datetime import date, datetime, timezone
from pathlib import Path

import pytest

from cohortforge.extraction.pipeline import load_extraction_config, run_extraction
from cohortforge.flattening import load_flattening_config, run_flattening
from cohortforge.model import canonical_key, make_patient
from cohortforge.synthgen.generate import SynthConfig, generate_to

UTC = timezone.utc

# PASS/FAIL lines recorded by the acceptance suite, echoed in the terminal summary
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


def ts(y, m, d) -> datetime:
    return datetime(y, m, d, tzinfo=UTC)


def canon(events) -> list:
    return sorted(events, key=canonical_key)


def multiset(events) -> Counter:
    return Counter(events)


def build_pipeline(cfg: SynthConfig, root: Path, workers: int = 1, chunk_rows=None, slicing_unit="month"):
    data = root / "data"
    run = root / "run"
    run.mkdir(parents=True, exist_ok=True)
    corpus = generate_to(cfg, data, chunk_rows=chunk_rows, slicing_unit=slicing_unit)
    report = run_flattening(load_flattening_config(data / "flatten.yaml"), run / "flat.cft", workers=workers)
    (run / "report.txt").write_text(report.to_text(), encoding="utf-8")
    ecfg = load_extraction_config(data / "extract.yaml")
    ecfg.flat = run / "flat.cft"
    result = run_extraction(ecfg, run, workers=workers)
    return corpus, report, result, data, run


@pytest.fixture(scope="session")
def small_pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    return build_pipeline(SynthConfig(seed=11, n_patients=150), root, chunk_rows=256)


@pytest.fixture
def patients():
    return [make_patient("p1", 1, date(1950, 3, 1)), make_patient("p2", 2, date(1962, 7, 9)),
            make_patient("p3", 2, date(1980, 1, 1), date(2012, 5, 1))]


def oracle_differences(result, data_dir) -> dict:
    """Name -> (pipeline count, oracle count) for every output that differs from the oracle."""
    from cohortforge.synthgen.oracle import oracle_pipeline

    o_patients, o_out = oracle_pipeline(data_dir)
    diffs = {}
    if sorted(result.patients) != sorted(o_patients):
        diffs["patients"] = (len(result.patients), len(o_patients))
    for name, expected in o_out.items():
        if name.endswith(":subjects"):
            got = sorted(result.outputs[name.split(":")[0]][2])
            if got != sorted(expected):
                diffs[name] = (len(got), len(expected))
            continue
        got = result.events(name)
        if Counter(got) != Counter(expected):
            diffs[name] = (len(got), len(expected))
    missing = set(result.outputs) - {n.split(":")[0] for n in o_out} - {"extract_patients"}
    for name in missing:
        diffs[name] = ("not checked", 0)
    return diffs

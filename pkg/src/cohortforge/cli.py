"""Batch command line: synth, flatten, extract, cohort, stats, export.

Every command writes ``manifest.txt`` under ``--out`` whether it succeeds or
not. Exit status: 0 success, 1 invalid input or configuration, 2 data
integrity failure.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import click
import yaml

from .errors import (ContainerError, IntegrityError, SanityCheckError, SchemaError, ValidationError)
from .parallel import default_workers

log = logging.getLogger("cohortforge")

EXIT_OK, EXIT_INVALID, EXIT_INTEGRITY = 0, 1, 2
MANIFEST = "manifest.txt"
REPORT = "report.txt"
LINEAGE = "lineage.meta"
FLAT = "flat.cft"
# extraction shares its output dir with the flat container, whose report it reads
EXTRACT_REPORT = "extract_report.txt"


class Run:
    """Collects phase timings and paths for the manifest."""

    def __init__(self, command: str, out: Path, config: Optional[str], workers: Optional[int]):
        self.command = command
        self.out = out
        self.config = config
        self.workers = workers
        self.inputs: list = []
        self.outputs: list = []
        self.timings: list = []
        self.status = EXIT_OK
        self.error = ""

    @contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings.append((name, time.perf_counter() - t0))

    def manifest(self) -> str:
        lines = [f"command: {self.command}", f"config: {self.config or ''}",
                 f"workers: {self.workers if self.workers is not None else ''}",
                 f"out: {self.out}"]
        lines += [f"input: {p}" for p in self.inputs]
        lines += [f"output: {p}" for p in self.outputs]
        lines += [f"timing: {n} {t:.6f}s" for n, t in self.timings]
        lines.append(f"exit_status: {self.status}")
        if self.error:
            lines.append(f"error: {self.error}")
        return "\n".join(lines) + "\n"


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (IntegrityError, SanityCheckError, ContainerError)):
        return EXIT_INTEGRITY
    return EXIT_INVALID


def _execute(command: str, out: str, config: Optional[str], workers: Optional[int], body) -> None:
    out_dir = Path(out)
    run = Run(command, out_dir, config, workers)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if config is not None and not Path(config).is_file():
            raise ValidationError(f"config file {config} does not exist")
        body(run)
    except (ValidationError, SchemaError, IntegrityError, SanityCheckError, ContainerError,
            FileNotFoundError, KeyError, yaml.YAMLError, json.JSONDecodeError) as exc:
        run.status = _exit_code(exc)
        run.error = str(exc).strip("'\"")
        click.echo(f"cohortforge {command}: {run.error}", err=True)
        for f in getattr(exc, "findings", None) or []:
            click.echo(f"  {f}", err=True)
    finally:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / MANIFEST).write_text(run.manifest(), encoding="utf-8")
        except OSError as exc:
            click.echo(f"cohortforge {command}: cannot write manifest: {exc}", err=True)
    sys.exit(run.status)


def _setup_logging() -> None:
    level = os.environ.get("COHORTFORGE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_yaml(path) -> dict:
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: expected a mapping at top level")
    return data


def _workers(value: Optional[int]) -> int:
    if value is None:
        return default_workers()
    if value < 1:
        raise ValidationError("--workers must be at least 1")
    return value


@click.group()
@click.version_option(package_name="cohortforge")
def main():
    """Claims-data flattening, event extraction and cohort analysis."""
    _setup_logging()


# --- synth ---------------------------------------------------------------------------------

@main.command()
@click.option("--config", "config", type=str, default=None, help="YAML/JSON generator settings.")
@click.option("--seed", type=int, default=None, help="Seed (u64); overrides the config.")
@click.option("--patients", type=int, default=None, help="Number of patients; overrides the config.")
@click.option("--mode", type=click.Choice(["default", "dcir", "pmsi"]), default=None)
@click.option("--chunk-rows", type=int, default=None, help="Flattening chunk size written to flatten.yaml.")
@click.option("--out", required=True, type=str)
def synth(config, seed, patients, mode, chunk_rows, out):
    """Generate a seeded synthetic corpus plus flatten/extract configs."""
    from .synthgen.generate import SynthConfig, generate, write_corpus

    def body(run: Run):
        raw = _load_yaml(config) if config else {}
        chosen = mode or raw.pop("mode", "default")
        raw.pop("mode", None)
        if seed is not None:
            raw["seed"] = seed
        if patients is not None:
            raw["n_patients"] = patients
        if not 0 <= int(raw.get("seed", 42)) < 1 << 64:
            raise ValidationError("--seed must be an unsigned 64-bit integer")
        try:
            preset = {"default": SynthConfig, "dcir": SynthConfig.dcir_like,
                      "pmsi": SynthConfig.pmsi_like}[chosen]()
            cfg = SynthConfig.from_dict({**preset.to_dict(), **raw})
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"invalid synth config: {exc}") from None
        with run.phase("generate"):
            corpus = generate(cfg)
        with run.phase("write"):
            write_corpus(corpus, run.out, chunk_rows=chunk_rows)
        lines = [f"seed: {cfg.seed}", f"mode: {chosen}", f"patients: {cfg.n_patients}"]
        lines += [f"table {k}: {t.num_rows} rows" for k, t in corpus.tables.items()]
        lines += [f"truth {k}: {len(v)} events" for k, v in corpus.truth_events.items()]
        (run.out / REPORT).write_text("\n".join(lines) + "\n", encoding="utf-8")
        run.outputs += [str(run.out / "flatten.yaml"), str(run.out / "extract.yaml"), str(run.out / REPORT)]

    _execute("synth", out, config, None, body)


# --- flatten -------------------------------------------------------------------------------

@main.command()
@click.option("--config", "config", required=True, type=str)
@click.option("--workers", type=int, default=None)
@click.option("--out", required=True, type=str)
def flatten(config, workers, out):
    """Denormalize the star schema into OUT/flat.cft."""
    from .flattening import load_flattening_config, run_flattening

    def body(run: Run):
        run.workers = _workers(workers)
        with run.phase("load_config"):
            cfg = load_flattening_config(config)
        run.inputs += [str(t.path) for t in cfg.tables.values()]
        flat = run.out / FLAT
        try:
            with run.phase("flatten"):
                report = run_flattening(cfg, flat, workers=run.workers)
        except IntegrityError as exc:
            if exc.report is not None:
                (run.out / REPORT).write_text(exc.report.to_text(), encoding="utf-8")
            raise
        (run.out / REPORT).write_text(report.to_text(), encoding="utf-8")
        run.outputs += [str(flat), str(run.out / REPORT)]
        for f in report.findings:
            click.echo(str(f), err=True)

    _execute("flatten", out, config, workers, body)


# --- extract -------------------------------------------------------------------------------

@main.command()
@click.option("--config", "config", required=True, type=str)
@click.option("--workers", type=int, default=None)
@click.option("--flat", type=str, default=None, help="Flat container; default OUT/flat.cft.")
@click.option("--out", required=True, type=str)
def extract(config, workers, flat, out):
    """Run extractors and transformers; writes cohorts and OUT/lineage.meta."""
    from .extraction.pipeline import load_extraction_config, run_extraction

    def body(run: Run):
        run.workers = _workers(workers)
        with run.phase("load_config"):
            cfg = load_extraction_config(config)
        if flat is not None:
            cfg.flat = Path(flat)
        elif cfg.flat is None:
            cfg.flat = run.out / FLAT
        if not cfg.flat.exists():
            raise ValidationError(f"flat container {cfg.flat} does not exist")
        run.inputs.append(str(cfg.flat))
        with run.phase("extract"):
            result = run_extraction(cfg, run.out, workers=run.workers)
        report = {
            "flat": cfg.flat.name,
            "patients": len(result.patients),
            "cohorts": {e.name: {"category": e.category, "count": e.count, "subjects": e.subjects}
                        for e in result.entries},
            "stats": result.stats,
            "findings": [f.to_dict() for f in result.findings],
        }
        (run.out / EXTRACT_REPORT).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")
        run.outputs += [str(run.out / LINEAGE), str(run.out / EXTRACT_REPORT)]

    _execute("extract", out, config, workers, body)


# --- cohort --------------------------------------------------------------------------------

_OPS = ("intersection", "union", "difference")


def run_cohort_script(script: dict, base: Path, out: Path):
    """Execute an ordered op list; returns (named cohorts, outputs, flow or None)."""
    from .cohort import CohortCollection, flow

    if "lineage" not in script:
        raise ValidationError("cohort script needs a 'lineage' path")
    cc = CohortCollection.from_metadata(base / script["lineage"])
    for f in cc.findings:
        click.echo(str(f), err=True)
    env: dict = {}
    for i, step in enumerate(script.get("steps") or []):
        op = step.get("op")
        if op == "load":
            src = step.get("cohort") or step.get("name")
            if src not in cc:
                raise ValidationError(f"step {i}: no cohort {src!r} in lineage")
            c = cc.get(src)
        elif op in _OPS:
            left, right = step.get("left"), step.get("right")
            for ref in (left, right):
                if ref not in env:
                    raise ValidationError(f"step {i}: unknown operand {ref!r}")
            c = getattr(env[left], op)(env[right])
        else:
            raise ValidationError(f"step {i}: unknown op {op!r}")
        name = step.get("name") or c.name
        if name != c.name:
            c = dataclasses.replace(c, name=name)
        env[name] = c
    outputs = script.get("outputs") or list(env)
    for name in outputs:
        if name not in env:
            raise ValidationError(f"output {name!r} was not produced by any step")
    fl = None
    if script.get("flow"):
        stages = script["flow"].get("stages") or []
        for name in stages:
            if name not in env:
                raise ValidationError(f"flow stage {name!r} was not produced by any step")
        fl = flow([env[n] for n in stages], script["flow"].get("rationales"))
    return env, outputs, fl


@main.command()
@click.option("--config", "config", required=True, type=str, help="Cohort script (YAML op list).")
@click.option("--out", required=True, type=str)
def cohort(config, out):
    """Apply a declarative cohort script to an extraction lineage."""
    from .cohort import save_collection
    from .stats import flowchart_from_flow

    def body(run: Run):
        script = _load_yaml(config)
        with run.phase("operations"):
            env, outputs, fl = run_cohort_script(script, Path(config).parent, run.out)
        with run.phase("write"):
            save_collection([env[n] for n in outputs], run.out)
            lines = []
            for n in outputs:
                c = env[n]
                lines.append(f"{n}\tsubjects={c.subject_count}\tevents={c.event_count}\t{c.describe()}")
                for f in c.findings:
                    lines.append(f"{n}\t{f}")
            if fl is not None:
                chart = flowchart_from_flow(fl, labels=script["flow"]["stages"])
                (run.out / "flowchart.tsv").write_text(chart.to_text(), encoding="utf-8")
                run.outputs.append(str(run.out / "flowchart.tsv"))
            (run.out / REPORT).write_text("\n".join(lines) + "\n", encoding="utf-8")
        run.outputs += [str(run.out / LINEAGE), str(run.out / REPORT)]

    _execute("cohort", out, config, None, body)


# --- stats ---------------------------------------------------------------------------------

@main.command()
@click.option("--config", "config", type=str, default=None, help="YAML with lineage/cohorts/stats/flow keys.")
@click.option("--lineage", type=str, default=None)
@click.option("--cohort", "cohorts", multiple=True, help="Cohort name (repeatable).")
@click.option("--stat", "stat_names", multiple=True, help="Statistic name (repeatable); default all.")
@click.option("--reference-date", type=str, default=None)
@click.option("--flow", "flow_names", type=str, default=None, help="Comma-separated cohort names.")
@click.option("--out", required=True, type=str)
def stats(config, lineage, cohorts, stat_names, reference_date, flow_names, out):
    """Descriptive statistics (CSV plot data) and flowcharts."""
    from .cohort import CohortCollection
    from .stats import event_stats, flowchart_from_metadata, registered_stats, write_report

    def body(run: Run):
        conf = _load_yaml(config) if config else {}
        base = Path(config).parent if config else Path(".")
        lin = Path(lineage) if lineage else (base / conf["lineage"] if "lineage" in conf else None)
        if lin is None:
            raise ValidationError("no lineage document given (--lineage or 'lineage' in the config)")
        run.inputs.append(str(lin))
        cc = CohortCollection.from_metadata(lin)
        names = list(cohorts) or list(conf.get("cohorts") or sorted(cc.cohorts_names))
        which = list(stat_names) or list(conf.get("stats") or registered_stats())
        ref = reference_date or conf.get("reference_date")
        summary = []
        with run.phase("stats"):
            for n in names:
                if n not in cc:
                    raise ValidationError(f"no cohort {n!r} in lineage")
                c = cc.get(n)
                for s in which:
                    params = {"reference_date": str(ref)} if s == "gender_age_bucket" and ref else {}
                    rep = event_stats(c, s, **params)
                    run.outputs.append(str(write_report(rep, run.out / "stats")))
                    summary.append(rep.to_text())
        stages = flow_names.split(",") if flow_names else list((conf.get("flow") or {}).get("stages") or [])
        if stages:
            rats = (conf.get("flow") or {}).get("rationales")
            with run.phase("flowchart"):
                chart = flowchart_from_metadata(cc, stages, rats)
            (run.out / "flowchart.tsv").write_text(chart.to_text(), encoding="utf-8")
            run.outputs.append(str(run.out / "flowchart.tsv"))
        (run.out / REPORT).write_text("\n".join(summary), encoding="utf-8")
        run.outputs.append(str(run.out / REPORT))

    _execute("stats", out, config, None, body)


# --- export --------------------------------------------------------------------------------

@main.command()
@click.option("--config", "config", type=str, default=None, help="YAML with lineage/cohort/bucket_days keys.")
@click.option("--lineage", type=str, default=None)
@click.option("--cohort", "cohort_name", type=str, default=None)
@click.option("--bucket-days", type=int, default=None)
@click.option("--qualified/--plain", default=None, help="Key features by category:value instead of value.")
@click.option("--duration-weighted", is_flag=True, default=False)
@click.option("--drop-invalid", is_flag=True, default=False, help="Drop events failing sanity checks.")
@click.option("--out", required=True, type=str)
def export(config, lineage, cohort_name, bucket_days, qualified, duration_weighted, drop_invalid, out):
    """Export a cohort as dense tensors in the SCLT1 format."""
    from .cohort import CohortCollection
    from .features import FeatureMapping, export_features

    def body(run: Run):
        conf = _load_yaml(config) if config else {}
        base = Path(config).parent if config else Path(".")
        lin = Path(lineage) if lineage else (base / conf["lineage"] if "lineage" in conf else None)
        name = cohort_name or conf.get("cohort")
        if lin is None or not name:
            raise ValidationError("export needs a lineage document and a cohort name")
        run.inputs.append(str(lin))
        cc = CohortCollection.from_metadata(lin)
        if name not in cc:
            raise ValidationError(f"no cohort {name!r} in lineage")
        c = cc.get(name)
        bd = bucket_days or int(conf.get("bucket_days", 30))
        q = qualified if qualified is not None else bool(conf.get("qualified", False))
        with run.phase("export"):
            m = FeatureMapping.from_cohort(c, bd, conf.get("window"), q)
            res = export_features(c, m, run.out, drop_invalid=drop_invalid or bool(conf.get("drop_invalid")),
                                  duration_weighted=duration_weighted, prefix=name)
        counts, tensor = res["counts"], res["events"]
        lines = [f"cohort: {name}", f"patients: {counts.shape[0]}", f"codes: {m.n_codes}",
                 f"buckets: {m.n_buckets}", f"bucket_days: {bd}", f"dropped_events: {res['dropped']}",
                 f"count_total: {counts.total()!r}", f"tensor_total: {tensor.total()!r}"]
        (run.out / REPORT).write_text("\n".join(lines) + "\n", encoding="utf-8")
        run.outputs += [str(p) for p in res["paths"].values()] + [str(run.out / REPORT)]

    _execute("export", out, config, None, body)


if __name__ == "__main__":
    main()

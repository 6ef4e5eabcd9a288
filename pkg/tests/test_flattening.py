from datetime import date

import pytest

import cohortforge.flattening as fl
from cohortforge.errors import IntegrityError, SchemaError, ValidationError
from cohortforge.flattening import (Dimension, JoinSpec, SlicingSpec, flatten, left_join,
                                    load_flattening_config, run_flattening, slice_central)
from cohortforge.store.container import Container, read_container
from cohortforge.store.table import Table

from starschema import expected_row_count, random_star, reference_rows


def _null_key(row):
    return tuple((v is None, "" if v is None else str(v)) for v in row)


def small_star():
    central = Table.from_rows([("flow", "int64", False), ("pid", "string"), ("day", "date")],
                              [(1, "p1", date(2013, 1, 5)), (2, "p2", date(2013, 2, 5)),
                               (3, None, None), (4, "p1", date(2014, 1, 1))])
    drugs = Table.from_rows([("flow", "int64", False), ("code", "string")],
                            [(1, "A"), (1, "B"), (4, "C"), (9, "Z")])
    people = Table.from_rows([("pid", "string", False), ("flow", "int64")], [("p1", 0), ("p2", 0)])
    join = JoinSpec("claims", (Dimension("drugs", (("flow", "flow"),)),
                               Dimension("people", (("pid", "pid"),))))
    return central, {"drugs": drugs, "people": people}, join


def test_left_join_fanout_and_unmatched():
    left = Table.from_rows([("k", "int64")], [(1,), (2,), (None,)])
    right = Table.from_rows([("k", "int64"), ("v", "string")], [(1, "a"), (1, "b"), (None, "n")])
    out = left_join(left, right, [("k", "k")])
    assert out.column_names == ["k", "v"]
    assert sorted(out.rows(), key=_null_key) == sorted([(1, "a"), (1, "b"), (2, None), (None, None)],
                                                        key=_null_key)


def test_flatten_rowids_and_collisions(tmp_path):
    central, dims, join = small_star()
    report = flatten(central, dims, join, out_path=tmp_path / "f.cft")
    flat = read_container(tmp_path / "f.cft")
    assert "_rowid" in flat.columns and "drugs__rowid" in flat.columns
    # people.flow collides with the central flow column and is prefixed
    assert "people__flow" in flat.columns
    assert report.column_sources["people__flow"] == "people.flow"
    assert flat.num_rows == 5 == report.flat_rows
    assert report.distinct_central_keys_out == 4
    assert [s.rows_after for s in report.stages] == [5, 5]
    assert not report.findings


def test_collision_without_prefix_fails(tmp_path):
    central, dims, join = small_star()
    with pytest.raises(SchemaError):
        flatten(central, dims, join, out_path=tmp_path / "f.cft", collision_prefix=False)


def test_join_key_type_mismatch(tmp_path):
    central, dims, join = small_star()
    dims["drugs"] = Table.from_rows([("flow", "string"), ("code", "string")], [("1", "A")])
    with pytest.raises(SchemaError):
        flatten(central, dims, join, out_path=tmp_path / "f.cft")


def test_flatten_requires_out_path():
    central, dims, join = small_star()
    with pytest.raises(ValidationError):
        flatten(central, dims, join)


def test_slicing_partitions():
    central, _, _ = small_star()
    parts = slice_central(central, SlicingSpec("day", "month"))
    assert list(parts.slices) == ["2013-01", "2013-02", "2014-01", "unsliced"]
    parts = slice_central(central, SlicingSpec("day", "year"))
    assert {k: v.num_rows for k, v in parts.slices.items()} == {"2013": 2, "2014": 1, "unsliced": 1}
    with pytest.raises(SchemaError):
        slice_central(central, SlicingSpec("pid", "month"))
    with pytest.raises(SchemaError):
        SlicingSpec(None, "month")


@pytest.mark.parametrize("workers", [1, 3])
def test_chunking_and_workers_do_not_change_output(tmp_path, workers):
    central, dims, join = small_star()
    flatten(central, dims, join, out_path=tmp_path / "a.cft", chunk_rows=100)
    flatten(central, dims, join, out_path=tmp_path / "b.cft", chunk_rows=1, workers=workers)
    assert Container(tmp_path / "b.cft").num_chunks == 4
    assert read_container(tmp_path / "a.cft").equals(read_container(tmp_path / "b.cft"))


def test_lost_central_rows_raise_integrity_error(tmp_path, monkeypatch):
    central, dims, join = small_star()
    original = fl.join_chunk

    def lossy(chunk, prepared):
        out, stages = original(chunk, prepared)
        return out.slice(0, max(0, out.num_rows - 1)), stages

    monkeypatch.setattr(fl, "join_chunk", lossy)
    with pytest.raises(IntegrityError) as exc:
        flatten(central, dims, join, out_path=tmp_path / "f.cft", chunk_rows=1)
    codes = {f.code for f in exc.value.findings}
    assert "central_keys_lost" in codes
    assert exc.value.report.distinct_central_keys_out < 4


def test_sparsity_warning(tmp_path):
    central = Table.from_rows([("k", "int64")], [(1,)])
    dim = Table.from_rows([("k", "int64"), ("v", "int64")], [(1, i) for i in range(11)])
    report = flatten(central, {"d": dim}, JoinSpec("c", (Dimension("d", (("k", "k"),)),)),
                     out_path=tmp_path / "f.cft")
    assert [f.code for f in report.findings] == ["not_block_sparse"]
    assert report.expansion_factor == 11


@pytest.mark.parametrize("seed", range(25))
def test_random_star_matches_reference(tmp_path, seed):
    central, dims, join = random_star(seed)
    report = flatten(central, dims, join, SlicingSpec("k_day", "month"), out_path=tmp_path / "f.cft",
                     chunk_rows=7)
    flat = read_container(tmp_path / "f.cft")
    assert flat.num_rows == expected_row_count(central, dims, join)
    assert set(flat.to_pylist("_rowid")) == set(range(central.num_rows))
    cols = [c for c in flat.column_names]
    expected = reference_rows(central, dims, join, report.column_sources, cols)
    assert sorted(flat.rows(), key=_null_key) == sorted(expected, key=_null_key)


def test_config_loading_and_run(tmp_path):
    (tmp_path / "claims.csv").write_text("flow,pid,day\n1,p1,2013-01-05\n2,,2013-02-01\n", encoding="utf-8")
    (tmp_path / "drugs.csv").write_text("flow,code\n1,A\n1,B\n", encoding="utf-8")
    (tmp_path / "cfg.yaml").write_text(
        "tables:\n"
        "  claims: {path: claims.csv, columns: [[flow, int64, false], [pid, string], [day, date]]}\n"
        "  drugs: {path: drugs.csv, columns: [[flow, int64], [code, string]], join: [[flow, flow]]}\n"
        "central: claims\n"
        "slicing: {column: day, unit: year}\n"
        "chunk_rows: 1\n", encoding="utf-8")
    cfg = load_flattening_config(tmp_path / "cfg.yaml")
    assert [d.table for d in cfg.join.dimensions] == ["drugs"]
    report = run_flattening(cfg, tmp_path / "flat.cft")
    assert report.flat_rows == 3 and report.slices == {"2013": 2}
    assert '"expansion_factor": 1.5' in report.to_text()
    (tmp_path / "bad.yaml").write_text("tables: {}\ncentral: nope\n", encoding="utf-8")
    with pytest.raises(SchemaError):
        load_flattening_config(tmp_path / "bad.yaml")

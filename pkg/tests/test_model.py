from datetime import date, datetime, timedelta, timezone

import pytest
from hypothesis import given, strategies as st

from cohortforge.errors import IntervalError, ValidationError
from cohortforge.model import (Event, Gender, canonical_sort, events_from_csv, events_to_csv, format_ts,
                               is_utc, make_continuous, make_patient, make_punctual, overlaps, parse_ts,
                               patients_from_csv, patients_to_csv, to_utc)

from conftest import ts


def test_to_utc_normalizes_all_inputs():
    assert to_utc(date(2013, 8, 8)) == ts(2013, 8, 8)
    assert to_utc(datetime(2013, 8, 8)) == ts(2013, 8, 8)
    paris = timezone(timedelta(hours=2))
    assert to_utc(datetime(2013, 8, 8, 2, tzinfo=paris)) == ts(2013, 8, 8)
    assert to_utc("2013-08-08") == ts(2013, 8, 8)
    assert to_utc("2013-08-08T10:00:00Z") == datetime(2013, 8, 8, 10, tzinfo=timezone.utc)
    assert is_utc(to_utc("2013-08-08T10:00:00+03:00"))
    with pytest.raises(ValidationError):
        to_utc("not a date")
    with pytest.raises(ValidationError):
        to_utc(42)


def test_event_validation():
    e = make_punctual("p1", "drug_purchase", "ATC1", start=date(2013, 1, 1))
    assert e.is_punctual and e.stop == e.start and e.weight == 1.0
    with pytest.raises(IntervalError):
        make_continuous("p1", "exposure", "X", start=date(2013, 2, 1), end=date(2013, 1, 1))
    with pytest.raises(ValidationError):
        make_punctual("", "c", "v", start=date(2013, 1, 1))
    with pytest.raises(ValidationError):
        make_punctual("p", "c", "v", weight=float("nan"), start=date(2013, 1, 1))
    with pytest.raises(ValidationError):
        make_continuous("p", "c", "v", start=date(2013, 1, 1))


def test_patient_validation():
    p = make_patient("p", 2, date(1950, 1, 1))
    assert p.gender is Gender.FEMALE and p.death_date is None
    with pytest.raises(IntervalError):
        make_patient("p", 1, date(1950, 1, 1), date(1940, 1, 1))
    with pytest.raises(ValueError):
        make_patient("p", 7, date(1950, 1, 1))


def test_overlaps_closed_intervals():
    a = make_continuous("p", "c", "v", start=date(2013, 1, 1), end=date(2013, 1, 10))
    b = make_punctual("p", "c", "v", start=date(2013, 1, 10))
    c = make_punctual("p", "c", "v", start=date(2013, 1, 11))
    assert overlaps(a, b) and overlaps(b, a)
    assert not overlaps(a, c)


def test_canonical_sort_is_total():
    t = ts(2013, 1, 1)
    events = [Event("p", "c", None, "v", 2.0, t), Event("p", "c", None, "v", 1.0, t),
              Event("p", "c", "g", "v", 1.0, t), Event("a", "c", None, "v", 1.0, t)]
    assert canonical_sort(events) == canonical_sort(list(reversed(events)))
    assert canonical_sort(events)[0].patient_id == "a"


def test_format_and_parse_timestamps():
    assert format_ts(ts(2013, 8, 8)) == "2013-08-08"
    t = datetime(2013, 8, 8, 9, 30, tzinfo=timezone.utc)
    assert parse_ts(format_ts(t)) == t
    assert parse_ts("") is None and format_ts(None) == ""


def test_event_csv_round_trip(tmp_path):
    events = [make_continuous("p1", "exposure", "A,B", 1.5, date(2013, 1, 1), date(2013, 2, 1)),
              make_punctual("p2", "act", "X", start=date(2012, 1, 1), group_id="s1")]
    path = tmp_path / "e.csv"
    text = events_to_csv(events, path)
    assert text.splitlines()[0] == "patientID,category,groupID,value,weight,start,end"
    assert events_from_csv(path) == canonical_sort(events)


def test_patient_csv_round_trip(tmp_path, patients):
    path = tmp_path / "p.csv"
    patients_to_csv(patients, path)
    assert sorted(patients_from_csv(path)) == sorted(patients)


_texts = st.text(alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="\x00"),
                 min_size=1, max_size=8)


@given(st.lists(st.tuples(_texts, _texts, st.integers(0, 20000), st.integers(0, 400),
                          st.booleans(), st.floats(-1e6, 1e6, allow_nan=False)), max_size=20))
def test_event_csv_round_trip_property(rows):
    import tempfile
    from pathlib import Path

    events = []
    for pid, val, day, length, cont, w in rows:
        start = date(1970, 1, 1) + timedelta(days=day)
        if cont:
            events.append(make_continuous(pid, "cat", val, w, start, start + timedelta(days=length)))
        else:
            events.append(make_punctual(pid, "cat", val, w, start))
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "e.csv"
        events_to_csv(events, path)
        assert events_from_csv(path) == canonical_sort(events)

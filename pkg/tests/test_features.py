import random
from datetime import date, datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cohortforge.cohort import Cohort, make_cohort
from cohortforge.errors import SanityCheckError, ValidationError
from cohortforge.features import (DenseTensor, FeatureMapping, build_count_matrix, build_event_tensor,
                                  decode_tensor, encode_tensor, export_features, read_tensor, sanity_check)
from cohortforge.model import Event, make_continuous, make_patient, make_punctual

UTC = timezone.utc
WINDOW = (date(2013, 1, 1), date(2013, 12, 31))
W0 = datetime(2013, 1, 1, tzinfo=UTC)


def day(n: int) -> datetime:
    return W0 + timedelta(days=n)


def random_cohort(seed: int, n_patients=6, n_events=30, codes="ABCD") -> Cohort:
    r = random.Random(seed)
    pts = [make_patient(f"p{i}", r.choice([1, 2]), date(1950, 1, 1)) for i in range(n_patients)]
    ev = []
    for _ in range(n_events):
        pid = f"p{r.randrange(n_patients)}"
        s = r.randint(0, 364)
        w = r.choice([1.0, 2.0, 0.5, 3.25])
        if r.random() < 0.5:
            ev.append(Event(pid, "drug", None, r.choice(codes), w, day(s)))
        else:
            ev.append(Event(pid, "exposure", None, r.choice(codes), w, day(s), day(min(364, s + r.randint(0, 90)))))
    return make_cohort("c", pts, ev, WINDOW)


def raster_tensor(c: Cohort, m: FeatureMapping) -> np.ndarray:
    pts = sorted(c.subjects)
    arr = np.zeros((len(pts), m.n_buckets, m.n_codes))
    for e in c.events:
        r, k = pts.index(e.patient_id), m.code_index[m.code_of(e)]
        s = (e.start - W0).days
        if e.end is None:
            arr[r, s // m.bucket_days, k] += e.weight
            continue
        buckets = {d // m.bucket_days for d in range(s, (e.end - W0).days + 1)}
        for b in buckets:
            arr[r, b, k] += 1.0
    return arr


def test_mapping():
    c = random_cohort(1)
    m = FeatureMapping.from_cohort(c, 30)
    assert m.n_codes == len({e.value for e in c.events}) and m.n_buckets == 13
    q = FeatureMapping.from_cohort(c, 30, qualified=True)
    assert all(":" in code for code in q.code_index)
    with pytest.raises(ValidationError):
        FeatureMapping({"a": 1}, 30, WINDOW)
    with pytest.raises(ValidationError):
        FeatureMapping({"a": 0}, 0, WINDOW)
    with pytest.raises(ValidationError):
        FeatureMapping({"a": 0}, 30, (date(2014, 1, 1), date(2013, 1, 1)))


def test_small_tensor_values():
    pts = [make_patient("a", 1, date(1950, 1, 1)), make_patient("b", 2, date(1950, 1, 1))]
    ev = [make_punctual("a", "drug", "X", 2.0, date(2013, 1, 5)),
          make_continuous("b", "exp", "Y", 1.0, date(2013, 1, 25), date(2013, 2, 10))]
    c = make_cohort("c", pts, ev, (date(2013, 1, 1), date(2013, 5, 1)))
    m = FeatureMapping.from_cohort(c, 30)
    counts = build_count_matrix(c, m)
    assert counts.array().tolist() == [[2.0, 0.0], [0.0, 1.0]] and counts.patients == ["a", "b"]
    t = build_event_tensor(c, m)
    assert t.shape == (2, 5, 2)
    assert t.array()[1, :, 1].tolist() == [1.0, 1.0, 0.0, 0.0, 0.0]
    dw = build_event_tensor(c, m, duration_weighted=True)
    assert dw.array()[1, 0, 1] == pytest.approx(6 / 17) and dw.total() == pytest.approx(3.0)
    assert build_count_matrix(c, m, dtype="i64").data.dtype == np.int64
    half = make_cohort("h", pts[:1], [make_punctual("a", "drug", "X", 0.5, date(2013, 1, 5))], WINDOW)
    with pytest.raises(ValidationError):
        build_count_matrix(half, FeatureMapping.from_cohort(half, 30), dtype="i64")


@pytest.mark.parametrize("seed", range(20))
def test_totals_shape_and_raster_oracle(seed):
    c = random_cohort(seed)
    m = FeatureMapping.from_cohort(c, 7 + seed)
    total_w = sum(e.weight for e in c.events)
    counts = build_count_matrix(c, m)
    assert counts.total() == pytest.approx(total_w)
    dw = build_event_tensor(c, m, duration_weighted=True)
    assert dw.shape == (len(c.subjects), m.n_buckets, m.n_codes)
    assert dw.total() == pytest.approx(total_w)
    ind = build_event_tensor(c, m)
    np.testing.assert_allclose(ind.array(), raster_tensor(c, m))


def test_binary_round_trip_and_errors(tmp_path):
    c = random_cohort(3)
    m = FeatureMapping.from_cohort(c, 30)
    res = export_features(c, m, tmp_path, prefix="c")
    for key in ("counts", "events"):
        back = read_tensor(res["paths"][key])
        assert back.shape == res[key].shape and back.data.tobytes() == res[key].data.tobytes()
    side = res["paths"]["sidecar"].read_text().splitlines()
    assert side[0] == "bucket_days\t30" and side[1] == "window\t2013-01-01\t2013-12-31"
    assert sum(1 for line in side if line.startswith("patient\t")) == 6
    raw = encode_tensor(DenseTensor((2, 2), "i64", np.arange(4)))
    assert decode_tensor(raw).data.tolist() == [0, 1, 2, 3]
    with pytest.raises(ValidationError):
        decode_tensor(b"XXXXX" + raw[5:])
    with pytest.raises(ValidationError):
        decode_tensor(raw[:-1])
    with pytest.raises(ValidationError):
        DenseTensor((3,), "f64", np.zeros(2))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e300, 1e300, allow_nan=False), max_size=24), st.sampled_from([(1,), (2,), (3,)]))
def test_round_trip_property(values, trailing):
    n = len(values) - len(values) % trailing[0]
    t = DenseTensor((n // trailing[0],) + trailing, "f64", np.array(values[:n], dtype=np.float64))
    assert decode_tensor(encode_tensor(t)).data.tobytes() == t.data.tobytes()


VIOLATIONS = ("unknown_patient", "not_utc", "end_before_start", "outside_window", "unknown_code")


def inject(e: Event, kind: str) -> Event:
    if kind == "unknown_patient":
        return e._replace(patient_id="ghost")
    if kind == "not_utc":
        return e._replace(start=e.start.replace(tzinfo=None), end=None)
    if kind == "end_before_start":
        return e._replace(end=e.start - timedelta(days=3)) if e.start > day(3) else \
            e._replace(start=day(10), end=day(5))
    if kind == "outside_window":
        return e._replace(start=day(400), end=None)
    return e._replace(value="NEVER-SEEN")


@pytest.mark.parametrize("seed", range(30))
def test_sanity_checks_flag_every_injected_violation(seed):
    r = random.Random(1000 + seed)
    clean = random_cohort(seed)
    m = FeatureMapping.from_cohort(clean, 30)
    assert sanity_check(clean, m) == []
    events = list(clean.events)
    injected = {}
    for i in r.sample(range(len(events)), 8):
        kind = r.choice(VIOLATIONS)
        events[i] = inject(events[i], kind)
        injected[i] = kind
    # bypass cohort validation so that corrupt events reach the exporter
    bad = Cohort.__new__(Cohort)
    bad.__dict__.update(clean.__dict__, events=tuple(events))
    found = {}
    for f in sanity_check(bad, m):
        idx = int(f.message.split(":")[0].split()[1])
        found.setdefault(idx, set()).add(f.code)
    assert set(found) == set(injected)
    assert all(injected[i] in found[i] for i in injected)
    with pytest.raises(SanityCheckError) as exc:
        build_count_matrix(bad, m)
    assert len(exc.value.findings) >= len(injected)
    dropped = build_count_matrix(bad, m, drop_invalid=True)
    assert dropped.dropped == len(injected)

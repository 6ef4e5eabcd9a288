from collections import Counter
from datetime import date, timedelta

import pytest
from hypothesis import given, settings, strategies as st

from cohortforge.errors import ValidationError
from cohortforge.extraction.transformers import (ExposureSpec, FollowUpSpec, TracklossSpec, add_months,
                                                 dispenses_without_follow_up, filter_prevalent_users,
                                                 merge_dispenses, transform_exposure, transform_followup,
                                                 transform_observation_period, transform_outcome,
                                                 transform_trackloss)
from cohortforge.model import Event, make_continuous, make_patient, make_punctual
from cohortforge.synthgen.oracle import (oracle_exposure, oracle_followup, oracle_observation_period,
                                         oracle_outcome, oracle_prevalent, oracle_trackloss)

from conftest import ts

D0 = date(2013, 1, 1)


def dispense(pid, day, drug="DrugA"):
    return make_punctual(pid, "drug_purchase", drug, start=D0 + timedelta(days=day))


def follow(pid, s, e):
    return make_continuous(pid, "follow_up", "follow_up", start=D0 + timedelta(days=s),
                           end=D0 + timedelta(days=e))


def test_add_months_clamps_month_end():
    jan31 = (date(2013, 1, 31) - date(1970, 1, 1)).days
    assert add_months(jan31, 1) == (date(2013, 2, 28) - date(1970, 1, 1)).days
    assert add_months(jan31, 13) == (date(2014, 2, 28) - date(1970, 1, 1)).days


def test_observation_period():
    ev = [dispense("p1", -100), dispense("p1", 20), dispense("p2", 50)]
    out = transform_observation_period(ev, D0, date(2014, 12, 31))
    assert [(e.patient_id, e.start, e.end) for e in out] == [
        ("p1", ts(2013, 1, 1), ts(2014, 12, 31)), ("p2", ts(2013, 2, 20), ts(2014, 12, 31))]
    assert transform_observation_period([], D0, date(2014, 1, 1)) == []
    with pytest.raises(ValidationError):
        transform_observation_period(ev, date(2014, 1, 1), D0)


def test_trackloss():
    pts = [make_patient(p, 1, date(1950, 1, 1)) for p in ("p1", "p2", "p3")]
    monthly = [dispense("p1", 30 * k) for k in range(24)]
    single = [dispense("p2", 0)]
    out = transform_trackloss(pts, monthly + single, TracklossSpec(date(2014, 12, 31)))
    # monthly dispenses up to 2014-11-22 cover the study end; a single early one does not
    assert [(e.patient_id, e.start) for e in out] == [("p2", ts(2013, 1, 31))]
    stopped = [dispense("p1", 30 * k) for k in range(12)]
    out = transform_trackloss(pts, stopped, TracklossSpec(date(2014, 12, 31), gap_months=4))
    assert [e.start for e in out] == [ts(2013, 12, 27)]
    out = transform_trackloss(pts, [dispense("p1", 30 * k) for k in range(25)],
                              TracklossSpec(date(2015, 1, 31)))
    assert out == []
    with pytest.raises(ValidationError):
        TracklossSpec(D0, gap_months=0)


def test_followup():
    pts = [make_patient("p1", 1, date(1950, 1, 1)), make_patient("p2", 2, date(1950, 1, 1), date(2013, 6, 1))]
    obs = [make_continuous(p, "observation_period", "observation_period", start=D0, end=date(2014, 12, 31))
           for p in ("p1", "p2")]
    out = transform_followup(pts, obs, [])
    assert [(e.patient_id, e.start, e.end) for e in out] == [
        ("p1", ts(2013, 1, 1), ts(2014, 12, 31)), ("p2", ts(2013, 1, 1), ts(2013, 6, 1))]
    lost = [make_punctual("p1", "trackloss", "trackloss", start=date(2014, 1, 1))]
    out = transform_followup(pts, obs, lost, FollowUpSpec(delay_days=30))
    assert out[0].start == ts(2013, 1, 31) and out[0].end == ts(2014, 1, 1)
    with pytest.raises(ValidationError):
        transform_followup(pts, obs + obs[:1], [])


def test_exposure_worked_examples():
    alice_fu = [make_continuous("Alice", "follow_up", "follow_up", start=date(2013, 1, 1), end=date(2014, 12, 31))]
    one = transform_exposure([make_punctual("Alice", "drug_purchase", "DrugA", start=date(2013, 8, 8))],
                             alice_fu, ExposureSpec(purchase_duration=60))
    assert one == [Event("Alice", "exposure", None, "DrugA", 1.0, ts(2013, 8, 8), ts(2013, 10, 7))]
    assert merge_dispenses([0, 10], 30, 30) == [(0, 40, 2)]
    # 30 uncovered days between [0,30] and 61 merge; 31 do not
    assert merge_dispenses([0, 61], 30, 30) == [(0, 91, 2)]
    assert merge_dispenses([0, 62], 30, 30) == [(0, 30, 1), (62, 92, 1)]


def test_exposure_clamped_to_follow_up_and_min_purchases():
    fu = [follow("p", 10, 100)]
    out = transform_exposure([dispense("p", 0), dispense("p", 95)], fu, ExposureSpec(gap_tolerance=0))
    assert [(e.start, e.end) for e in out] == [(ts(2013, 1, 11), ts(2013, 1, 31)),
                                               (ts(2013, 4, 6), ts(2013, 4, 11))]
    assert transform_exposure([dispense("p", 20)], fu, ExposureSpec(min_purchases=2)) == []
    unl = transform_exposure([dispense("p", 0), dispense("p", 20), dispense("p", 60)], fu,
                             ExposureSpec(strategy="unlimited"))
    assert [(e.start, e.end) for e in unl] == [(ts(2013, 1, 21), ts(2013, 4, 11))]
    assert dispenses_without_follow_up([dispense("q", 1), dispense("p", 1)], fu) == 1
    with pytest.raises(ValidationError):
        ExposureSpec(strategy="forever")


def test_outcome():
    sites = {"hip": {"acts": ["A1"], "diagnoses": ["F1"]}}
    act = make_punctual("p", "medical_act", "A1", start=date(2013, 3, 2), group_id="s1")
    diag = make_punctual("p", "diagnosis_main", "F1", start=date(2013, 3, 1), group_id="s1")
    assert transform_outcome([act], [], sites) == []
    out = transform_outcome([act], [diag], sites)
    assert out == [Event("p", "outcome", "s1", "hip", 1.0, ts(2013, 3, 1))]
    assoc = diag._replace(category="diagnosis_associated")
    assert transform_outcome([act], [assoc], sites) == []
    loose = act._replace(group_id=None, start=ts(2013, 3, 1))
    assert transform_outcome([loose], [diag], sites) == [Event("p", "outcome", None, "hip", 1.0, ts(2013, 3, 1))]
    with pytest.raises(ValidationError):
        transform_outcome([act], [diag], {"hip": {"acts": ["A1"]}})


def test_prevalent_users():
    ev = [dispense("p1", 0), dispense("p1", 300), dispense("p2", 400), dispense("p3", 10, "Other")]
    assert filter_prevalent_users(ev, date(2013, 6, 1)) == {"p1", "p3"}
    assert filter_prevalent_users(ev, date(2013, 6, 1), drugs={"DrugA"}) == {"p1"}
    assert filter_prevalent_users([], D0) == set()
    assert filter_prevalent_users(ev, date(2012, 1, 1)) == set()


# --- randomized oracle checks ------------------------------------------------------------------

_dispense_sets = st.lists(st.tuples(st.sampled_from(["p1", "p2", "p3"]), st.integers(-60, 800),
                                    st.sampled_from(["DrugA", "DrugB"])), max_size=25)


@settings(max_examples=150, deadline=None)
@given(_dispense_sets, st.integers(1, 90), st.integers(0, 60), st.integers(1, 3),
       st.sampled_from(["limited", "unlimited"]), st.integers(-30, 200), st.integers(300, 900))
def test_exposure_matches_oracle(rows, duration, gap, min_p, strategy, fs, fe):
    disp = [dispense(p, d, drug) for p, d, drug in rows]
    fu = [follow("p1", fs, fe), follow("p2", fs + 50, fe)]
    spec = ExposureSpec(duration, gap, strategy, min_p)
    got = transform_exposure(disp, fu, spec)
    assert Counter(got) == Counter(oracle_exposure(disp, fu, duration, gap, strategy, min_p))


@settings(max_examples=100, deadline=None)
@given(_dispense_sets, st.integers(1, 6), st.integers(5, 90))
def test_trackloss_followup_observation_match_oracle(rows, gap_months, duration):
    pts = [make_patient(p, 1, date(1950, 1, 1), date(2014, 6, 1) if p == "p3" else None)
           for p in ("p1", "p2", "p3")]
    disp = [dispense(p, d, drug) for p, d, drug in rows]
    end = date(2014, 12, 31)
    obs = transform_observation_period(disp, D0, end)
    assert Counter(obs) == Counter(oracle_observation_period(disp, D0, end))
    tl = transform_trackloss(pts, disp, TracklossSpec(end, gap_months, duration))
    assert Counter(tl) == Counter(oracle_trackloss(pts, disp, end, gap_months, duration))
    fu = transform_followup(pts, obs, tl, FollowUpSpec(15))
    assert Counter(fu) == Counter(oracle_followup(pts, obs, tl, 15))
    cutoff = date(2013, 7, 1)
    assert filter_prevalent_users(disp, cutoff) == oracle_prevalent(disp, cutoff)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["p1", "p2"]), st.integers(0, 20), st.sampled_from(["A1", "A2", "B"]),
                          st.none() | st.sampled_from(["s1", "s2"])), max_size=10),
       st.lists(st.tuples(st.sampled_from(["p1", "p2"]), st.integers(0, 20), st.sampled_from(["F1", "F2", "X"]),
                          st.none() | st.sampled_from(["s1", "s2"]),
                          st.sampled_from(["diagnosis_main", "diagnosis_associated"])), max_size=10))
def test_outcome_matches_oracle(acts, diags):
    sites = {"hip": {"acts": ["A1"], "diagnoses": ["F1"]}, "wrist": {"acts": ["A2"], "diagnoses": ["F1", "F2"]}}
    a = [make_punctual(p, "medical_act", c, start=D0 + timedelta(days=d), group_id=g) for p, d, c, g in acts]
    dg = [make_punctual(p, cat, c, start=D0 + timedelta(days=d), group_id=g) for p, d, c, g, cat in diags]
    assert Counter(transform_outcome(a, dg, sites)) == Counter(oracle_outcome(a, dg, sites))

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from bgforecast.datamodel import InvalidInputError, ShapeError, WindowSet
from bgforecast.evaluation import (
    EvalReport,
    SubjectMetrics,
    classification_report,
    delay,
    evaluate_forecast,
    event_counts,
    event_sensitivity,
    rmse,
    series_time_gain,
    time_gain,
)


def brute_delay(g, g_hat, max_shift):
    """Written independently: explicit loops over shifts and indices."""
    best, best_k = None, 0
    for k in range(max_shift + 1):
        total, count = 0.0, 0
        for i in range(len(g) - k):
            a, b = g[i], g_hat[i + k]
            if a == a and b == b:  # skip NaN
                total += (a - b) ** 2
                count += 1
        if count == 0:
            continue
        d = total / count
        if best is None or d < best:
            best, best_k = d, k
    return best_k


# --- RMSE ---------------------------------------------------------------------

def test_rmse_examples():
    assert rmse([1, 2, 3], [1, 2, 3]) == 0.0
    assert rmse([100, 110], [110, 100]) == 10.0
    with pytest.raises(ShapeError):
        rmse([1, 2], [1])
    with pytest.raises(InvalidInputError):
        rmse([], [])


@given(st.lists(st.floats(0, 500), min_size=1, max_size=20), st.integers(0, 10 ** 6))
def test_rmse_symmetric_nonnegative(g, seed):
    gh = np.random.default_rng(seed).uniform(0, 500, len(g))
    assert rmse(g, gh) == rmse(gh, g) >= 0
    assert rmse(g, g) == 0


# --- sensitivity --------------------------------------------------------------

def test_sensitivity_examples():
    g = np.array([[100, 65], [60, 90], [100, 100]])
    assert event_sensitivity(g, g, "hypo") == 1.0
    truth = np.array([[60.0, 80]] * 4)
    pred = np.array([[65.0, 80]] * 3 + [[75.0, 80]])
    assert event_sensitivity(truth, pred, "hypo") == 0.75
    assert event_counts(truth, pred, "hypo") == (3, 1)
    assert event_sensitivity(np.full((3, 2), 100.0), np.full((3, 2), 100.0), "hyper") is None


def test_sensitivity_detection_anywhere_in_window():
    truth = np.array([[190.0, 150, 150]])
    pred = np.array([[150.0, 150, 185]])
    assert event_sensitivity(truth, pred, "hyper") == 1.0
    with pytest.raises(InvalidInputError):
        event_sensitivity(truth, pred, "both")


@settings(max_examples=50)
@given(st.lists(st.booleans(), min_size=1, max_size=20))
def test_sensitivity_monotone_in_detected_events(detected):
    truth = np.full((len(detected), 2), 60.0)
    pred = np.where(np.array(detected)[:, None], 60.0, 100.0) * np.ones((1, 2))
    before = event_sensitivity(truth, pred, "hypo")
    after = event_sensitivity(np.vstack([truth, [[60, 60]]]), np.vstack([pred, [[60, 60]]]), "hypo")
    assert after >= before


# --- delay and time gain ----------------------------------------------------------

def test_delay_examples():
    g = np.sin(np.arange(30) / 3.0) * 50 + 120
    assert delay(g, g, 6) == 0
    lagged = np.concatenate([[g[0], g[0]], g[:-2]])  # g_hat_i = g_{i-2}
    assert delay(g, lagged, 6) == 2
    assert delay(np.full(10, 5.0), np.full(10, 5.0), 6) == 0
    with pytest.raises(InvalidInputError):
        delay([], [], 0)
    with pytest.raises(InvalidInputError):
        delay([1.0, 2.0], [1.0, 2.0], 2)


@settings(max_examples=300, deadline=None)
@given(st.integers(2, 50), st.integers(0, 10 ** 6), st.booleans())
def test_delay_matches_brute_force(L, seed, with_nan):
    rng = np.random.default_rng(seed)
    g = rng.normal(120, 40, L).round(1)
    g_hat = rng.normal(120, 40, L).round(1)
    if with_nan:
        g[rng.random(L) < 0.2] = np.nan
    max_shift = int(rng.integers(0, L))
    assert delay(g, g_hat, max_shift) == brute_delay(list(g), list(g_hat), max_shift)


def test_time_gain_examples():
    g = np.sin(np.arange(40) / 3.0) * 50 + 120
    assert time_gain(g, g, 30) == 30
    assert time_gain(g, np.concatenate([[g[0]] * 2, g[:-2]]), 30) == 20
    with pytest.raises(InvalidInputError):
        time_gain(g, g, 45)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 60), st.integers(0, 10 ** 6), st.sampled_from([30, 60]))
def test_time_gain_in_range(L, seed, ph):
    rng = np.random.default_rng(seed)
    tg = time_gain(rng.normal(120, 30, L), rng.normal(120, 30, L), ph)
    assert 0 <= tg <= ph


# --- reports -----------------------------------------------------------------------

def _forecast_windows(g, H=6, sid="A", start=0):
    """Windows over one series with anchors at every step."""
    n = len(g) - H
    anchors = np.arange(n)
    targets = np.stack([g[a + 1:a + 1 + H] for a in anchors])
    return WindowSet(
        obs=np.zeros((n, 2, 1)), target_deltas=targets - g[anchors, None],
        anchor_glucose=g[anchors].astype(float), labels=np.zeros(n, np.int8),
        subject_ids=np.full(n, sid, dtype=object),
        anchor_time=start + 300 * anchors.astype(np.int64), series_start=np.full(n, start, np.int64),
    )


def test_perfect_forecast_report():
    g = 120 + 80 * np.sin(np.arange(60) / 5.0)
    ws = _forecast_windows(g)
    rep = evaluate_forecast(ws, ws.target_deltas, 30)
    m = rep.per_subject["A"]
    assert m.rmse == 0 and m.tg == 30 and m.hyper_sen == 1.0 and m.hypo_sen == 1.0
    assert m.n_windows == len(ws)


def test_persistence_forecast_lags_by_horizon():
    """Predicting zero change at PH=30 lags the reference by six steps, so TG = 0."""
    g = 120 + 60 * np.sin(np.arange(200) / 8.0)
    ws = _forecast_windows(g)
    rep = evaluate_forecast(ws, np.zeros_like(ws.target_deltas), 30)
    assert rep.per_subject["A"].tg == 0.0
    assert_allclose(rep.per_subject["A"].rmse, rmse(ws.targets[:, -1], ws.anchor_glucose))


def test_series_time_gain_handles_gaps_and_series():
    g = 120 + 60 * np.sin(np.arange(80) / 6.0)
    a = _forecast_windows(g, start=0)
    b = _forecast_windows(g, start=10 ** 6)
    both = WindowSet.concat([a.take(np.arange(0, len(a), 2)), b])
    assert series_time_gain(both, both.target_deltas, 30) == 30
    single = a.take([0])
    assert series_time_gain(single, single.target_deltas, 30) is None


def test_aggregate_excludes_not_applicable():
    rep = EvalReport(30, {
        "A": SubjectMetrics(10.0, 20.0, 0.5, None, 5),
        "B": SubjectMetrics(20.0, 10.0, 1.0, 0.8, 7),
    })
    agg = rep.aggregate
    assert agg.rmse == 15 and agg.tg == 15 and agg.hyper_sen == 0.75 and agg.hypo_sen == 0.8
    assert agg.n_windows == 12
    rows = rep.table_rows()
    assert rows[1]["Hypo Sen"] == "n.a." and rows[0]["Hyper Sen"] == "75.0000"


def test_report_serialization(tmp_path):
    rep = EvalReport(60, {"A": SubjectMetrics(10.0, 20.0, None, None, 5)})
    d = json.loads(rep.to_json(tmp_path / "r.json").read_text())
    assert d["per_subject"]["A"]["hypo_sen"] is None and d["ph_minutes"] == 60
    lines = rep.to_csv(tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "subject,ph_minutes,RMSE,TG,Hyper Sen,Hypo Sen,n_windows"
    merged = EvalReport.merge([rep, EvalReport(60, {"B": SubjectMetrics(1.0, 1.0, 1.0, 1.0, 1)})])
    assert sorted(merged.per_subject) == ["A", "B"]


def test_evaluate_shape_checks():
    ws = _forecast_windows(np.full(20, 100.0))
    with pytest.raises(ShapeError):
        evaluate_forecast(ws, np.zeros((len(ws), 3)), 30)


# --- classification -------------------------------------------------------------

def test_classification_perfect():
    r = classification_report([0, 1, 2, 2], [0, 1, 2, 2], 3)
    assert r.accuracy == 1.0 and r.macro_f1 == 1.0 and r.undefined_classes == []


def test_classification_symmetric_two_class():
    truth = [0, 0, 0, 1, 1, 1]
    pred = [0, 0, 1, 1, 1, 0]
    r = classification_report(truth, pred, 2)
    assert_allclose(r.accuracy, 4 / 6)
    assert_allclose(r.macro_f1, 2 / 3)
    assert_array_equal(r.confusion, [[2, 1], [1, 2]])


def test_classification_undefined_class_flagged(tmp_path):
    r = classification_report([0, 0, 1], [0, 0, 0], 3, ["a", "b", "c"])
    assert 2 in r.undefined_classes and 1 in r.undefined_classes
    assert r.per_class_precision[2] == 0.0
    lines = r.confusion_csv(tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "true,predicted,count" and "b,a,1" in lines and len(lines) == 10
    assert json.loads(r.to_json(tmp_path / "c.json").read_text())["confusion"][1] == [1, 0, 0]


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40))
def test_classification_invariants(pairs):
    y, p = zip(*pairs)
    r = classification_report(y, p, 4)
    assert r.confusion.sum() == len(y)
    assert_array_equal(r.confusion.sum(axis=1), np.bincount(y, minlength=4))
    weighted_recall = sum(r.per_class_recall[c] * np.sum(np.array(y) == c) for c in range(4)) / len(y)
    assert_allclose(r.accuracy, weighted_recall)
    for v in (r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1):
        assert 0 <= v <= 1


def test_classification_errors():
    with pytest.raises(ShapeError):
        classification_report([0, 1], [0], 2)
    with pytest.raises(InvalidInputError):
        classification_report([0, 2], [0, 1], 2)

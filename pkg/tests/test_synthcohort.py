import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from bgforecast.datamodel import ValidationError
from bgforecast.synthcohort import (
    SEPARATION_MARGIN,
    PatientParams,
    make_cohort,
    pairwise_min_distance,
    params_to_dict,
    sample_patient_params,
    simulate_subject,
    simulate_trace,
    with_insulin_outlier,
    write_cohort,
)
from bgforecast.ingest import parse_subject_log

QUIET = dict(noise_sd=0.0, gap_prob=0.0, long_gap_prob=0.0, meal_jitter_min=0.0,
             bolus_error_sd=0.0, missed_bolus_prob=0.0)


def ode_oracle(basal, k, s_c, grams, tau, meal_min, t_end, dt=0.01):
    """Fine-step Euler integration of dG/dt = -k (G - Gb) + S_C * A * t/tau^2 exp(-t/tau)."""
    ts = np.arange(0.0, t_end, dt)
    g = np.empty_like(ts)
    cur = basal
    for i, t in enumerate(ts):
        g[i] = cur
        e = t - meal_min
        rate = grams * e / tau ** 2 * np.exp(-e / tau) if e > 0 else 0.0
        cur = cur + dt * (-k * (cur - basal) + s_c * rate)
    return ts, g


def test_equilibrium_without_meals():
    p = PatientParams(meal_schedule=((3.0, 1.0, 0.0),), bolus_ratio=0.0, carb_sensitivity=1e-9, **QUIET)
    tr = simulate_trace(p, 2)
    assert_allclose(tr.glucose, p.basal_glucose, atol=1e-6)


def test_single_meal_rises_then_relaxes():
    p = PatientParams(meal_schedule=((0.0, 50.0, 0.0),), bolus_ratio=0.0, **QUIET)
    tr = simulate_trace(p, 1)
    g = tr.glucose
    assert g.max() > p.basal_glucose
    assert abs(g[12 * 12] - p.basal_glucose) < 1.0
    (t_meal, grams), = tr.meals
    ts, ref = ode_oracle(p.basal_glucose, p.glucose_decay, p.carb_sensitivity, grams, p.carb_tau,
                         (t_meal - tr.times[0]) / 60.0, 12 * 60)
    rise_sim = g.max() - p.basal_glucose
    rise_ref = ref.max() - p.basal_glucose
    assert_allclose(rise_sim, rise_ref, rtol=0.05)
    peak_min_sim = 5 * np.argmax(g)
    assert abs(peak_min_sim - ts[np.argmax(ref)]) <= 10


def test_determinism_and_channels():
    p = PatientParams(seed=7)
    a, b = simulate_subject(p, 2), simulate_subject(p, 2)
    assert a.cgm == b.cgm and a.bolus == b.bolus and a.carbs == b.carbs and a.basal == b.basal
    assert len(a.carbs) == 6 and len(a.basal) == 6
    assert len(a.cgm) < 2 * 288  # occasional gaps
    vals = np.array(a.cgm)[:, 1]
    assert vals.min() >= 40 and vals.max() <= 400
    assert simulate_subject(PatientParams(seed=8), 2).cgm != a.cgm


def test_param_validation():
    with pytest.raises(ValidationError):
        PatientParams(basal_glucose=170)
    with pytest.raises(ValidationError):
        PatientParams(insulin_sensitivity=0)
    with pytest.raises(ValidationError):
        PatientParams(meal_schedule=((25.0, 10.0, 1.0),))
    with pytest.raises(ValidationError):
        simulate_subject(PatientParams(), 0)


def test_well_separated_audit():
    params = sample_patient_params(6, "well_separated", seed=3)
    assert pairwise_min_distance(params) >= SEPARATION_MARGIN
    cohort = make_cohort(6, "well_separated", seed=3, days=10)
    means = np.sort([np.mean(np.array(s.cgm)[:, 1]) for s in cohort])
    assert np.diff(means).min() >= 10.0
    assert [s.subject_id for s in cohort] == [f"S0{i}" for i in range(1, 7)]


def test_overlapping_event_rates_similar():
    a, b = make_cohort(2, "overlapping", seed=5, days=20)
    assert len(a.carbs) == len(b.carbs)
    ratio = len(a.bolus) / len(b.bolus)
    assert 0.85 < ratio < 1.15
    grams_a = np.mean([g for _, g in a.carbs])
    grams_b = np.mean([g for _, g in b.carbs])
    assert abs(grams_a - grams_b) < 8.0


def test_cohort_errors():
    with pytest.raises(ValidationError):
        make_cohort(1)
    with pytest.raises(ValidationError):
        sample_patient_params(3, "clustered")


def test_insulin_outlier_and_roundtrip(tmp_path):
    params = sample_patient_params(3, "overlapping", seed=1)
    out = with_insulin_outlier(params, 1, 2.0)
    assert out[1].insulin_sensitivity == 2 * params[1].insulin_sensitivity
    assert out[0] is params[0]
    assert params_to_dict(out[1])["seed"] == params[1].seed
    cohort = make_cohort(3, "overlapping", seed=1, days=1, params=out)
    paths = write_cohort(cohort, tmp_path)
    back = parse_subject_log(paths[0])
    assert_array_equal(np.array(back.cgm), np.array(cohort[0].cgm))

"""Synthetic type-1 diabetes cohorts with known, per-subject metabolic parameters.

Each subject follows a linear single-compartment glucose model stepped every
5 minutes::

    dG/dt = -k (G - G_basal) - S_I * insulin_action(t) + S_C * carb_absorption(t) + noise

Insulin action and carbohydrate absorption both follow a gamma(2) profile
(``t/tau^2 exp(-t/tau)``), integrated exactly over each step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .datamodel import STEP_SECONDS, SubjectLog, ValidationError
from .sampling import derive_seed

DEFAULT_EPOCH = 1_577_836_800  # 2020-01-01T00:00:00Z, a midnight
STEP_MIN = STEP_SECONDS / 60.0
SENSOR_RANGE = (40.0, 400.0)
SEPARATION_MARGIN = 1.0  # min pairwise distance in the normalized parameter space

DEFAULT_MEALS = ((7.5, 45.0, 10.0), (12.5, 60.0, 15.0), (19.0, 70.0, 15.0))


@dataclass(frozen=True)
class PatientParams:
    basal_glucose: float = 120.0
    insulin_sensitivity: float = 40.0  # mg/dL drop per unit
    carb_sensitivity: float = 3.5  # mg/dL rise per gram
    glucose_decay: float = 0.01  # 1/min
    meal_schedule: tuple[tuple[float, float, float], ...] = DEFAULT_MEALS
    bolus_ratio: float = 0.08  # units per gram
    noise_sd: float = 1.5  # mg/dL per step, process noise
    seed: int = 0
    basal_rate: float = 0.9  # units/hour, dawn rate is 1.25x
    insulin_tau: float = 55.0  # minutes to peak insulin action
    carb_tau: float = 35.0  # minutes to peak absorption
    bolus_error_sd: float = 0.25  # log-normal spread of bolus vs. meal size
    meal_jitter_min: float = 30.0
    missed_bolus_prob: float = 0.05
    gap_prob: float = 0.02
    long_gap_prob: float = 0.001
    long_gap_samples: tuple[int, int] = (6, 36)

    def __post_init__(self):
        if not 90.0 <= self.basal_glucose <= 160.0:
            raise ValidationError("basal_glucose must lie in [90, 160] mg/dL")
        for name in ("insulin_sensitivity", "carb_sensitivity", "glucose_decay",
                     "insulin_tau", "carb_tau"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        for name in ("bolus_ratio", "noise_sd", "basal_rate", "bolus_error_sd",
                     "meal_jitter_min"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        for name in ("missed_bolus_prob", "gap_prob", "long_gap_prob"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValidationError(f"{name} must be a probability")
        for hour, grams, sd in self.meal_schedule:
            if not (0 <= hour < 24) or grams <= 0 or sd < 0:
                raise ValidationError(f"invalid meal entry {(hour, grams, sd)}")

    def vector(self) -> np.ndarray:
        """Normalized coordinates used for the separation audit."""
        return np.array([
            self.basal_glucose / 12.0,
            self.basal_rate / 0.15,
            self.insulin_sensitivity / 8.0,
            self.carb_sensitivity / 0.6,
        ])


def _gamma_cdf(t, tau):
    """Fraction of a gamma(2, tau) profile delivered by elapsed time ``t`` (minutes)."""
    t = np.maximum(t, 0.0)
    return 1.0 - (1.0 + t / tau) * np.exp(-t / tau)


@dataclass
class SimulationTrace:
    """Ground-truth glucose on the full grid (before sensor clipping and gaps)."""

    times: np.ndarray
    glucose: np.ndarray
    log: SubjectLog
    meals: list[tuple[int, float]] = field(default_factory=list)
    boluses: list[tuple[int, float]] = field(default_factory=list)


def _schedule_events(p: PatientParams, days: int, start: int, rng: np.random.Generator):
    meals, boluses = [], []
    for day in range(days):
        for hour, grams_mean, grams_sd in p.meal_schedule:
            jitter = rng.uniform(-p.meal_jitter_min, p.meal_jitter_min) if p.meal_jitter_min else 0.0
            minute = day * 1440 + hour * 60 + jitter
            # events land 0-4 minutes after a sensor stamp, like pump logs
            step = max(0, int(minute // STEP_MIN))
            t = start + step * STEP_SECONDS + int(rng.integers(0, 241))
            grams = max(5.0, rng.normal(grams_mean, grams_sd)) if grams_sd else grams_mean
            grams = round(grams)
            meals.append((t, float(grams)))
            missed = rng.random() < p.missed_bolus_prob
            err = math.exp(rng.normal(0.0, p.bolus_error_sd)) if p.bolus_error_sd else 1.0
            dose = round(p.bolus_ratio * grams * err, 1)
            if not missed and dose > 0:
                boluses.append((t, float(dose)))
    return meals, boluses


def _basal_events(p: PatientParams, days: int, start: int):
    events = []
    for day in range(days):
        base = start + day * 86400
        events.append((base, round(p.basal_rate, 3)))
        events.append((base + 4 * 3600, round(1.25 * p.basal_rate, 3)))
        events.append((base + 8 * 3600, round(p.basal_rate, 3)))
    return events


def _gap_mask(n: int, p: PatientParams, rng: np.random.Generator) -> np.ndarray:
    keep = rng.random(n) >= p.gap_prob
    starts = np.flatnonzero(rng.random(n) < p.long_gap_prob)
    lo, hi = p.long_gap_samples
    for s in starts:
        keep[s:s + int(rng.integers(lo, hi + 1))] = False
    keep[0] = True
    return keep


def simulate_trace(p: PatientParams, days: int, subject_id: str = "S0",
                   start: int = DEFAULT_EPOCH) -> SimulationTrace:
    if days < 1:
        raise ValidationError("days must be >= 1")
    rng = np.random.default_rng(p.seed)
    meals, boluses = _schedule_events(p, days, start, rng)
    n = days * 288
    times = start + STEP_SECONDS * np.arange(n, dtype=np.int64)
    minutes = (times - start) / 60.0

    def delivered(events, tau):
        # amount (units or grams) delivered during each step [t_n, t_n + 5 min)
        out = np.zeros(n)
        for t_ev, amount in events:
            m0 = (t_ev - start) / 60.0
            elapsed = minutes - m0
            live = (elapsed + STEP_MIN > 0) & (elapsed < 12 * tau)
            out[live] += amount * (_gamma_cdf(elapsed[live] + STEP_MIN, tau)
                                   - _gamma_cdf(elapsed[live], tau))
        return out

    insulin = delivered(boluses, p.insulin_tau)
    carbs = delivered(meals, p.carb_tau)
    decay = math.exp(-p.glucose_decay * STEP_MIN)
    noise = rng.normal(0.0, p.noise_sd, size=n) if p.noise_sd else np.zeros(n)
    glucose = np.empty(n)
    g = p.basal_glucose
    for i in range(n):
        glucose[i] = g
        drive = p.carb_sensitivity * carbs[i] - p.insulin_sensitivity * insulin[i] + noise[i]
        g = p.basal_glucose + (g - p.basal_glucose) * decay + drive
        g = min(max(g, 25.0), 595.0)

    keep = _gap_mask(n, p, rng)
    sensor = np.clip(np.round(glucose, 1), *SENSOR_RANGE)
    log = SubjectLog(
        subject_id=subject_id,
        cgm=list(zip(times[keep].tolist(), sensor[keep].tolist())),
        basal=_basal_events(p, days, start),
        bolus=boluses,
        carbs=meals,
    )
    return SimulationTrace(times, glucose, log, meals, boluses)


def simulate_subject(p: PatientParams, days: int, subject_id: str = "S0",
                     start: int = DEFAULT_EPOCH) -> SubjectLog:
    """Simulate ``days`` of CGM, basal, bolus and carbohydrate logs."""
    return simulate_trace(p, days, subject_id, start).log


def sample_patient_params(n: int, separation: str = "well_separated", seed: int = 0
                          ) -> list[PatientParams]:
    """Draw ``n`` parameter sets.

    ``well_separated`` spreads basal glucose over [92, 158] mg/dL and basal
    rates over [0.5, 1.5] u/h in shuffled, evenly spaced steps, so every pair
    differs by at least `SEPARATION_MARGIN` in `PatientParams.vector` space.
    ``overlapping`` draws everything around one shared centre.
    """
    if n < 2:
        raise ValidationError("a cohort needs at least 2 subjects")
    if separation not in ("well_separated", "overlapping"):
        raise ValidationError(f"unknown separation {separation!r}")
    rng = np.random.default_rng(seed)
    out = []
    if separation == "well_separated":
        rates = rng.permutation(np.linspace(0.5, 1.5, n))
        for i in range(n):
            s_i = rng.uniform(30.0, 55.0)
            s_c = rng.uniform(3.0, 4.5)
            out.append(PatientParams(
                insulin_sensitivity=float(s_i),
                carb_sensitivity=float(s_c),
                glucose_decay=float(rng.uniform(0.008, 0.014)),
                bolus_ratio=float(round(s_c / s_i * rng.uniform(0.9, 0.96), 4)),
                basal_rate=float(round(rates[i], 3)),
                insulin_tau=float(rng.uniform(45.0, 70.0)),
                carb_tau=float(rng.uniform(25.0, 45.0)),
                seed=derive_seed(seed, "subject", i),
            ))
        bg = np.linspace(92.0, 158.0, n)
        for i in range(n):
            out[i] = replace(out[i], basal_glucose=float(bg[i]))
    else:
        for i in range(n):
            s_i = rng.normal(40.0, 2.0)
            s_c = rng.normal(3.6, 0.15)
            out.append(PatientParams(
                basal_glucose=float(np.clip(rng.normal(120.0, 3.0), 90, 160)),
                insulin_sensitivity=float(s_i),
                carb_sensitivity=float(s_c),
                glucose_decay=float(rng.normal(0.011, 0.0005)),
                bolus_ratio=float(round(s_c / s_i * 0.92, 4)),
                basal_rate=float(round(rng.normal(0.9, 0.03), 3)),
                insulin_tau=float(rng.normal(55.0, 2.0)),
                carb_tau=float(rng.normal(35.0, 2.0)),
                seed=derive_seed(seed, "subject", i),
            ))
    return out


def _sensor_mean(p: PatientParams, days: int) -> float:
    return float(np.mean(np.asarray(simulate_subject(p, days).cgm)[:, 1]))


def space_mean_glucose(params: list[PatientParams], days: int, rounds: int = 3
                       ) -> list[PatientParams]:
    """Shift basal levels so simulated mean sensor glucose is evenly spaced.

    The meal/bolus offset of each subject is measured on the same horizon it
    will be simulated on, and basal levels are re-solved a few times because
    sensor clipping makes the offset depend mildly on the basal level.
    """
    n = len(params)
    out = list(params)
    offsets = np.array([_sensor_mean(p, days) - p.basal_glucose for p in out])
    order = np.argsort(offsets + np.array([p.basal_glucose for p in out]), kind="stable")
    for _ in range(rounds):
        lo = 90.0 + offsets.max()
        hi = 160.0 + offsets.min()
        targets = np.linspace(lo, hi, n)
        for rank, i in enumerate(order):
            bg = float(np.clip(round(targets[rank] - offsets[i], 2), 90.0, 160.0))
            out[i] = replace(out[i], basal_glucose=bg)
        offsets = np.array([_sensor_mean(p, days) - p.basal_glucose for p in out])
    return out


def pairwise_min_distance(params: list[PatientParams]) -> float:
    vecs = np.stack([p.vector() for p in params])
    d = np.linalg.norm(vecs[:, None, :] - vecs[None, :, :], axis=2)
    return float(d[np.triu_indices(len(params), 1)].min())


def make_cohort(n: int, separation: str = "well_separated", seed: int = 0, days: int = 30,
                params: list[PatientParams] | None = None) -> list[SubjectLog]:
    """Simulate a cohort; subject ids are ``S01``, ``S02``, ..."""
    if params is None:
        params = sample_patient_params(n, separation, seed)
        if separation == "well_separated":
            params = space_mean_glucose(params, days)
    if len(params) < 2:
        raise ValidationError("a cohort needs at least 2 subjects")
    return [simulate_subject(p, days, subject_id=f"S{i + 1:02d}") for i, p in enumerate(params)]


def with_insulin_outlier(params: list[PatientParams], index: int, factor: float = 2.0
                         ) -> list[PatientParams]:
    """Copy of ``params`` where one subject's insulin sensitivity is scaled by ``factor``."""
    out = list(params)
    out[index] = replace(out[index], insulin_sensitivity=out[index].insulin_sensitivity * factor)
    return out


def write_cohort(cohort: list[SubjectLog], out_dir: str | Path) -> list[Path]:
    from .ingest import write_subject_log

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [write_subject_log(s, out_dir / f"{s.subject_id}.csv") for s in cohort]


def params_to_dict(p: PatientParams) -> dict:
    return {f.name: getattr(p, f.name) for f in fields(p)}

"""Resampling, gap splitting, insulin/carb curves, normalization and windowing."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import (
    CHANNELS,
    STEP_SECONDS,
    GlucoseSeries,
    InvalidInputError,
    SubjectLog,
    ValidationError,
    WindowSet,
    label_windows,
)

log = logging.getLogger(__name__)

MAX_MISSING_SAMPLES = 4  # a gap of 20 minutes is still interpolated
MIN_SEGMENT_SAMPLES = 30


@dataclass(frozen=True)
class CurveParams:
    iob_tau: float = 3600.0
    carb_rise_tau: float = 900.0
    carb_decay_tau: float = 5400.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValidationError(f"{f.name} must be strictly positive")


@dataclass(frozen=True)
class WindowConfig:
    obs_len: int = 24
    horizon: int = 6
    stride: int = 1
    multimodal: bool = True

    def __post_init__(self):
        if self.obs_len < 1 or self.horizon < 1 or self.stride < 1:
            raise ValidationError("obs_len, horizon and stride must be >= 1")

    @property
    def n_features(self) -> int:
        return len(CHANNELS) if self.multimodal else 1

    @classmethod
    def for_horizon(cls, ph_minutes: int, **kw) -> "WindowConfig":
        if ph_minutes == 30:
            return cls(obs_len=24, horizon=6, **kw)
        if ph_minutes == 60:
            return cls(obs_len=48, horizon=12, **kw)
        raise ValidationError(f"prediction horizon must be 30 or 60 minutes, got {ph_minutes}")


@dataclass
class SegmentReport:
    kept: int = 0
    discarded_short: int = 0
    discarded_lengths: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class NormStats:
    """Per-channel training minima and maxima."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=float)
        hi = np.asarray(self.max, dtype=float)
        if lo.shape != hi.shape or np.any(hi < lo):
            raise ValidationError("NormStats needs matching shapes and max >= min")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def span(self) -> np.ndarray:
        return self.max - self.min

    def scale(self, x: np.ndarray, channels: slice | Sequence[int] | None = None) -> np.ndarray:
        lo, span = self.min, self.span
        if channels is not None:
            lo, span = lo[channels], span[channels]
        safe = np.where(span > 0, span, 1.0)
        out = np.clip((x - lo) / safe, 0.0, 1.0)
        return np.where(span > 0, out, 0.0)

    def unscale(self, x: np.ndarray) -> np.ndarray:
        return self.min + x * self.span

    def to_dict(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["min"], dtype=float), np.asarray(d["max"], dtype=float))


# --- curves ----------------------------------------------------------------

def _elapsed(events, grid: np.ndarray):
    """Elapsed seconds [G x E] and amounts [E]; negative elapsed masked out."""
    if len(events) == 0:
        return None, None
    ev = np.asarray(events, dtype=float).reshape(-1, 2)
    dt = np.asarray(grid, dtype=float)[:, None] - ev[None, :, 0]
    return dt, ev[:, 1]


def insulin_on_board(bolus_events, grid, params: CurveParams = CurveParams()) -> np.ndarray:
    """Exponentially decaying insulin on board, superposed over boluses."""
    grid = np.asarray(grid)
    dt, dose = _elapsed(bolus_events, grid)
    if dt is None:
        return np.zeros(grid.shape[0])
    active = dt >= 0
    decay = np.exp(-np.where(active, dt, 0.0) / params.iob_tau)
    return np.sum(np.where(active, dose * decay, 0.0), axis=1)


def carbs_on_board(carb_events, grid, params: CurveParams = CurveParams()) -> np.ndarray:
    """Rise-then-decay carbohydrate curve, zero at ingestion."""
    grid = np.asarray(grid)
    dt, grams = _elapsed(carb_events, grid)
    if dt is None:
        return np.zeros(grid.shape[0])
    active = dt >= 0
    d = np.where(active, dt, 0.0)
    rise = -np.expm1(-d / params.carb_rise_tau)
    decay = np.exp(-d / params.carb_decay_tau)
    return np.sum(np.where(active, grams * rise * decay, 0.0), axis=1)


def basal_on_grid(basal_events, grid) -> np.ndarray:
    """Step-function basal rate: the latest rate set at or before each grid time."""
    grid = np.asarray(grid)
    if len(basal_events) == 0:
        return np.zeros(grid.shape[0])
    ev = np.asarray(basal_events, dtype=float).reshape(-1, 2)
    idx = np.searchsorted(ev[:, 0], grid, side="right") - 1
    return np.where(idx >= 0, ev[np.maximum(idx, 0), 1], 0.0)


# --- resampling ------------------------------------------------------------

def _split_points(times: np.ndarray, max_missing: int = MAX_MISSING_SAMPLES) -> list[tuple[int, int]]:
    """Index ranges [a, b) of CGM readings separated by at most ``max_missing`` missing samples."""
    missing = np.rint(np.diff(times) / STEP_SECONDS).astype(np.int64) - 1
    breaks = np.flatnonzero(missing > max_missing) + 1
    bounds = np.concatenate([[0], breaks, [len(times)]])
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def resample_and_split(subject: SubjectLog, params: CurveParams = CurveParams(),
                       min_length: int = MIN_SEGMENT_SAMPLES,
                       return_report: bool = False,
                       max_missing: int = MAX_MISSING_SAMPLES):
    """Turn a synchronized log into gap-free 5-minute `GlucoseSeries` segments.

    Readings are linearly interpolated onto a grid anchored at each segment's
    first reading. More than ``max_missing`` (default four) consecutive
    missing samples start a new
    segment; segments shorter than ``min_length`` samples are dropped.
    """
    report = SegmentReport()
    out: list[GlucoseSeries] = []
    if not subject.cgm:
        return (out, report) if return_report else out
    cgm = np.asarray(subject.cgm, dtype=float)
    times, values = cgm[:, 0], cgm[:, 1]
    for a, b in _split_points(times, max_missing):
        t0 = int(times[a])
        n = int((times[b - 1] - t0) // STEP_SECONDS) + 1
        if n < min_length:
            report.discarded_short += 1
            report.discarded_lengths.append(n)
            continue
        grid = t0 + STEP_SECONDS * np.arange(n, dtype=np.int64)
        glucose = np.interp(grid, times[a:b], values[a:b])
        channels = np.column_stack([
            glucose,
            basal_on_grid(subject.basal, grid),
            insulin_on_board(subject.bolus, grid, params),
            carbs_on_board(subject.carbs, grid, params),
        ])
        out.append(GlucoseSeries(subject.subject_id, t0, channels))
        report.kept += 1
    if report.discarded_short:
        log.info("%s: discarded %d short segments", subject.subject_id, report.discarded_short)
    return (out, report) if return_report else out


# --- normalization ---------------------------------------------------------

def fit_norm_stats(train_series: Sequence[GlucoseSeries]) -> NormStats:
    """Pooled per-channel min/max over the training series."""
    arrays = [s.channels for s in train_series if len(s)]
    if not arrays:
        raise InvalidInputError("need at least one non-empty training series")
    stacked = np.concatenate(arrays)
    return NormStats(stacked.min(axis=0), stacked.max(axis=0))


def normalize(series: GlucoseSeries, stats: NormStats) -> GlucoseSeries:
    """Min-max scale every channel; test values outside the fitted range are clamped."""
    return GlucoseSeries(series.subject_id, series.start, stats.scale(series.channels))


def denormalize(series: GlucoseSeries, stats: NormStats) -> GlucoseSeries:
    return GlucoseSeries(series.subject_id, series.start, stats.unscale(series.channels))


def normalize_windows(windows: WindowSet, stats: NormStats) -> WindowSet:
    """Scale the observation channels of raw windows (CGM-only windows use channel 0)."""
    if windows.normalized:
        raise InvalidInputError("windows are already normalized")
    n_feat = windows.obs.shape[2]
    obs = stats.scale(windows.obs, slice(0, n_feat))
    return windows.replace_obs(obs, normalized=True)


# --- windowing -------------------------------------------------------------

def window_count(length: int, config: WindowConfig) -> int:
    span = config.obs_len + config.horizon
    return 0 if length < span else (length - span) // config.stride + 1


def make_windows(series: GlucoseSeries, config: WindowConfig,
                 stats: NormStats | None = None) -> WindowSet:
    """Sliding (observation, target-delta) windows over one series.

    Observations are normalized with ``stats`` when given, raw otherwise.
    Targets are always raw-glucose differences from the last observed value.
    """
    n_feat = config.n_features
    count = window_count(len(series), config)
    if count == 0:
        return WindowSet.empty(config.obs_len, n_feat, config.horizon)
    L, H = config.obs_len, config.horizon
    offsets = np.arange(count) * config.stride
    data = series.channels[:, :n_feat]
    if stats is not None:
        data = stats.scale(data, slice(0, n_feat))
    obs = data[offsets[:, None] + np.arange(L)[None, :]]
    g = series.glucose
    anchor_idx = offsets + L - 1
    anchor = g[anchor_idx]
    targets = g[anchor_idx[:, None] + np.arange(1, H + 1)[None, :]]
    return WindowSet(
        obs=np.ascontiguousarray(obs),
        target_deltas=targets - anchor[:, None],
        anchor_glucose=anchor.copy(),
        labels=label_windows(targets),
        subject_ids=np.full(count, series.subject_id, dtype=object),
        anchor_time=series.start + STEP_SECONDS * anchor_idx.astype(np.int64),
        series_start=np.full(count, series.start, dtype=np.int64),
        normalized=stats is not None,
    )


def windows_for_series(series_list: Sequence[GlucoseSeries], config: WindowConfig,
                       stats: NormStats | None = None) -> WindowSet:
    """Concatenate windows of several series, ordered by series start then offset."""
    ordered = sorted(series_list, key=lambda s: (s.subject_id, s.start))
    parts = [make_windows(s, config, stats) for s in ordered]
    parts = [p for p in parts if len(p)]
    if not parts:
        return WindowSet.empty(config.obs_len, config.n_features, config.horizon)
    return WindowSet.concat(parts)


def dump_series_csv(series: GlucoseSeries, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", *CHANNELS])
        for t, row in zip(series.timestamps, series.channels):
            writer.writerow([int(t), *(repr(float(v)) for v in row)])
    return path

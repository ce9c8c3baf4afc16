"""Shared domain types: subject logs, resampled series, windows and labels.

All glucose values are mg/dL, insulin in units (basal in units/hour),
carbohydrates in grams and timestamps in integer epoch seconds.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

HYPO_THRESHOLD = 70.0
HYPER_THRESHOLD = 180.0
GLUCOSE_MIN = 0.0  # exclusive
GLUCOSE_MAX = 600.0  # inclusive
STEP_SECONDS = 300

CHANNELS = ("cgm", "basal", "iob", "cob")

Timestamp = int
Event = tuple[int, float]


class BGForecastError(Exception):
    """Base class for errors raised by this package."""


class InvalidInputError(BGForecastError, ValueError):
    pass


class ValidationError(BGForecastError, ValueError):
    pass


class ParseError(BGForecastError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ShapeError(BGForecastError, ValueError):
    pass


class NumericError(BGForecastError, FloatingPointError):
    def __init__(self, message: str, layer: str | None = None):
        self.layer = layer
        super().__init__(message if layer is None else f"{layer}: {message}")


class EventLabel(enum.IntEnum):
    NORMAL = 0
    HYPO = 1
    HYPER = 2


def label_window(targets: Sequence[float]) -> EventLabel:
    """Label a target glucose trajectory; hypoglycemia dominates hyperglycemia."""
    values = np.asarray(targets, dtype=float)
    if values.size == 0:
        raise InvalidInputError("cannot label an empty target vector")
    if np.any(values < HYPO_THRESHOLD):
        return EventLabel.HYPO
    if np.any(values > HYPER_THRESHOLD):
        return EventLabel.HYPER
    return EventLabel.NORMAL


def label_windows(targets: np.ndarray) -> np.ndarray:
    """Vectorized `label_window` over the rows of an [N x H] array."""
    targets = np.asarray(targets, dtype=float)
    labels = np.full(targets.shape[0], EventLabel.NORMAL, dtype=np.int8)
    labels[np.any(targets > HYPER_THRESHOLD, axis=1)] = EventLabel.HYPER
    labels[np.any(targets < HYPO_THRESHOLD, axis=1)] = EventLabel.HYPO
    return labels


def _sorted_events(events: Iterable[Event]) -> tuple[Event, ...]:
    out = tuple((int(t), float(v)) for t, v in events)
    for (t0, _), (t1, _) in zip(out, out[1:]):
        if t1 < t0:
            raise ValidationError("channel events must be sorted by timestamp")
    return out


@dataclass(frozen=True)
class SubjectLog:
    """Raw multimodal event stream of one subject."""

    subject_id: str
    cgm: tuple[Event, ...] = ()
    basal: tuple[Event, ...] = ()
    bolus: tuple[Event, ...] = ()
    carbs: tuple[Event, ...] = ()

    def __post_init__(self):
        for name in ("cgm", "basal", "bolus", "carbs"):
            object.__setattr__(self, name, _sorted_events(getattr(self, name)))
        for t, g in self.cgm:
            if not (GLUCOSE_MIN < g <= GLUCOSE_MAX):
                raise ValidationError(
                    f"{self.subject_id}: glucose {g} at t={t} outside (0, 600] mg/dL"
                )
        for name in ("basal", "bolus", "carbs"):
            for t, v in getattr(self, name):
                if not np.isfinite(v) or v < 0:
                    raise ValidationError(f"{self.subject_id}: {name} value {v} at t={t} must be >= 0")

    def channel(self, name: str) -> tuple[Event, ...]:
        return getattr(self, name)

    @property
    def n_events(self) -> int:
        return len(self.cgm) + len(self.basal) + len(self.bolus) + len(self.carbs)


@dataclass(frozen=True)
class GlucoseSeries:
    """Gap-free segment on a fixed 5-minute grid.

    ``channels`` columns are (cgm mg/dL, basal u/h, iob units, cob grams).
    """

    subject_id: str
    start: int
    channels: np.ndarray
    step_seconds: int = STEP_SECONDS

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=float)
        if ch.ndim != 2 or ch.shape[1] != len(CHANNELS) or ch.shape[0] < 1:
            raise ShapeError(f"channels must be [T x 4] with T >= 1, got {ch.shape}")
        if self.step_seconds != STEP_SECONDS:
            raise ValidationError("step_seconds must be 300")
        if not np.all(np.isfinite(ch)):
            raise ValidationError("series contains missing values")
        if np.any(ch[:, 2:] < 0):
            raise ValidationError("iob and cob channels must be non-negative")
        ch.setflags(write=False)
        object.__setattr__(self, "channels", ch)

    def __len__(self) -> int:
        return self.channels.shape[0]

    @property
    def timestamps(self) -> np.ndarray:
        return self.start + self.step_seconds * np.arange(len(self), dtype=np.int64)

    @property
    def glucose(self) -> np.ndarray:
        return self.channels[:, 0]


@dataclass(frozen=True)
class Window:
    subject_id: str
    obs: np.ndarray
    target_deltas: np.ndarray
    anchor_glucose: float
    label: EventLabel
    anchor_time: int = 0
    series_start: int = 0


@dataclass
class WindowSet:
    """Column-oriented collection of supervised windows.

    ``anchor_time`` is the timestamp of the last observed sample and
    ``series_start`` identifies the source segment; together they recover the
    position of a window on its series grid.
    """

    obs: np.ndarray
    target_deltas: np.ndarray
    anchor_glucose: np.ndarray
    labels: np.ndarray
    subject_ids: np.ndarray
    anchor_time: np.ndarray
    series_start: np.ndarray
    normalized: bool = field(default=False)

    def __post_init__(self):
        n = self.obs.shape[0]
        for name in ("target_deltas", "anchor_glucose", "labels", "subject_ids",
                     "anchor_time", "series_start"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"{name} has length {len(getattr(self, name))}, expected {n}")

    @classmethod
    def empty(cls, obs_len: int, n_features: int, horizon: int) -> "WindowSet":
        return cls(
            obs=np.zeros((0, obs_len, n_features)),
            target_deltas=np.zeros((0, horizon)),
            anchor_glucose=np.zeros(0),
            labels=np.zeros(0, dtype=np.int8),
            subject_ids=np.zeros(0, dtype=object),
            anchor_time=np.zeros(0, dtype=np.int64),
            series_start=np.zeros(0, dtype=np.int64),
        )

    def __len__(self) -> int:
        return self.obs.shape[0]

    def __getitem__(self, i: int) -> Window:
        return Window(
            subject_id=str(self.subject_ids[i]),
            obs=self.obs[i],
            target_deltas=self.target_deltas[i],
            anchor_glucose=float(self.anchor_glucose[i]),
            label=EventLabel(int(self.labels[i])),
            anchor_time=int(self.anchor_time[i]),
            series_start=int(self.series_start[i]),
        )

    @property
    def targets(self) -> np.ndarray:
        """Absolute target glucose, anchor + deltas."""
        return self.anchor_glucose[:, None] + self.target_deltas

    def take(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=np.int64)
        return WindowSet(
            obs=self.obs[idx],
            target_deltas=self.target_deltas[idx],
            anchor_glucose=self.anchor_glucose[idx],
            labels=self.labels[idx],
            subject_ids=self.subject_ids[idx],
            anchor_time=self.anchor_time[idx],
            series_start=self.series_start[idx],
            normalized=self.normalized,
        )

    def replace_obs(self, obs: np.ndarray, normalized: bool) -> "WindowSet":
        return WindowSet(
            obs=obs,
            target_deltas=self.target_deltas,
            anchor_glucose=self.anchor_glucose,
            labels=self.labels,
            subject_ids=self.subject_ids,
            anchor_time=self.anchor_time,
            series_start=self.series_start,
            normalized=normalized,
        )

    @staticmethod
    def concat(parts: Sequence["WindowSet"]) -> "WindowSet":
        parts = [p for p in parts if p is not None]
        if not parts:
            raise InvalidInputError("nothing to concatenate")
        return WindowSet(
            obs=np.concatenate([p.obs for p in parts]),
            target_deltas=np.concatenate([p.target_deltas for p in parts]),
            anchor_glucose=np.concatenate([p.anchor_glucose for p in parts]),
            labels=np.concatenate([p.labels for p in parts]),
            subject_ids=np.concatenate([p.subject_ids for p in parts]),
            anchor_time=np.concatenate([p.anchor_time for p in parts]),
            series_start=np.concatenate([p.series_start for p in parts]),
            normalized=all(p.normalized for p in parts),
        )

    def label_counts(self) -> dict[EventLabel, int]:
        return {lab: int(np.sum(self.labels == lab)) for lab in EventLabel}

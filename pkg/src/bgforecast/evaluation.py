"""Forecast metrics (RMSE, event sensitivity, delay, time gain) and classification reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import (
    HYPER_THRESHOLD,
    HYPO_THRESHOLD,
    STEP_SECONDS,
    InvalidInputError,
    ShapeError,
    WindowSet,
)

STEP_MINUTES = STEP_SECONDS // 60
METRICS = ("rmse", "tg", "hyper_sen", "hypo_sen")
METRIC_LABELS = {"rmse": "RMSE", "tg": "TG", "hyper_sen": "Hyper Sen", "hypo_sen": "Hypo Sen"}


def rmse(g, g_hat) -> float:
    g = np.asarray(g, dtype=float).ravel()
    g_hat = np.asarray(g_hat, dtype=float).ravel()
    if g.shape != g_hat.shape:
        raise ShapeError(f"length mismatch: {g.shape} vs {g_hat.shape}")
    if g.size == 0:
        raise InvalidInputError("rmse of empty vectors")
    return float(np.sqrt(np.mean((g - g_hat) ** 2)))


def _crosses(windows: np.ndarray, kind: str) -> np.ndarray:
    if kind == "hypo":
        return np.any(windows < HYPO_THRESHOLD, axis=1)
    if kind == "hyper":
        return np.any(windows > HYPER_THRESHOLD, axis=1)
    raise InvalidInputError(f"kind must be hypo or hyper, got {kind!r}")


def event_counts(g_windows, g_hat_windows, kind: str) -> tuple[int, int]:
    """(detected, missed) true events of ``kind``, judged per window."""
    g = np.atleast_2d(np.asarray(g_windows, dtype=float))
    gh = np.atleast_2d(np.asarray(g_hat_windows, dtype=float))
    if g.shape != gh.shape:
        raise ShapeError(f"window shapes differ: {g.shape} vs {gh.shape}")
    true_event = _crosses(g, kind)
    detected = true_event & _crosses(gh, kind)
    return int(detected.sum()), int(true_event.sum() - detected.sum())


def event_sensitivity(g_windows, g_hat_windows, kind: str) -> float | None:
    """Detected / (detected + missed) true event windows; None when there are none."""
    detected, missed = event_counts(g_windows, g_hat_windows, kind)
    if detected + missed == 0:
        return None
    return detected / (detected + missed)


def delay(g, g_hat, max_shift: int) -> int:
    """Shift ``k`` in ``[0, max_shift]`` minimizing mean ``(g[i] - g_hat[i + k])^2``.

    A prediction that lags the reference by ``d`` steps has delay ``d``.
    Only overlapping, non-NaN pairs count; ties go to the smallest shift.
    """
    g = np.asarray(g, dtype=float)
    g_hat = np.asarray(g_hat, dtype=float)
    if g.size == 0 or g_hat.size == 0:
        raise InvalidInputError("delay of empty series")
    if g.shape != g_hat.shape:
        raise ShapeError("series lengths differ")
    L = g.size
    if not 0 <= max_shift < L:
        raise InvalidInputError(f"max_shift must lie in [0, {L})")
    best_k, best_d = 0, math.inf
    for k in range(max_shift + 1):
        sq = (g[:L - k] - g_hat[k:]) ** 2
        sq = sq[~np.isnan(sq)]
        if sq.size == 0:
            continue
        d = float(sq.mean())
        if d < best_d:
            best_k, best_d = k, d
    return best_k


def time_gain(g, g_hat, ph_minutes: int) -> float:
    """Prediction horizon minus the delay of ``g_hat`` behind ``g``, in minutes."""
    if ph_minutes not in (30, 60):
        raise InvalidInputError("ph_minutes must be 30 or 60")
    g = np.asarray(g, dtype=float)
    max_shift = min(ph_minutes // STEP_MINUTES, g.size - 1)
    return float(ph_minutes - STEP_MINUTES * delay(g, g_hat, max_shift))


def series_profiles(windows: WindowSet, pred_deltas: np.ndarray):
    """Yield (reference, prediction) profiles on each source series' grid.

    Both profiles hold the glucose at the last horizon step, indexed by the
    window's anchor position; grid points without a window are NaN.
    """
    ref_all = windows.anchor_glucose + windows.target_deltas[:, -1]
    hat_all = windows.anchor_glucose + pred_deltas[:, -1]
    keys = np.stack([windows.subject_ids.astype(str), windows.series_start.astype(str)], axis=1)
    order = np.lexsort((windows.anchor_time, windows.series_start, windows.subject_ids.astype(str)))
    seen: dict[tuple, list[int]] = {}
    for i in order:
        seen.setdefault(tuple(keys[i]), []).append(int(i))
    for idx in seen.values():
        idx = np.asarray(idx)
        pos = (windows.anchor_time[idx] - windows.anchor_time[idx].min()) // STEP_SECONDS
        ref = np.full(int(pos.max()) + 1, np.nan)
        hat = np.full_like(ref, np.nan)
        ref[pos] = ref_all[idx]
        hat[pos] = hat_all[idx]
        yield ref, hat


def series_time_gain(windows: WindowSet, pred_deltas: np.ndarray, ph_minutes: int) -> float | None:
    """Mean time gain over the contiguous series present in ``windows``."""
    gains = []
    for ref, hat in series_profiles(windows, pred_deltas):
        if np.count_nonzero(~np.isnan(ref)) < 2:
            continue
        gains.append(time_gain(ref, hat, ph_minutes))
    return float(np.mean(gains)) if gains else None


@dataclass
class SubjectMetrics:
    rmse: float
    tg: float | None
    hyper_sen: float | None
    hypo_sen: float | None
    n_windows: int


def _mean_or_none(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class EvalReport:
    ph_minutes: int
    per_subject: dict[str, SubjectMetrics] = field(default_factory=dict)

    @property
    def aggregate(self) -> SubjectMetrics:
        rows = list(self.per_subject.values())
        return SubjectMetrics(
            rmse=_mean_or_none(r.rmse for r in rows),
            tg=_mean_or_none(r.tg for r in rows),
            hyper_sen=_mean_or_none(r.hyper_sen for r in rows),
            hypo_sen=_mean_or_none(r.hypo_sen for r in rows),
            n_windows=sum(r.n_windows for r in rows),
        )

    @staticmethod
    def merge(reports: Sequence["EvalReport"]) -> "EvalReport":
        if not reports:
            raise InvalidInputError("nothing to merge")
        out = EvalReport(reports[0].ph_minutes)
        for r in reports:
            out.per_subject.update(r.per_subject)
        return out

    def to_dict(self) -> dict:
        return {
            "ph_minutes": self.ph_minutes,
            "per_subject": {k: asdict(v) for k, v in sorted(self.per_subject.items())},
            "aggregate": asdict(self.aggregate),
        }

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def table_rows(self) -> list[dict]:
        """Rows shaped like the comparison table: subject plus RMSE/TG/sensitivities (%)."""
        rows = [("mean", self.aggregate)] + sorted(self.per_subject.items())
        out = []
        for name, m in rows:
            out.append({
                "subject": name,
                "ph_minutes": self.ph_minutes,
                "RMSE": _fmt(m.rmse),
                "TG": _fmt(m.tg),
                "Hyper Sen": _fmt(None if m.hyper_sen is None else 100 * m.hyper_sen),
                "Hypo Sen": _fmt(None if m.hypo_sen is None else 100 * m.hypo_sen),
                "n_windows": m.n_windows,
            })
        return out

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        rows = self.table_rows()
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        return path


def _fmt(v) -> str:
    return "n.a." if v is None else f"{v:.4f}"


def evaluate_subject(windows: WindowSet, pred_deltas: np.ndarray, ph_minutes: int) -> SubjectMetrics:
    """Metrics for one subject's test windows.

    RMSE is taken at the prediction horizon (last target step); sensitivities
    look at the whole predicted trajectory of each window.
    """
    pred_deltas = np.asarray(pred_deltas, dtype=float)
    if pred_deltas.shape != windows.target_deltas.shape:
        raise ShapeError("predictions do not match window targets")
    if len(windows) == 0:
        raise InvalidInputError("no windows to evaluate")
    g = windows.targets
    g_hat = windows.anchor_glucose[:, None] + pred_deltas
    return SubjectMetrics(
        rmse=rmse(g[:, -1], g_hat[:, -1]),
        tg=series_time_gain(windows, pred_deltas, ph_minutes),
        hyper_sen=event_sensitivity(g, g_hat, "hyper"),
        hypo_sen=event_sensitivity(g, g_hat, "hypo"),
        n_windows=len(windows),
    )


def evaluate_forecast(windows: WindowSet, pred_deltas: np.ndarray, ph_minutes: int) -> EvalReport:
    report = EvalReport(ph_minutes)
    sids = windows.subject_ids.astype(str)
    for sid in sorted(set(sids)):
        mask = sids == sid
        report.per_subject[sid] = evaluate_subject(windows.take(np.flatnonzero(mask)),
                                                   pred_deltas[mask], ph_minutes)
    return report


# --- classification ---------------------------------------------------------

@dataclass
class ClassReport:
    confusion: np.ndarray
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class_precision: list[float]
    per_class_recall: list[float]
    per_class_f1: list[float]
    undefined_classes: list[int]
    class_names: list[str] | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = self.confusion.tolist()
        return d

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def confusion_csv(self, path: str | Path) -> Path:
        """Long-format heat-map data: true, predicted, count."""
        path = Path(path)
        names = self.class_names or [str(i) for i in range(self.confusion.shape[0])]
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["true", "predicted", "count"])
            for i, a in enumerate(names):
                for j, b in enumerate(names):
                    writer.writerow([a, b, int(self.confusion[i, j])])
        return path


def classification_report(true_labels, predicted_labels, C: int,
                          class_names: list[str] | None = None) -> ClassReport:
    """Confusion matrix (rows = truth) with accuracy and macro precision/recall/F1.

    Classes whose precision or recall has a zero denominator contribute 0 and
    are listed in ``undefined_classes``.
    """
    y = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if y.shape != p.shape:
        raise ShapeError("label vectors differ in length")
    if y.size == 0:
        raise InvalidInputError("no labels")
    if np.any((y < 0) | (y >= C) | (p < 0) | (p >= C)):
        raise InvalidInputError(f"labels must lie in [0, {C})")
    cm = np.zeros((C, C), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    tp = np.diag(cm).astype(float)
    col = cm.sum(axis=0).astype(float)
    row = cm.sum(axis=1).astype(float)
    undefined = sorted(set(np.flatnonzero(col == 0).tolist()) | set(np.flatnonzero(row == 0).tolist()))
    prec = np.divide(tp, col, out=np.zeros(C), where=col > 0)
    rec = np.divide(tp, row, out=np.zeros(C), where=row > 0)
    denom = prec + rec
    f1 = np.divide(2 * prec * rec, denom, out=np.zeros(C), where=denom > 0)
    return ClassReport(
        confusion=cm,
        accuracy=float(tp.sum() / y.size),
        macro_precision=float(prec.mean()),
        macro_recall=float(rec.mean()),
        macro_f1=float(f1.mean()),
        per_class_precision=prec.tolist(),
        per_class_recall=rec.tolist(),
        per_class_f1=f1.tolist(),
        undefined_classes=undefined,
        class_names=class_names,
    )

"""Reading subject logs from disk and aligning auxiliary events to CGM stamps.

The native on-disk layout is one event per row::

    channel,timestamp,value
    cgm,0,120
    bolus,120,4.5

or the equivalent JSON array of ``{"channel", "timestamp", "value"}`` objects.
"""

from __future__ import annotations

import bisect
import csv
import io
import json
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Literal

from .datamodel import (
    GLUCOSE_MAX,
    GLUCOSE_MIN,
    ParseError,
    SubjectLog,
    ValidationError,
)

log = logging.getLogger(__name__)

CHANNEL_NAMES = ("cgm", "basal", "bolus", "carbs")
AUX_CHANNELS = ("basal", "bolus", "carbs")
SYNC_WINDOW_SECONDS = 240


@dataclass(frozen=True)
class RawRecord:
    channel: str
    ts: int
    value: float

    def __post_init__(self):
        if self.channel not in CHANNEL_NAMES:
            raise ValidationError(f"unknown channel {self.channel!r}")
        if not math.isfinite(self.value):
            raise ValidationError(f"non-finite value for {self.channel} at t={self.ts}")


@dataclass
class SyncReport:
    kept: dict[str, int] = field(default_factory=dict)
    dropped: dict[str, int] = field(default_factory=dict)

    @property
    def total_dropped(self) -> int:
        return sum(self.dropped.values())


def _record_from_fields(channel, timestamp, value, line: int) -> RawRecord:
    channel = str(channel).strip().lower()
    try:
        ts = int(str(timestamp).strip())
        val = float(str(value).strip())
    except (TypeError, ValueError) as exc:
        raise ParseError(f"malformed row ({channel!r}, {timestamp!r}, {value!r})", line) from exc
    try:
        rec = RawRecord(channel, ts, val)
    except ValidationError as exc:
        raise ParseError(str(exc), line) from exc
    if channel == "cgm" and not (GLUCOSE_MIN < val <= GLUCOSE_MAX):
        raise ValidationError(f"line {line}: glucose {val} outside (0, 600] mg/dL")
    return rec


def records_to_log(subject_id: str, records) -> SubjectLog:
    """Collapse duplicates (last occurrence wins) and sort every channel."""
    channels: dict[str, dict[int, float]] = {name: {} for name in CHANNEL_NAMES}
    for rec in records:
        channels[rec.channel][rec.ts] = rec.value
    return SubjectLog(
        subject_id=subject_id,
        **{name: sorted(channels[name].items()) for name in CHANNEL_NAMES},
    )


def _read_csv_records(text: str):
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        return []
    header = [h.strip().lower() for h in header]
    if header != ["channel", "timestamp", "value"]:
        raise ParseError(f"expected header 'channel,timestamp,value', got {','.join(header)!r}", 1)
    out = []
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise ParseError(f"expected 3 fields, got {len(row)}", line)
        out.append(_record_from_fields(*row, line=line))
    return out


def _read_json_records(text: str):
    try:
        rows = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno) from exc
    if not isinstance(rows, list):
        raise ParseError("top-level JSON value must be an array", 1)
    out = []
    for i, row in enumerate(rows):
        # JSON has no row lines of its own; report the 1-based array position
        if not isinstance(row, dict) or {"channel", "timestamp", "value"} - row.keys():
            raise ParseError("entry must have channel, timestamp and value", i + 1)
        out.append(_record_from_fields(row["channel"], row["timestamp"], row["value"], line=i + 1))
    return out


def parse_subject_log(
    path: str | Path,
    format: Literal["csv", "json"] | None = None,
    subject_id: str | None = None,
) -> SubjectLog:
    """Parse a CSV or JSON event file into a `SubjectLog`.

    The subject id defaults to the file stem; the format defaults to the
    file suffix.
    """
    path = Path(path)
    fmt = format or path.suffix.lstrip(".").lower()
    text = path.read_text(encoding="utf-8")
    if fmt == "csv":
        records = _read_csv_records(text)
    elif fmt == "json":
        records = _read_json_records(text)
    else:
        raise ParseError(f"unsupported format {fmt!r}")
    return records_to_log(subject_id or path.stem, records)


def log_to_rows(subject: SubjectLog) -> list[tuple[str, int, float]]:
    rows = [(name, t, v) for name in CHANNEL_NAMES for t, v in subject.channel(name)]
    rows.sort(key=lambda r: (r[1], CHANNEL_NAMES.index(r[0])))
    return rows


def _fmt(value: float) -> str:
    return repr(float(value)) if value != int(value) else str(int(value))


def write_subject_log(subject: SubjectLog, path: str | Path) -> Path:
    """Write a log in the CSV event schema (round-trips through `parse_subject_log`)."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["channel", "timestamp", "value"])
        for name, t, v in log_to_rows(subject):
            writer.writerow([name, t, _fmt(v)])
    return path


def synchronize(subject: SubjectLog, window_seconds: int = SYNC_WINDOW_SECONDS,
                return_report: bool = False):
    """Re-stamp basal/bolus/carb events onto the CGM timeline.

    Each auxiliary event moves to the latest CGM stamp at or before it,
    provided it lies no more than ``window_seconds`` after that stamp.
    Events without such a stamp are dropped and counted.
    """
    stamps = [t for t, _ in subject.cgm]
    report = SyncReport()
    aligned = {}
    for name in AUX_CHANNELS:
        kept = []
        dropped = 0
        for t, v in subject.channel(name):
            i = bisect.bisect_right(stamps, t) - 1
            if i >= 0 and t - stamps[i] <= window_seconds:
                kept.append((stamps[i], v))
            else:
                dropped += 1
        aligned[name] = kept
        report.kept[name] = len(kept)
        report.dropped[name] = dropped
    if report.total_dropped:
        log.info("%s: dropped %s unaligned events", subject.subject_id, report.dropped)
    out = SubjectLog(subject_id=subject.subject_id, cgm=subject.cgm, **aligned)
    return (out, report) if return_report else out


# --- restricted-dataset adapters -------------------------------------------

_OHIO_TS = "%d-%m-%Y %H:%M:%S"


def _ohio_ts(text: str) -> int:
    return int(datetime.strptime(text, _OHIO_TS).replace(tzinfo=timezone.utc).timestamp())


def parse_ohio_xml(path: str | Path) -> SubjectLog:
    """Read an OhioT1DM patient XML file (glucose_level, basal, temp_basal, bolus, meal).

    Temporary basal rates override the scheduled rate between ``ts_begin``
    and ``ts_end``; the scheduled rate in force at ``ts_end`` is restored.
    Only available to holders of the dataset.
    """
    root = ET.parse(path).getroot()
    sid = root.get("id") or Path(path).stem
    records: list[RawRecord] = []

    def events(tag):
        node = root.find(tag)
        return [] if node is None else node.findall("event")

    for ev in events("glucose_level"):
        records.append(RawRecord("cgm", _ohio_ts(ev.get("ts")), float(ev.get("value"))))
    scheduled = sorted((_ohio_ts(ev.get("ts")), float(ev.get("value"))) for ev in events("basal"))
    basal = dict(scheduled)
    sched_times = [t for t, _ in scheduled]
    for ev in events("temp_basal"):
        t0, t1 = _ohio_ts(ev.get("ts_begin")), _ohio_ts(ev.get("ts_end"))
        basal[t0] = float(ev.get("value"))
        i = bisect.bisect_right(sched_times, t1) - 1
        if i >= 0 and t1 not in basal:
            basal[t1] = scheduled[i][1]
    records.extend(RawRecord("basal", t, v) for t, v in sorted(basal.items()))
    for ev in events("bolus"):
        records.append(RawRecord("bolus", _ohio_ts(ev.get("ts_begin")), float(ev.get("dose"))))
    for ev in events("meal"):
        records.append(RawRecord("carbs", _ohio_ts(ev.get("ts")), float(ev.get("carbs"))))
    records = [r for r in records if r.channel != "cgm" or GLUCOSE_MIN < r.value <= GLUCOSE_MAX]
    return records_to_log(sid, records)


DIATREND_COLUMNS = {
    "cgm": ("CGM", "date", "mg/dl"),
    "bolus": ("Bolus", "date", "normal"),
    "carbs": ("Bolus", "date", "carbInput"),
    "basal": ("Basal", "date", "rate"),
}


def parse_diatrend_workbook(path: str | Path, columns: dict | None = None) -> SubjectLog:
    """Read a DiaTrend subject workbook; needs pandas and openpyxl.

    ``columns`` maps each channel to ``(sheet, time column, value column)``;
    the default follows the public DiaTrend layout and can be overridden
    when a release renames columns.
    """
    try:
        import pandas as pd
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise ImportError("DiaTrend workbooks require pandas and openpyxl") from exc
    columns = columns or DIATREND_COLUMNS
    records = []
    sheets = {}
    for channel, (sheet, tcol, vcol) in columns.items():
        if sheet not in sheets:
            sheets[sheet] = pd.read_excel(path, sheet_name=sheet)
        frame = sheets[sheet][[tcol, vcol]].dropna()
        for t, v in zip(pd.to_datetime(frame[tcol], utc=True), frame[vcol]):
            v = float(v)
            if channel == "cgm" and not (GLUCOSE_MIN < v <= GLUCOSE_MAX):
                continue
            if channel != "cgm" and v <= 0 and channel != "basal":
                continue
            records.append(RawRecord(channel, int(t.timestamp()), v))
    return records_to_log(Path(path).stem, records)

"""Parse, validate, and filter listening-log records; segment them into sessions.

A session is a maximal run of one user's streams where the silence between
the end of one stream and the start of the next never exceeds the gap
threshold (strictly longer gaps break the session).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

logger = logging.getLogger(__name__)

SESSION_GAP_SECONDS = 300

MANDATORY_FIELDS = (
    "user_id",
    "track_id",
    "origin",
    "start_timestamp",
    "duration",
    "skipped",
    "city_id",
)
OPTIONAL_FIELDS = ("artist_id", "platform", "release_date")


class Origin(str, Enum):
    COLLECTION = "collection"
    EDITORIAL = "editorial"
    ALGORITHMIC = "algorithmic"
    OTHER = "other"


@dataclass(frozen=True, slots=True)
class StreamEvent:
    user_id: str
    track_id: str
    artist_id: str
    origin: Origin
    start_timestamp: int  # UTC seconds
    duration: int  # seconds
    skipped: bool
    platform: str
    city_id: str
    release_date: date | None

    @property
    def end_timestamp(self) -> int:
        return self.start_timestamp + self.duration

    def utc_date(self) -> date:
        return datetime.fromtimestamp(self.start_timestamp, tz=timezone.utc).date()

    def month_key(self) -> str:
        d = self.utc_date()
        return f"{d.year:04d}-{d.month:02d}"

    def week_key(self) -> str:
        iso = self.utc_date().isocalendar()
        return f"{iso.year:04d}-W{iso.week:02d}"


@dataclass
class Session:
    user_id: str
    session_id: int
    events: list[StreamEvent]

    def track_ids(self) -> list[str]:
        return [e.track_id for e in self.events]

    def __len__(self) -> int:
        return len(self.events)


@dataclass
class LogSchema:
    """Column mapping for a line-delimited stream log.

    `columns` maps StreamEvent field names to input column names; all
    mandatory fields must be mapped. `origin_mapping` translates raw origin
    strings to Origin values; unmapped strings fall back to OTHER.
    """

    format: str = "csv"  # csv | jsonl
    delimiter: str = ","
    columns: dict[str, str] = field(default_factory=lambda: {f: f for f in MANDATORY_FIELDS + OPTIONAL_FIELDS})
    origin_mapping: dict[str, str] = field(
        default_factory=lambda: {o.value: o.value for o in Origin}
    )
    malformed_tolerance: float = 0.05
    observation_window: tuple[int, int] | None = None  # (start_ts, end_ts), inclusive

    def __post_init__(self) -> None:
        if self.format not in ("csv", "jsonl"):
            raise ValueError(f"unknown log format: {self.format!r}")
        missing = [f for f in MANDATORY_FIELDS if f not in self.columns]
        if missing:
            raise ValueError(f"schema missing mandatory fields: {missing}")
        if not 0.0 <= self.malformed_tolerance <= 1.0:
            raise ValueError("malformed_tolerance must be in [0, 1]")


@dataclass
class IngestReport:
    rows_read: int = 0
    rows_accepted: int = 0
    rows_rejected: int = 0
    reject_reasons: dict[str, int] = field(default_factory=dict)
    reject_samples: list[str] = field(default_factory=list)
    unknown_origins: dict[str, int] = field(default_factory=dict)
    dropped_short: int = 0
    min_duration: int | None = None
    sessions: int = 0
    mean_session_length: float = 0.0
    overlap_anomalies: int = 0

    def reject(self, reason: str, raw: str) -> None:
        self.rows_rejected += 1
        self.reject_reasons[reason] = self.reject_reasons.get(reason, 0) + 1
        if len(self.reject_samples) < 5:
            self.reject_samples.append(raw)

    def as_rows(self) -> list[tuple[str, str]]:
        rows = [
            ("rows_read", str(self.rows_read)),
            ("rows_accepted", str(self.rows_accepted)),
            ("rows_rejected", str(self.rows_rejected)),
            ("dropped_short", str(self.dropped_short)),
            ("min_duration", str(self.min_duration)),
            ("sessions", str(self.sessions)),
            ("mean_session_length", f"{self.mean_session_length:.4f}"),
            ("overlap_anomalies", str(self.overlap_anomalies)),
        ]
        for reason in sorted(self.reject_reasons):
            rows.append((f"rejected_{reason}", str(self.reject_reasons[reason])))
        for origin in sorted(self.unknown_origins):
            rows.append((f"unknown_origin_{origin}", str(self.unknown_origins[origin])))
        return rows

    def write(self, path: str | Path, delimiter: str = ",") -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, delimiter=delimiter)
            writer.writerow(["key", "value"])
            writer.writerows(self.as_rows())


class MalformedLogError(RuntimeError):
    """Malformed-row fraction exceeded the configured tolerance."""


def _parse_release_date(raw: str | None) -> date | None:
    if raw is None or raw == "":
        return None
    return date.fromisoformat(raw)


def _parse_bool(raw: object) -> bool:
    if isinstance(raw, bool):
        return raw
    text = str(raw).strip().lower()
    if text in ("1", "true", "t", "yes"):
        return True
    if text in ("0", "false", "f", "no", ""):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _row_to_event(
    row: dict[str, object],
    schema: LogSchema,
    report: IngestReport,
    track_metadata: dict[str, tuple[str, date | None]] | None,
) -> StreamEvent:
    def get(fld: str, default: object = "") -> object:
        col = schema.columns.get(fld)
        if col is None:
            return default
        value = row.get(col)
        return default if value is None else value

    user_id = str(get("user_id")).strip()
    track_id = str(get("track_id")).strip()
    city_id = str(get("city_id")).strip()
    if not user_id:
        raise ValueError("empty user_id")
    if not city_id:
        raise ValueError("empty city_id")
    if not track_id:
        raise ValueError("empty track_id")

    duration = int(get("duration"))
    if duration < 0:
        raise ValueError(f"negative duration: {duration}")
    start = int(get("start_timestamp"))
    window = schema.observation_window
    if window is not None and not window[0] <= start <= window[1]:
        raise ValueError(f"start_timestamp {start} outside observation window")

    raw_origin = str(get("origin")).strip()
    mapped = schema.origin_mapping.get(raw_origin)
    if mapped is None:
        report.unknown_origins[raw_origin] = report.unknown_origins.get(raw_origin, 0) + 1
        if report.unknown_origins[raw_origin] == 1:
            logger.warning("unknown origin %r mapped to 'other'", raw_origin)
        origin = Origin.OTHER
    else:
        origin = Origin(mapped)

    artist_id = str(get("artist_id")).strip()
    release = _parse_release_date(str(get("release_date")) or None)
    if track_metadata is not None and track_id in track_metadata:
        meta_artist, meta_release = track_metadata[track_id]
        artist_id = artist_id or meta_artist
        release = release if release is not None else meta_release

    return StreamEvent(
        user_id=user_id,
        track_id=track_id,
        artist_id=artist_id,
        origin=origin,
        start_timestamp=start,
        duration=duration,
        skipped=_parse_bool(get("skipped", False)),
        platform=str(get("platform")).strip(),
        city_id=city_id,
        release_date=release,
    )


def iter_stream_log(
    path: str | Path,
    schema: LogSchema,
    report: IngestReport,
    track_metadata: dict[str, tuple[str, date | None]] | None = None,
) -> Iterator[StreamEvent]:
    """Stream events from a log file in file order, counting malformed rows.

    The tolerance check belongs to the caller (see parse_stream_log), since
    the malformed fraction is only known at end of pass.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"stream log not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows: Iterable[tuple[dict[str, object], str]]
        if schema.format == "csv":
            reader = csv.DictReader(fh, delimiter=schema.delimiter)
            rows = ((row, schema.delimiter.join(str(v) for v in row.values())) for row in reader)
        else:
            rows = ((json.loads(line), line.rstrip("\n")) for line in fh if line.strip())
        for row, raw in rows:
            report.rows_read += 1
            try:
                event = _row_to_event(row, schema, report, track_metadata)
            except (ValueError, TypeError, KeyError) as exc:
                report.reject(type(exc).__name__ + ":" + _reason(exc), raw)
                continue
            report.rows_accepted += 1
            yield event


def _reason(exc: Exception) -> str:
    text = str(exc)
    for label in ("duration", "user_id", "city_id", "track_id", "observation window", "boolean"):
        if label in text:
            return label.replace(" ", "_")
    return "parse"


def parse_stream_log(
    path: str | Path,
    schema: LogSchema,
    track_metadata: dict[str, tuple[str, date | None]] | None = None,
    report: IngestReport | None = None,
) -> tuple[list[StreamEvent], IngestReport]:
    """Parse the full log, enforcing the malformed-row tolerance.

    Raises MalformedLogError (with row samples) when the rejected fraction
    exceeds schema.malformed_tolerance.
    """
    if report is None:
        report = IngestReport()
    events = list(iter_stream_log(path, schema, report, track_metadata))
    if report.rows_read > 0:
        fraction = report.rows_rejected / report.rows_read
        if fraction > schema.malformed_tolerance:
            samples = "\n".join(report.reject_samples)
            raise MalformedLogError(
                f"{report.rows_rejected}/{report.rows_read} rows malformed "
                f"({fraction:.1%} > tolerance {schema.malformed_tolerance:.1%}); samples:\n{samples}"
            )
    return events, report


def load_track_metadata(path: str | Path, delimiter: str = ",") -> dict[str, tuple[str, date | None]]:
    """Track metadata table: track_id, artist_id, release_date (ISO, may be empty)."""
    meta: dict[str, tuple[str, date | None]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh, delimiter=delimiter):
            meta[row["track_id"]] = (row["artist_id"], _parse_release_date(row.get("release_date")))
    return meta


def filter_streams(events: Iterable[StreamEvent], min_duration: int) -> tuple[list[StreamEvent], int]:
    """Retain events with duration >= min_duration; also return the dropped count."""
    if min_duration < 0:
        raise ValueError("min_duration must be >= 0")
    kept, dropped = [], 0
    for e in events:
        if e.duration >= min_duration:
            kept.append(e)
        else:
            dropped += 1
    return kept, dropped


def segment_sessions(
    events: Iterable[StreamEvent],
    gap_threshold: int = SESSION_GAP_SECONDS,
    report: IngestReport | None = None,
) -> list[Session]:
    """Split one user's events into sessions at gaps strictly longer than the threshold.

    Events are sorted defensively by start timestamp; overlapping events
    (next starts before previous ends) are treated as gap 0 and counted as
    anomalies. A gap of exactly `gap_threshold` stays within the session.
    """
    ordered = sorted(events, key=lambda e: (e.start_timestamp, e.track_id))
    if not ordered:
        return []
    users = {e.user_id for e in ordered}
    if len(users) > 1:
        raise ValueError(f"segment_sessions expects a single user's events, got {sorted(users)}")

    sessions: list[Session] = []
    current: list[StreamEvent] = [ordered[0]]
    for prev, nxt in zip(ordered, ordered[1:]):
        gap = nxt.start_timestamp - prev.end_timestamp
        if gap < 0:
            gap = 0
            if report is not None:
                report.overlap_anomalies += 1
        if gap > gap_threshold:
            sessions.append(Session(user_id=prev.user_id, session_id=len(sessions), events=current))
            current = [nxt]
        else:
            current.append(nxt)
    sessions.append(Session(user_id=ordered[0].user_id, session_id=len(sessions), events=current))

    if report is not None:
        report.sessions += len(sessions)
    return sessions


def sessionize(
    events: Iterable[StreamEvent],
    gap_threshold: int = SESSION_GAP_SECONDS,
    report: IngestReport | None = None,
) -> dict[str, list[Session]]:
    """Segment a multi-user event stream, user by user."""
    by_user: dict[str, list[StreamEvent]] = {}
    for e in events:
        by_user.setdefault(e.user_id, []).append(e)
    out = {
        user: segment_sessions(user_events, gap_threshold, report)
        for user, user_events in sorted(by_user.items())
    }
    if report is not None and report.sessions:
        total_events = sum(len(s) for sess in out.values() for s in sess)
        report.mean_session_length = total_events / report.sessions
    return out


EVENT_COLUMNS = [
    "user_id",
    "track_id",
    "artist_id",
    "origin",
    "start_timestamp",
    "duration",
    "skipped",
    "platform",
    "city_id",
    "release_date",
]


def write_event_log(
    path: str | Path,
    events: Iterable[StreamEvent],
    delimiter: str = ",",
    session_ids: dict[int, int] | None = None,
) -> None:
    """Write events in the standard record format, optionally with a session_id column.

    `session_ids` maps event position (in iteration order) to session id.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        header = list(EVENT_COLUMNS)
        if session_ids is not None:
            header.append("session_id")
        writer.writerow(header)
        for i, e in enumerate(events):
            row = [
                e.user_id,
                e.track_id,
                e.artist_id,
                e.origin.value,
                str(e.start_timestamp),
                str(e.duration),
                "1" if e.skipped else "0",
                e.platform,
                e.city_id,
                e.release_date.isoformat() if e.release_date else "",
            ]
            if session_ids is not None:
                row.append(str(session_ids.get(i, -1)))
            writer.writerow(row)


def write_sessionized_log(path: str | Path, sessions_by_user: dict[str, list[Session]], delimiter: str = ",") -> None:
    flat: list[StreamEvent] = []
    ids: dict[int, int] = {}
    pos = 0
    for user in sorted(sessions_by_user):
        for session in sessions_by_user[user]:
            for e in session.events:
                flat.append(e)
                ids[pos] = session.session_id
                pos += 1
    write_event_log(path, flat, delimiter=delimiter, session_ids=ids)


def read_event_log(path: str | Path, delimiter: str = ",") -> list[StreamEvent]:
    """Read back a log written by write_event_log (session_id column ignored)."""
    schema = LogSchema(format="csv", delimiter=delimiter)
    report = IngestReport()
    events = list(iter_stream_log(path, schema, report))
    if report.rows_rejected:
        raise MalformedLogError(f"{report.rows_rejected} bad rows in {path}: {report.reject_samples}")
    return events

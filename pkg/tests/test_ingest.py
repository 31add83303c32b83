import logging
from datetime import date

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tastepipe import ingest
from tastepipe.ingest import (
    IngestReport,
    LogSchema,
    MalformedLogError,
    Origin,
    Session,
    StreamEvent,
    filter_streams,
    parse_stream_log,
    segment_sessions,
)


def make_event(user="u1", track="t1", start=0, duration=120, city="c1", **kw):
    defaults = dict(
        user_id=user,
        track_id=track,
        artist_id=kw.pop("artist", "a1"),
        origin=kw.pop("origin", Origin.COLLECTION),
        start_timestamp=start,
        duration=duration,
        skipped=kw.pop("skipped", False),
        platform=kw.pop("platform", "web"),
        city_id=city,
        release_date=kw.pop("release_date", None),
    )
    return StreamEvent(**defaults)


HEADER = "user_id,track_id,artist_id,origin,start_timestamp,duration,skipped,platform,city_id,release_date\n"


def write_log(tmp_path, rows, name="log.csv"):
    path = tmp_path / name
    path.write_text(HEADER + "".join(rows))
    return path


def row(user="u1", track="t1", origin="collection", start=1000, duration=120,
        skipped="0", city="c1", release=""):
    return f"{user},{track},a1,{origin},{start},{duration},{skipped},web,{city},{release}\n"


class TestParse:
    def test_well_formed_rows(self, tmp_path):
        path = write_log(tmp_path, [row(track=f"t{i}") for i in range(3)])
        events, report = parse_stream_log(path, LogSchema())
        assert len(events) == 3
        assert report.rows_rejected == 0
        assert events[0].origin is Origin.COLLECTION

    def test_negative_duration_rejected(self, tmp_path):
        path = write_log(tmp_path, [row(), row(duration=-5)])
        events, report = parse_stream_log(path, LogSchema(malformed_tolerance=0.6))
        assert len(events) == 1
        assert report.rows_rejected == 1
        assert any("duration" in r for r in report.reject_reasons)

    def test_unknown_origin_maps_to_other(self, tmp_path, caplog):
        path = write_log(tmp_path, [row(origin="reco_flow")])
        with caplog.at_level(logging.WARNING):
            events, report = parse_stream_log(path, LogSchema())
        assert events[0].origin is Origin.OTHER
        assert report.unknown_origins == {"reco_flow": 1}
        assert any("reco_flow" in r.message for r in caplog.records)

    def test_tolerance_exceeded_is_fatal_with_samples(self, tmp_path):
        path = write_log(tmp_path, [row(), row(duration=-1), row(duration=-2)])
        with pytest.raises(MalformedLogError) as err:
            parse_stream_log(path, LogSchema(malformed_tolerance=0.5))
        assert "-1" in str(err.value)  # row sample included

    def test_missing_file_fatal(self):
        with pytest.raises(FileNotFoundError):
            parse_stream_log("/nonexistent/streams.csv", LogSchema())

    def test_empty_identifiers_rejected(self, tmp_path):
        path = write_log(tmp_path, [row(user=""), row(city=""), row()])
        events, report = parse_stream_log(path, LogSchema(malformed_tolerance=0.9))
        assert len(events) == 1
        assert report.rows_rejected == 2

    def test_observation_window(self, tmp_path):
        path = write_log(tmp_path, [row(start=10), row(start=5000)])
        schema = LogSchema(observation_window=(0, 1000), malformed_tolerance=0.9)
        events, report = parse_stream_log(path, schema)
        assert [e.start_timestamp for e in events] == [10]
        assert report.rows_rejected == 1

    def test_jsonl_format(self, tmp_path):
        path = tmp_path / "log.jsonl"
        path.write_text(
            '{"user_id": "u1", "track_id": "t1", "artist_id": "a1", "origin": "editorial",'
            ' "start_timestamp": 5, "duration": 90, "skipped": false, "platform": "ios",'
            ' "city_id": "c9", "release_date": "2019-05-01"}\n'
        )
        events, report = parse_stream_log(path, LogSchema(format="jsonl"))
        assert events[0].origin is Origin.EDITORIAL
        assert events[0].release_date == date(2019, 5, 1)

    def test_metadata_join(self, tmp_path):
        path = write_log(tmp_path, [row()])
        meta = {"t1": ("artist-x", date(2001, 2, 3))}
        schema = LogSchema(columns={f: f for f in ingest.MANDATORY_FIELDS})
        events, _ = parse_stream_log(path, schema, track_metadata=meta)
        assert events[0].artist_id == "artist-x"
        assert events[0].release_date == date(2001, 2, 3)

    def test_schema_requires_mandatory_fields(self):
        with pytest.raises(ValueError, match="mandatory"):
            LogSchema(columns={"user_id": "u"})


class TestFilter:
    def test_one_minute_threshold(self):
        events = [make_event(duration=d) for d in (30, 59, 60, 300)]
        kept, dropped = filter_streams(events, 60)
        assert [e.duration for e in kept] == [60, 300]
        assert dropped == 2

    def test_zero_threshold_keeps_all(self):
        events = [make_event(duration=d) for d in (0, 5, 10)]
        kept, dropped = filter_streams(events, 0)
        assert len(kept) == 3 and dropped == 0

    def test_threshold_is_inclusive(self):
        events = [make_event(duration=d) for d in (30, 45)]
        kept, _ = filter_streams(events, 30)
        assert len(kept) == 2

    def test_negative_threshold_rejected(self):
        with pytest.raises(ValueError):
            filter_streams([], -1)


class TestSegmentation:
    def test_gap_just_below_threshold_same_session(self):
        # ends 10:03:00, next starts 10:07:59 -> gap 299
        a = make_event(start=0, duration=180)
        b = make_event(start=180 + 299, duration=60)
        assert len(segment_sessions([a, b])) == 1

    def test_gap_above_threshold_new_session(self):
        a = make_event(start=0, duration=180)
        b = make_event(start=180 + 301, duration=60)
        assert len(segment_sessions([a, b])) == 2

    def test_gap_exactly_300_same_session(self):
        a = make_event(start=0, duration=180)
        b = make_event(start=180 + 300, duration=60)
        assert len(segment_sessions([a, b])) == 1

    def test_overlap_treated_as_zero_gap(self):
        report = IngestReport()
        a = make_event(start=0, duration=600)
        b = make_event(start=100, duration=60)
        sessions = segment_sessions([a, b], report=report)
        assert len(sessions) == 1
        assert report.overlap_anomalies == 1

    def test_sorts_defensively(self):
        a = make_event(start=1000, duration=60)
        b = make_event(start=0, duration=60)
        sessions = segment_sessions([a, b])
        starts = [e.start_timestamp for s in sessions for e in s.events]
        assert starts == sorted(starts)

    def test_multi_user_input_rejected(self):
        with pytest.raises(ValueError):
            segment_sessions([make_event(user="a"), make_event(user="b")])

    def test_session_ids_sequential(self):
        events = [make_event(start=i * 10_000, duration=60) for i in range(4)]
        sessions = segment_sessions(events)
        assert [s.session_id for s in sessions] == [0, 1, 2, 3]


@st.composite
def user_events(draw):
    n = draw(st.integers(min_value=1, max_value=25))
    starts = draw(
        st.lists(st.integers(min_value=0, max_value=500_000), min_size=n, max_size=n)
    )
    durations = draw(st.lists(st.integers(min_value=0, max_value=600), min_size=n, max_size=n))
    return [
        make_event(track=f"t{i}", start=s, duration=d)
        for i, (s, d) in enumerate(zip(starts, durations))
    ]


class TestSessionProperties:
    @given(user_events())
    @settings(max_examples=60)
    def test_partition(self, events):
        sessions = segment_sessions(events)
        flat = [e for s in sessions for e in s.events]
        assert flat == sorted(events, key=lambda e: (e.start_timestamp, e.track_id))

    @given(user_events(), st.integers(min_value=2, max_value=8))
    @settings(max_examples=40)
    def test_chunking_independence(self, events, n_chunks):
        whole = segment_sessions(events)
        # deliver the same events in arbitrary chunk order
        chunks = [events[i::n_chunks] for i in range(n_chunks)]
        rejoined = [e for chunk in chunks for e in chunk]
        assert _boundaries(segment_sessions(rejoined)) == _boundaries(whole)

    @given(user_events(), st.integers(min_value=0, max_value=400), st.integers(min_value=0, max_value=400))
    @settings(max_examples=60)
    def test_coarser_threshold_merges_sessions(self, events, g, extra):
        g_prime = g + extra
        fine = _boundaries(segment_sessions(events, gap_threshold=g))
        coarse = _boundaries(segment_sessions(events, gap_threshold=g_prime))
        assert coarse <= fine  # every coarse boundary is a fine boundary

    @given(user_events())
    @settings(max_examples=40)
    def test_idempotent_on_session_slices(self, events):
        for session in segment_sessions(events):
            again = segment_sessions(session.events)
            assert len(again) == 1
            assert again[0].events == session.events


def _boundaries(sessions: list[Session]) -> set[int]:
    return {s.events[0].start_timestamp for s in sessions}


class TestRoundTrip:
    def test_event_log_round_trip(self, tmp_path):
        events = [
            make_event(track=f"t{i}", start=i * 1000, duration=60 + i,
                       release_date=date(2010, 1, 1) if i % 2 else None)
            for i in range(5)
        ]
        path = tmp_path / "events.csv"
        ingest.write_event_log(path, events)
        back = ingest.read_event_log(path)
        assert back == events

    def test_sessionized_log_has_session_column(self, tmp_path):
        events = [make_event(start=0, duration=60), make_event(start=10_000, duration=60)]
        sessions = {"u1": segment_sessions(events)}
        path = tmp_path / "sessions.csv"
        ingest.write_sessionized_log(path, sessions)
        header = path.read_text().splitlines()[0]
        assert header.endswith("session_id")

    def test_report_file(self, tmp_path):
        report = IngestReport(rows_read=10, rows_accepted=9, rows_rejected=1)
        report.write(tmp_path / "report.csv")
        text = (tmp_path / "report.csv").read_text()
        assert "rows_read,10" in text

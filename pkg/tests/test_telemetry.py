"""Event log, completion links, window aggregation and the snapshot cache."""

from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factor_route.domain import BusinessKind, BusinessOutcome
from factor_route.telemetry import (
    EventLog,
    IncidentLog,
    InvalidEvent,
    MetricKey,
    SnapshotCache,
    WindowAggregator,
    WindowConfig,
    aggregate,
    histogram_bin,
    histogram_bin_bounds,
    link_completion,
    load_event_log,
    percentile,
)
from helpers import OP, make_event
from loggen import check_log
from oracles import nearest_rank

WC = WindowConfig(window_ms=10_000, bucket_ms=1_000, completion_link_timeout_ms=5_000)
KEY = MetricKey(OP, "alpha")


def test_window_config_rejects_misaligned_buckets():
    with pytest.raises(ValueError):
        WindowConfig(window_ms=10_000, bucket_ms=3_000)
    with pytest.raises(ValueError):
        WindowConfig(window_ms=1_000, bucket_ms=1_000)


@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=300), st.sampled_from([95, 99, 50]))
def test_percentile_is_nearest_rank(values, pct):
    assert percentile(values, pct / 100) == nearest_rank(values, pct)


def test_percentile_small_samples():
    assert percentile([5], 0.99) == 5
    assert percentile(range(1, 101), 0.95) == 95
    assert percentile(range(1, 21), 0.95) == 19


def test_log_rejects_duplicates_and_bad_events():
    log = EventLog()
    log.append(make_event("r1"))
    with pytest.raises(InvalidEvent):
        log.append(make_event("r1"))
    log.append(make_event("r1", retry=1, start=200))
    bad = make_event("r2")
    with pytest.raises(InvalidEvent):
        log.append(type(bad)(**{**bad.__dict__, "latency_ms": 7}))
    assert len(log) == 2


def test_link_attaches_to_latest_attempt():
    log = EventLog()
    log.append(make_event("r1", provider="alpha", ok=False))
    log.append(make_event("r1", provider="beta", start=100, retry=1))
    assert link_completion(log, "r1", BusinessOutcome(BusinessKind.DELIVERED), 900) == "ok"
    assert log.events[log.links[0].attempt_index].provider == "beta"
    assert link_completion(log, "nope", BusinessOutcome(BusinessKind.DELIVERED), 900) == "unmatched"


def test_completion_rate_counts_links_within_timeout_only():
    log = EventLog(WC.completion_link_timeout_ms)
    agg = WindowAggregator(WC, log=log)
    for i in range(4):
        log.append(make_event(f"r{i}", start=1000 + i, latency=10, business=BusinessKind.ACCEPTED))
    log.link_completion("r0", BusinessOutcome(BusinessKind.DELIVERED), 2000)
    log.link_completion("r1", BusinessOutcome(BusinessKind.FAILED), 2000)
    log.link_completion("r2", BusinessOutcome(BusinessKind.DELIVERED), 1002 + 5_001)
    snap = agg.snapshot(KEY, 7000)
    assert (snap.attempted, snap.completed) == (4, 1)
    assert snap.completion_rate == 0.25
    # The reference rescan agrees.
    ref = aggregate(log, KEY, WC, 7000)
    assert (ref.attempted, ref.completed) == (4, 1)


def test_window_excludes_old_attempts_and_scopes_by_region():
    log = EventLog()
    agg = WindowAggregator(WC, log=log)
    log.append(make_event("old", start=0, region="US"))
    log.append(make_event("us", start=15_000, region="US"))
    log.append(make_event("de", start=15_500, region="DE"))
    assert agg.snapshot(KEY, 16_000).attempted == 2
    assert agg.snapshot(MetricKey(OP, "alpha", "DE"), 16_000).attempted == 1
    assert agg.snapshot(MetricKey(OP, "alpha", "US"), 16_000).attempted == 1


def test_empty_window_has_no_metrics():
    snap = WindowAggregator(WC).snapshot(KEY, 50_000)
    assert snap.attempted == 0
    assert snap.completion_rate is None and snap.latency_p95_ms is None and snap.mean_cost is None


@given(st.floats(0, 1e6, allow_nan=False))
def test_histogram_bins_cover_their_values(x):
    lo, hi = histogram_bin_bounds(histogram_bin(x))
    assert lo <= x < hi * (1 + 1e-12)


def test_incident_penalty_decays():
    inc = IncidentLog(tau_ms=1000)
    inc.declare(0, OP, "alpha")
    assert inc.penalty(KEY, 0) == 1.0
    assert math.isclose(inc.penalty(KEY, 1000), math.exp(-1))
    assert inc.penalty(MetricKey(OP, "beta"), 1000) == 0.0
    inc.declare(500, OP, "alpha", scope="DE")
    assert inc.penalty(MetricKey(OP, "alpha", "US"), 1000) == pytest.approx(math.exp(-1))
    assert inc.penalty(MetricKey(OP, "alpha", "DE"), 1000) == pytest.approx(min(1.0, math.exp(-1) + math.exp(-0.5)))


def test_snapshot_cache_publish_is_atomic_and_monotone():
    log = EventLog()
    agg = WindowAggregator(WC, log=log)
    log.append(make_event("a", start=100))
    log.append(make_event("b", provider="beta", start=100))
    cache = SnapshotCache()
    assert cache.get(OP, "global", 0, 1000).stale
    sid = cache.refresh(OP, agg, 1000)
    view = cache.get(OP, "global", 1500, 1000)
    assert set(view.snapshots) == {"alpha", "beta"}
    assert not view.stale
    assert all(s.snapshot_id == sid and s.freshness_ts == 1000 for s in view.snapshots.values())
    assert cache.get(OP, "global", 2001, 1000).stale
    with pytest.raises(ValueError):
        cache.publish(OP, [], 999)
    assert cache.refresh(OP, agg, 2000) != sid


def test_event_log_file_round_trip(tmp_path):
    log = EventLog()
    log.append(make_event("r1", business=BusinessKind.ACCEPTED))
    log.append(make_event("r2", provider="beta", ok=False))
    log.link_completion("r1", BusinessOutcome(BusinessKind.DELIVERED), 500)
    path = tmp_path / "events.jsonl"
    log.dump(path)
    events, warnings = load_event_log(path)
    assert events == log.events and warnings == []
    path.write_text(path.read_text() + "{not json\n")
    events, warnings = load_event_log(path, strict=False)
    assert len(events) == 2 and warnings


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(0, 1500), exact=st.booleans())
def test_streaming_matches_rescan(seed, n, exact):
    assert check_log(seed, n, exact) == []

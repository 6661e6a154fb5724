"""Event log, sliding-window aggregation and the snapshot cache read by the router.

Two aggregation paths exist on purpose:

* :func:`aggregate` rescans the raw log. It is the reference and the one
  used by tests as an oracle.
* :class:`WindowAggregator` maintains a ring of time buckets updated on
  append. In exact mode each bucket keeps the raw attempt records, so any
  query matches :func:`aggregate`. In bucketed mode buckets keep counters and
  a log-binned latency histogram; the window snaps to bucket boundaries and
  percentiles are resolved to one histogram bin.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from collections import defaultdict
from collections.abc import Callable, Iterable, Iterator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from factor_route.domain import (
    AttemptEvent,
    BusinessKind,
    BusinessOutcome,
    validate_event,
)

logger = logging.getLogger(__name__)

GLOBAL_SCOPE = "global"
DEFAULT_INCIDENT_TAU_MS = 300_000
HISTOGRAM_RATIO = 1.02


class InvalidEvent(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


class MalformedLine(ValueError):
    def __init__(self, path: str, line_no: int, reason: str):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {reason}")


class EmptySample(ValueError):
    pass


@dataclass(frozen=True)
class MetricKey:
    operation: str
    provider: str
    scope: str = GLOBAL_SCOPE

    def to_dict(self) -> dict[str, str]:
        return {"operation": self.operation, "provider": self.provider, "scope": self.scope}


@dataclass(frozen=True)
class WindowConfig:
    window_ms: int = 60_000
    bucket_ms: int = 5_000
    completion_link_timeout_ms: int = 120_000

    def __post_init__(self) -> None:
        if self.window_ms <= 0 or self.bucket_ms <= 0 or self.completion_link_timeout_ms <= 0:
            raise ValueError("window, bucket and link timeout must be positive")
        if self.window_ms % self.bucket_ms:
            raise ValueError("window_ms must be a multiple of bucket_ms")
        if self.window_ms // self.bucket_ms < 2:
            raise ValueError("window must hold at least 2 buckets")

    @property
    def n_buckets(self) -> int:
        return self.window_ms // self.bucket_ms


@dataclass(frozen=True)
class MetricSnapshot:
    key: MetricKey
    attempted: int
    completed: int
    completion_rate: float | None
    latency_p95_ms: float | None
    latency_p99_ms: float | None
    mean_cost: float | None
    incident_penalty: float
    sample_count: int
    freshness_ts: int
    snapshot_id: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "key": self.key.to_dict(),
            "attempted": self.attempted,
            "completed": self.completed,
            "completion_rate": self.completion_rate,
            "latency_p95_ms": self.latency_p95_ms,
            "latency_p99_ms": self.latency_p99_ms,
            "mean_cost": self.mean_cost,
            "incident_penalty": self.incident_penalty,
            "sample_count": self.sample_count,
            "freshness_ts": self.freshness_ts,
            "snapshot_id": self.snapshot_id,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> MetricSnapshot:
        return cls(key=MetricKey(**d["key"]), **{k: v for k, v in d.items() if k != "key"})


@dataclass(frozen=True)
class CompletionLink:
    request_id: str
    business: BusinessOutcome
    ts: int
    attempt_index: int
    within_timeout: bool

    def to_dict(self) -> dict[str, Any]:
        return {"request_id": self.request_id, "business_kind": self.business.kind.value, "ts": self.ts}


def percentile(samples: Iterable[float], q: float) -> float:
    """Nearest-rank percentile: the value at 0-based index ceil(q*n) - 1."""
    ordered = sorted(samples)
    n = len(ordered)
    if n == 0:
        raise EmptySample("percentile of an empty sample")
    rank = max(0, math.ceil(q * n - 1e-9) - 1)
    return ordered[min(rank, n - 1)]


# --------------------------------------------------------------------------
# Event log
# --------------------------------------------------------------------------


class EventLog:
    """Append-only attempt log with completion links.

    Attempts are unique per (request_id, retry_count); a completion link
    attaches to the latest attempt of its request.
    """

    def __init__(self, completion_link_timeout_ms: int = 120_000) -> None:
        self.completion_link_timeout_ms = completion_link_timeout_ms
        self.events: list[AttemptEvent] = []
        self.links: list[CompletionLink] = []
        self._by_request: dict[str, list[int]] = {}
        self._keys: set[tuple[str, int]] = set()
        self._lock = threading.Lock()
        self._event_listeners: list[Callable[[int, AttemptEvent], None]] = []
        self._link_listeners: list[Callable[[CompletionLink, AttemptEvent], None]] = []

    def subscribe(
        self,
        on_event: Callable[[int, AttemptEvent], None] | None = None,
        on_link: Callable[[CompletionLink, AttemptEvent], None] | None = None,
    ) -> None:
        if on_event is not None:
            self._event_listeners.append(on_event)
        if on_link is not None:
            self._link_listeners.append(on_link)

    def __len__(self) -> int:
        return len(self.events)

    def append(self, event: AttemptEvent) -> int:
        violations = validate_event(event)
        key = (event.request_id, event.retry_count)
        with self._lock:
            if key in self._keys:
                violations.append(
                    f"duplicate attempt: request {event.request_id!r} retry {event.retry_count}"
                )
            if violations:
                raise InvalidEvent(violations)
            seq = len(self.events)
            self.events.append(event)
            self._keys.add(key)
            self._by_request.setdefault(event.request_id, []).append(seq)
        for listener in self._event_listeners:
            listener(seq, event)
        return seq

    def link_completion(self, request_id: str, business: BusinessOutcome, ts: int) -> CompletionLink | None:
        """Attach a workflow outcome to the request's latest attempt.

        Returns ``None`` when no attempt carries ``request_id`` (unmatched).
        """
        with self._lock:
            indices = self._by_request.get(request_id)
            if not indices:
                return None
            idx = indices[-1]
            attempt = self.events[idx]
            link = CompletionLink(
                request_id=request_id,
                business=business,
                ts=ts,
                attempt_index=idx,
                within_timeout=ts - attempt.start_time <= self.completion_link_timeout_ms,
            )
            self.links.append(link)
        for listener in self._link_listeners:
            listener(link, attempt)
        return link

    def attempts_for(self, request_id: str) -> list[AttemptEvent]:
        with self._lock:
            return [self.events[i] for i in self._by_request.get(request_id, [])]

    def dump(self, path: str | Path) -> None:
        write_jsonl(path, (e.to_dict() for e in self.events))

    def dump_links(self, path: str | Path) -> None:
        write_jsonl(path, (link.to_dict() for link in self.links))


def append_event(log: EventLog, event: AttemptEvent) -> int:
    return log.append(event)


def link_completion(log: EventLog, request_id: str, business: BusinessOutcome, ts: int) -> str:
    return "ok" if log.link_completion(request_id, business, ts) is not None else "unmatched"


# --------------------------------------------------------------------------
# Incidents
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class IncidentMarker:
    ts: int
    operation: str
    provider: str
    scope: str
    source: str  # "circuit" or "operator"

    def to_dict(self) -> dict[str, Any]:
        return {
            "ts": self.ts,
            "key": {"operation": self.operation, "provider": self.provider, "scope": self.scope},
            "transition": "circuit_open" if self.source == "circuit" else "operator_incident",
        }


class IncidentLog:
    """Incident markers per (operation, provider); scope ``global`` applies everywhere."""

    def __init__(self, tau_ms: int = DEFAULT_INCIDENT_TAU_MS) -> None:
        self.tau_ms = tau_ms
        self.markers: list[IncidentMarker] = []
        self._by_pair: dict[tuple[str, str], list[IncidentMarker]] = defaultdict(list)
        self._lock = threading.Lock()

    def record(self, marker: IncidentMarker) -> None:
        with self._lock:
            self.markers.append(marker)
            self._by_pair[(marker.operation, marker.provider)].append(marker)

    def declare(self, ts: int, operation: str, provider: str, scope: str = GLOBAL_SCOPE) -> None:
        self.record(IncidentMarker(ts, operation, provider, scope, "operator"))

    def penalty(self, key: MetricKey, now: int, tau_ms: int | None = None) -> float:
        tau = self.tau_ms if tau_ms is None else tau_ms
        total = 0.0
        with self._lock:
            markers = list(self._by_pair.get((key.operation, key.provider), ()))
        for m in markers:
            if m.ts > now:
                continue
            if key.scope != GLOBAL_SCOPE and m.scope not in (key.scope, GLOBAL_SCOPE):
                continue
            total += math.exp(-(now - m.ts) / tau)
            if total >= 1.0:
                return 1.0
        return min(1.0, total)


def incident_penalty(incidents: IncidentLog, key: MetricKey, now: int) -> float:
    return incidents.penalty(key, now)


# --------------------------------------------------------------------------
# Reference aggregation (raw rescan)
# --------------------------------------------------------------------------


def _scopes_for(event: AttemptEvent) -> tuple[str, str]:
    return (event.region, GLOBAL_SCOPE)


def _key_matches(key: MetricKey, event: AttemptEvent) -> bool:
    return (
        event.operation == key.operation
        and event.provider == key.provider
        and (key.scope == GLOBAL_SCOPE or event.region == key.scope)
    )


def _completion_times(log: EventLog, now: int) -> dict[int, int]:
    """Earliest workflow-success time per attempt index, among signals known by ``now``."""
    done: dict[int, int] = {}
    for idx, e in enumerate(log.events):
        if e.business.is_workflow_success and e.end_time <= now:
            done[idx] = e.end_time
    for link in log.links:
        if link.business.is_workflow_success and link.ts <= now:
            prev = done.get(link.attempt_index)
            if prev is None or link.ts < prev:
                done[link.attempt_index] = link.ts
    return done


def aggregate(
    log: EventLog,
    key: MetricKey,
    wc: WindowConfig,
    now: int,
    incidents: IncidentLog | None = None,
    window_start: int | None = None,
) -> MetricSnapshot:
    """Rescan the raw log for one key over ``(now - window_ms, now]``.

    ``window_start`` (exclusive) overrides the lower edge; the bucketed
    aggregator's snapped window is checked against this path that way.
    """
    lo = now - wc.window_ms if window_start is None else window_start
    done = _completion_times(log, now)
    attempted = completed = 0
    latencies: list[float] = []
    cost = 0.0
    for idx, e in enumerate(log.events):
        if not _key_matches(key, e) or not lo < e.start_time <= now:
            continue
        attempted += 1
        latencies.append(e.latency_ms)
        cost += e.cost
        t = done.get(idx)
        if t is not None and t - e.start_time <= wc.completion_link_timeout_ms:
            completed += 1
    return MetricSnapshot(
        key=key,
        attempted=attempted,
        completed=completed,
        completion_rate=completed / attempted if attempted else None,
        latency_p95_ms=percentile(latencies, 0.95) if latencies else None,
        latency_p99_ms=percentile(latencies, 0.99) if latencies else None,
        mean_cost=cost / attempted if attempted else None,
        incident_penalty=0.0 if incidents is None else incidents.penalty(key, now),
        sample_count=attempted,
        freshness_ts=now,
    )


# --------------------------------------------------------------------------
# Streaming aggregation
# --------------------------------------------------------------------------


def histogram_bin(value: float) -> int:
    if value < 1.0:
        return 0
    return 1 + int(math.floor(math.log(value) / math.log(HISTOGRAM_RATIO)))


def histogram_bin_bounds(index: int) -> tuple[float, float]:
    """Half-open ``[lo, hi)`` latency range covered by a histogram bin."""
    if index == 0:
        return 0.0, 1.0
    return HISTOGRAM_RATIO ** (index - 1), HISTOGRAM_RATIO**index


@dataclass
class _Bucket:
    index: int
    attempted: int = 0
    completed: int = 0
    cost: float = 0.0
    lat_min: float = math.inf
    lat_max: float = -math.inf
    histogram: dict[int, int] = field(default_factory=dict)
    # exact mode only: (start_time, latency, cost, attempt_index)
    records: list[tuple[int, float, float, int]] = field(default_factory=list)


@dataclass
class _Pending:
    keys: tuple[MetricKey, ...]
    bucket: int
    start_time: int
    completed: bool


class WindowAggregator:
    """Ring of fixed-duration buckets per metric key, fed by an :class:`EventLog`."""

    def __init__(
        self,
        wc: WindowConfig,
        exact: bool = True,
        incidents: IncidentLog | None = None,
        log: EventLog | None = None,
    ) -> None:
        self.wc = wc
        self.exact = exact
        self.incidents = incidents
        self._buckets: dict[MetricKey, dict[int, _Bucket]] = defaultdict(dict)
        self._pending: dict[int, _Pending] = {}
        self._completed_at: dict[int, int] = {}
        self._latest_ts = 0
        self._evicted_below = 0
        self._lock = threading.Lock()
        if log is not None:
            log.subscribe(self.on_event, self.on_link)

    def _bucket_of(self, ts: int) -> int:
        return ts // self.wc.bucket_ms

    def _horizon(self) -> int:
        slack = self.wc.completion_link_timeout_ms // self.wc.bucket_ms + 1
        return self._bucket_of(self._latest_ts) - self.wc.n_buckets - slack

    def keys(self, operation: str | None = None) -> list[MetricKey]:
        with self._lock:
            return sorted(
                (k for k in self._buckets if operation is None or k.operation == operation),
                key=lambda k: (k.operation, k.scope, k.provider),
            )

    def on_event(self, seq: int, event: AttemptEvent) -> None:
        b = self._bucket_of(event.start_time)
        keys = tuple(MetricKey(event.operation, event.provider, s) for s in _scopes_for(event))
        done = event.business.is_workflow_success and (
            event.end_time - event.start_time <= self.wc.completion_link_timeout_ms
        )
        with self._lock:
            self._latest_ts = max(self._latest_ts, event.end_time)
            for key in keys:
                bucket = self._buckets[key].get(b)
                if bucket is None:
                    bucket = self._buckets[key][b] = _Bucket(b)
                bucket.attempted += 1
                bucket.cost += event.cost
                lat = event.latency_ms
                if self.exact:
                    bucket.records.append((event.start_time, lat, event.cost, seq))
                else:
                    h = histogram_bin(lat)
                    bucket.histogram[h] = bucket.histogram.get(h, 0) + 1
                    bucket.lat_min = min(bucket.lat_min, lat)
                    bucket.lat_max = max(bucket.lat_max, lat)
                if done:
                    bucket.completed += 1
            self._pending[seq] = _Pending(keys, b, event.start_time, done)
            if done:
                self._completed_at[seq] = event.end_time
            self._evict()

    def on_link(self, link: CompletionLink, attempt: AttemptEvent) -> None:
        with self._lock:
            self._latest_ts = max(self._latest_ts, link.ts)
            pending = self._pending.get(link.attempt_index)
            if pending is None or pending.completed:
                return
            if not link.business.is_workflow_success:
                return
            if link.ts - pending.start_time > self.wc.completion_link_timeout_ms:
                return
            pending.completed = True
            self._completed_at[link.attempt_index] = link.ts
            for key in pending.keys:
                bucket = self._buckets[key].get(pending.bucket)
                if bucket is not None:
                    bucket.completed += 1

    def _evict(self) -> None:
        horizon = self._horizon()
        if horizon <= self._evicted_below:
            return
        self._evicted_below = horizon
        for buckets in self._buckets.values():
            for idx in [i for i in buckets if i < horizon]:
                del buckets[idx]
        stale = [i for i, p in self._pending.items() if p.bucket < horizon]
        for i in stale:
            self._completed_at.pop(i, None)
            del self._pending[i]

    def window_start(self, now: int) -> int:
        """Exclusive lower edge of the window this aggregator answers for ``now``."""
        if self.exact:
            return now - self.wc.window_ms
        first_bucket = self._bucket_of(now) - self.wc.n_buckets + 1
        return first_bucket * self.wc.bucket_ms - 1

    def snapshot(self, key: MetricKey, now: int, snapshot_id: str = "", freshness_ts: int | None = None) -> MetricSnapshot:
        hi_b = self._bucket_of(now)
        lo_b = hi_b - self.wc.n_buckets
        attempted = completed = 0
        cost = 0.0
        with self._lock:
            buckets = [b for i, b in self._buckets.get(key, {}).items() if lo_b <= i <= hi_b]
            if self.exact:
                lo = now - self.wc.window_ms
                latencies: list[float] = []
                for b in buckets:
                    for start, lat, c, idx in b.records:
                        if lo < start <= now:
                            attempted += 1
                            latencies.append(lat)
                            cost += c
                            t = self._completed_at.get(idx)
                            if t is not None and t <= now:
                                completed += 1
                p95 = percentile(latencies, 0.95) if latencies else None
                p99 = percentile(latencies, 0.99) if latencies else None
            else:
                merged: dict[int, int] = defaultdict(int)
                lat_min, lat_max = math.inf, -math.inf
                for b in buckets:
                    if b.index == lo_b:
                        continue
                    attempted += b.attempted
                    completed += b.completed
                    cost += b.cost
                    for h, n in b.histogram.items():
                        merged[h] += n
                    lat_min = min(lat_min, b.lat_min)
                    lat_max = max(lat_max, b.lat_max)
                p95 = _histogram_percentile(merged, attempted, 0.95, lat_min, lat_max)
                p99 = _histogram_percentile(merged, attempted, 0.99, lat_min, lat_max)
        return MetricSnapshot(
            key=key,
            attempted=attempted,
            completed=completed,
            completion_rate=completed / attempted if attempted else None,
            latency_p95_ms=p95,
            latency_p99_ms=p99,
            mean_cost=cost / attempted if attempted else None,
            incident_penalty=0.0 if self.incidents is None else self.incidents.penalty(key, now),
            sample_count=attempted,
            freshness_ts=now if freshness_ts is None else freshness_ts,
            snapshot_id=snapshot_id,
        )


def _histogram_percentile(
    hist: dict[int, int], n: int, q: float, lat_min: float, lat_max: float
) -> float | None:
    if n == 0:
        return None
    rank = max(0, math.ceil(q * n - 1e-9) - 1)
    seen = 0
    for idx in sorted(hist):
        seen += hist[idx]
        if seen > rank:
            _, hi = histogram_bin_bounds(idx)
            return min(max(hi, lat_min), lat_max)
    return lat_max


# --------------------------------------------------------------------------
# Snapshot cache
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SnapshotView:
    snapshots: dict[str, MetricSnapshot]
    stale: bool
    freshness_ts: int | None
    snapshot_id: str


@dataclass(frozen=True)
class _Published:
    by_scope: dict[str, dict[str, MetricSnapshot]]
    freshness_ts: int
    snapshot_id: str


class SnapshotCache:
    """Materialized per-operation snapshots with freshness stamps.

    Each publish replaces the whole operation entry, so readers never see a
    half-updated set.
    """

    def __init__(self) -> None:
        self._published: dict[str, _Published] = {}
        self._seq = 0
        self._lock = threading.Lock()

    def _next_id(self) -> str:
        self._seq += 1
        return f"snap-{self._seq:08d}"

    def publish(self, operation: str, snapshots: Iterable[MetricSnapshot], freshness_ts: int) -> str:
        by_scope: dict[str, dict[str, MetricSnapshot]] = defaultdict(dict)
        with self._lock:
            prev = self._published.get(operation)
            if prev is not None and freshness_ts < prev.freshness_ts:
                raise ValueError("freshness_ts must not go backwards")
            snapshot_id = self._next_id()
            for s in snapshots:
                by_scope[s.key.scope][s.key.provider] = MetricSnapshot(
                    **{**s.__dict__, "snapshot_id": snapshot_id, "freshness_ts": freshness_ts}
                )
            self._published[operation] = _Published(dict(by_scope), freshness_ts, snapshot_id)
        return snapshot_id

    def refresh(self, operation: str, aggregator: WindowAggregator, as_of: int) -> str:
        snaps = [aggregator.snapshot(k, as_of) for k in aggregator.keys(operation)]
        return self.publish(operation, snaps, as_of)

    def get(self, operation: str, scope: str, now: int, stale_after_ms: int) -> SnapshotView:
        with self._lock:
            pub = self._published.get(operation)
        if pub is None:
            return SnapshotView({}, stale=True, freshness_ts=None, snapshot_id="")
        return SnapshotView(
            snapshots=dict(pub.by_scope.get(scope, {})),
            stale=now - pub.freshness_ts > stale_after_ms,
            freshness_ts=pub.freshness_ts,
            snapshot_id=pub.snapshot_id,
        )

    def dump(self, path: str | Path) -> None:
        with self._lock:
            rows = [
                s.to_dict()
                for pub in self._published.values()
                for scope in sorted(pub.by_scope)
                for s in pub.by_scope[scope].values()
            ]
        write_jsonl(path, rows)


def snapshot_cache_get(
    cache: SnapshotCache, operation: str, scope: str, now: int, stale_after_ms: int
) -> SnapshotView:
    return cache.get(operation, scope, now, stale_after_ms)


# --------------------------------------------------------------------------
# Files
# --------------------------------------------------------------------------


def write_jsonl(path: str | Path, rows: Iterable[dict[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":"), ensure_ascii=False))
            fh.write("\n")


def _iter_jsonl(path: str | Path) -> Iterator[tuple[int, str]]:
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if line.strip():
                yield line_no, line


def load_event_log(path: str | Path, strict: bool = False) -> tuple[list[AttemptEvent], list[str]]:
    """Read a JSONL event log in file order.

    Malformed lines raise :class:`MalformedLine` when ``strict``; otherwise
    they are skipped and reported in the returned warnings.
    """
    events: list[AttemptEvent] = []
    warnings: list[str] = []
    for line_no, line in _iter_jsonl(path):
        try:
            events.append(AttemptEvent.from_json(line))
        except (ValueError, KeyError, TypeError) as exc:
            err = MalformedLine(str(path), line_no, f"{type(exc).__name__}: {exc}")
            if strict:
                raise err from exc
            logger.warning("%s", err)
            warnings.append(str(err))
    return events, warnings


def load_completion_links(path: str | Path) -> list[tuple[str, BusinessOutcome, int]]:
    out = []
    for line_no, line in _iter_jsonl(path):
        try:
            d = json.loads(line)
            out.append((d["request_id"], BusinessOutcome(BusinessKind(d["business_kind"])), int(d["ts"])))
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedLine(str(path), line_no, str(exc)) from exc
    return out

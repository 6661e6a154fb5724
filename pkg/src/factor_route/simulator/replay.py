"""Counterfactual replay of a recorded event log against a candidate factor list.

The recorded requests are re-driven through the real router at their
original timestamps. When the candidate routes an attempt to the provider
that actually served it, the recorded response is reused verbatim. Any other
selection gets a substituted response built from the provider's recorded
statistics over the trailing metric window (falling back to its whole-log
statistics, then to the operation-wide rate). Substituted outcomes are an
approximation and are counted separately in the report.

Replay runs in expectation mode, so substituted failures contribute their
probability rather than a coin flip and the failure delta is not noisy.
"""

from __future__ import annotations

import bisect
import json
import logging
from collections import Counter, defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from factor_route.config import FactorList
from factor_route.domain import (
    SCHEMA_VERSION,
    WORKFLOW_SUCCESS_KINDS,
    AttemptEvent,
    BusinessKind,
    BusinessOutcome,
    CircuitState,
    RequestContext,
    TrafficClass,
    TransportKind,
    TransportOutcome,
)
from factor_route.router import DecisionTrace, ProviderResponse
from factor_route.simulator.engine import ErrorDiffuser, RunSettings, SimReport, SimResponse, Simulation
from factor_route.simulator.scenario import ConfigImpairment, OperatorAction, SimMode, TelemetryImpairment
from factor_route.telemetry import load_completion_links, load_event_log

logger = logging.getLogger(__name__)

SHED_CATEGORIES = frozenset({"circuit_open", "shed"})


class ReplayError(ValueError):
    """The log cannot be replayed (unreadable or incompatible schema)."""


def is_shed(event: AttemptEvent) -> bool:
    """Pre-invocation rejections never reached the provider and carry no outcome."""
    return (
        event.transport.kind is TransportKind.CONNECTION_ERROR
        and event.transport.error_category in SHED_CATEGORIES
        and event.start_time == event.end_time
    )


@dataclass(frozen=True)
class _Recorded:
    event: AttemptEvent
    workflow_success: bool
    link_delay_ms: int | None


class _ProviderStats:
    """Recorded outcomes of one provider ordered by end time, with prefix sums."""

    def __init__(self, rows: list[tuple[int, bool, float, bool]]) -> None:
        rows.sort(key=lambda r: r[0])
        self.ends = [r[0] for r in rows]
        self.latencies = [r[2] for r in rows]
        self.prefix = [0]
        for r in rows:
            self.prefix.append(self.prefix[-1] + (1 if r[1] else 0))
        failures = [r for r in rows if not r[1]]
        self.silent = bool(failures) and sum(1 for r in failures if r[3]) * 2 >= len(failures)

    def rate(self, lo: int, hi: int) -> tuple[float, int, int] | None:
        """Success rate over recorded attempts ending in [lo, hi); also returns the slice."""
        i = bisect.bisect_left(self.ends, lo)
        j = bisect.bisect_left(self.ends, hi)
        if j <= i:
            return None
        return (self.prefix[j] - self.prefix[i]) / (j - i), i, j

    def whole(self) -> tuple[float, int, int] | None:
        n = len(self.ends)
        return (self.prefix[n] / n, 0, n) if n else None


class RecordedSource:
    """Response source backed by a recorded event log.

    Args:
        events: Recorded attempts.
        links: Recorded completion links (request_id, business outcome, ts).
        window_ms: Trailing window used for substituted outcomes.
    """

    def __init__(
        self,
        events: Sequence[AttemptEvent],
        links: Iterable[tuple[str, BusinessOutcome, int]] = (),
        window_ms: int = 60_000,
    ) -> None:
        self.window_ms = window_ms
        latest: dict[str, AttemptEvent] = {}
        for e in events:
            cur = latest.get(e.request_id)
            if cur is None or e.retry_count >= cur.retry_count:
                latest[e.request_id] = e
        delivered: dict[str, int] = {}
        for rid, business, ts in links:
            if business.kind in WORKFLOW_SUCCESS_KINDS and rid not in delivered:
                delivered[rid] = ts
        self.recorded: dict[tuple[str, int, str], _Recorded] = {}
        rows: dict[str, list[tuple[int, bool, float, bool]]] = defaultdict(list)
        for e in events:
            if is_shed(e):
                continue
            ok = e.business.kind in WORKFLOW_SUCCESS_KINDS and not e.timeout
            delay = None
            if (
                not ok
                and not e.timeout
                and e.business.kind is BusinessKind.ACCEPTED
                and latest[e.request_id] is e
                and e.request_id in delivered
            ):
                ok = True
                delay = max(0, delivered[e.request_id] - e.end_time)
            self.recorded[(e.request_id, e.retry_count, e.provider)] = _Recorded(e, ok, delay)
            rows[e.provider].append((e.end_time, ok, float(e.latency_ms), e.transport.kind is TransportKind.SUCCESS))
        self.stats = {p: _ProviderStats(r) for p, r in rows.items()}
        total = sum(len(s.ends) for s in self.stats.values())
        self.overall = sum(s.prefix[-1] for s in self.stats.values()) / total if total else 0.0
        self._diffuser = ErrorDiffuser()
        self.reused = 0
        self.substituted = 0
        self.substituted_by_provider: Counter[str] = Counter()

    def _estimate(self, provider: str, now: int) -> tuple[float, float, bool]:
        """(success rate, median latency, silent failures) for a provider at ``now``."""
        stats = self.stats.get(provider)
        if stats is None:
            return self.overall, 1.0, False
        found = stats.rate(now - self.window_ms, now) or stats.whole()
        assert found is not None
        rate, i, j = found
        lat = sorted(stats.latencies[i:j])
        return rate, lat[(len(lat) - 1) // 2], stats.silent

    def success_prob(self, provider: str, ctx: RequestContext, attempt: int, now: int) -> tuple[float, bool]:
        rec = self.recorded.get((ctx.request_id, attempt, provider))
        if rec is not None:
            failed_visibly = rec.event.timeout or rec.event.transport.kind is not TransportKind.SUCCESS
            return (1.0 if rec.workflow_success else 0.0), failed_visibly
        rate, _, silent = self._estimate(provider, now)
        return rate, not silent

    def respond(self, provider: str, ctx: RequestContext, attempt: int, now: int, deadline_ms: int) -> SimResponse:
        rec = self.recorded.get((ctx.request_id, attempt, provider))
        if rec is not None:
            self.reused += 1
            e = rec.event
            latency = int(e.latency_ms) + 1 if e.timeout else int(e.latency_ms)
            resp = ProviderResponse(latency, e.transport, e.business, e.cost)
            return SimResponse(resp, rec.workflow_success, rec.link_delay_ms, "recorded")
        self.substituted += 1
        self.substituted_by_provider[provider] += 1
        rate, latency, silent = self._estimate(provider, now)
        latency_ms = max(1, int(round(latency)))
        ok_transport = TransportOutcome(TransportKind.SUCCESS, 200)
        if self._diffuser.draw((provider, "success"), rate):
            resp = ProviderResponse(latency_ms, ok_transport, BusinessOutcome(BusinessKind.DELIVERED))
            return SimResponse(resp, True, None, "substituted")
        if silent:
            resp = ProviderResponse(latency_ms, ok_transport, BusinessOutcome(BusinessKind.FAILED))
        else:
            resp = ProviderResponse(latency_ms, TransportOutcome(TransportKind.SERVER_ERROR, 503, "substituted"))
        return SimResponse(resp, False, None, "substituted")


# --------------------------------------------------------------------------
# Recorded decisions and switches
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Decision:
    """One routing decision reduced to what it chose."""

    trace_id: str
    timestamp: int
    scope: str
    choice: str | None
    attempt: int
    probe: bool


def _trace_choice(t: DecisionTrace) -> str | None:
    if t.selected is not None:
        return t.selected
    return f"fallback:{t.fallback.value}" if t.fallback is not None else None


def decisions_from_traces(traces: Iterable[DecisionTrace]) -> dict[str, Decision]:
    out: dict[str, Decision] = {}
    for t in traces:
        scope = t.context.region if t.context is not None else ""
        out[t.trace_id] = Decision(t.trace_id, t.timestamp, scope, _trace_choice(t), t.attempt, t.probe)
    return out


def decisions_from_events(events: Iterable[AttemptEvent]) -> dict[str, Decision]:
    out: dict[str, Decision] = {}
    for e in events:
        tid = e.trace_id or f"{e.request_id}:{e.retry_count}"
        probe = e.circuit_state is CircuitState.HALF_OPEN
        out[tid] = Decision(tid, e.start_time, e.region, e.provider, e.retry_count, probe)
    return out


@dataclass(frozen=True)
class DerivedSwitch:
    ts: int
    scope: str
    from_provider: str
    to_provider: str

    def to_dict(self) -> dict[str, Any]:
        return {"ts": self.ts, "scope": self.scope, "from": self.from_provider, "to": self.to_provider}


def derive_switches(decisions: Iterable[Decision]) -> list[DerivedSwitch]:
    """Changes of first-attempt, non-probe provider choice per scope, in time order."""
    last: dict[str, str] = {}
    out: list[DerivedSwitch] = []
    for d in sorted(decisions, key=lambda d: (d.timestamp, d.trace_id)):
        if d.attempt != 0 or d.probe or d.choice is None or d.choice.startswith("fallback:"):
            continue
        prev = last.get(d.scope)
        if prev is not None and prev != d.choice:
            out.append(DerivedSwitch(d.timestamp, d.scope, prev, d.choice))
        last[d.scope] = d.choice
    return out


def count_flaps(switches: Sequence[DerivedSwitch]) -> int:
    """Switches that reverse the previous switch in the same scope."""
    flaps = 0
    last: dict[str, DerivedSwitch] = {}
    for s in switches:
        prev = last.get(s.scope)
        if prev is not None and prev.from_provider == s.to_provider and prev.to_provider == s.from_provider:
            flaps += 1
        last[s.scope] = s
    return flaps


def recorded_failures(
    events: Iterable[AttemptEvent],
    links: Iterable[tuple[str, BusinessOutcome, int]] = (),
    request_ids: Iterable[str] = (),
) -> int:
    """Requests none of whose recorded attempts completed the workflow.

    ``request_ids`` adds requests that may have no attempts at all (fallbacks).
    """
    delivered = {rid for rid, b, _ in links if b.kind in WORKFLOW_SUCCESS_KINDS}
    ok: dict[str, bool] = dict.fromkeys(request_ids, False)
    for e in events:
        success = (e.business.kind in WORKFLOW_SUCCESS_KINDS and not e.timeout) or (
            e.business.kind is BusinessKind.ACCEPTED and e.request_id in delivered and not e.timeout
        )
        ok[e.request_id] = ok.get(e.request_id, False) or success
    return sum(1 for v in ok.values() if not v)


# --------------------------------------------------------------------------
# Replay
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DecisionDiff:
    trace_id: str
    timestamp: int
    recorded: str | None
    replayed: str | None

    def to_dict(self) -> dict[str, Any]:
        return {"trace_id": self.trace_id, "timestamp": self.timestamp, "recorded": self.recorded, "replayed": self.replayed}


@dataclass
class ReplayResult:
    report: SimReport
    decisions_compared: int
    diffs: list[DecisionDiff]
    recorded_switches: list[DerivedSwitch]
    replayed_switches: list[DerivedSwitch]
    recorded_flaps: int
    replayed_flaps: int
    recorded_failures: float
    replayed_failures: float
    reused: int
    substituted: int
    substituted_by_provider: dict[str, int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def diff_count(self) -> int:
        return len(self.diffs)

    @property
    def switches_added(self) -> list[DerivedSwitch]:
        have = set(self.recorded_switches)
        return [s for s in self.replayed_switches if s not in have]

    @property
    def switches_removed(self) -> list[DerivedSwitch]:
        have = set(self.replayed_switches)
        return [s for s in self.recorded_switches if s not in have]

    @property
    def flap_delta(self) -> int:
        return self.replayed_flaps - self.recorded_flaps

    @property
    def expected_failure_delta(self) -> float:
        return self.replayed_failures - self.recorded_failures

    def summary(self) -> str:
        return (
            f"{self.diff_count} diffs over {self.decisions_compared} decisions; "
            f"switches added={len(self.switches_added)} removed={len(self.switches_removed)}; "
            f"flaps {self.recorded_flaps}->{self.replayed_flaps} (delta {self.flap_delta:+d}); "
            f"failures {self.recorded_failures:g}->{self.replayed_failures:.6g} "
            f"(delta {self.expected_failure_delta:+.6g}); "
            f"outcomes reused={self.reused} substituted={self.substituted}"
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "decisions_compared": self.decisions_compared,
            "diff_count": self.diff_count,
            "diffs": [d.to_dict() for d in self.diffs[:100]],
            "switches_added": [s.to_dict() for s in self.switches_added],
            "switches_removed": [s.to_dict() for s in self.switches_removed],
            "recorded_flaps": self.recorded_flaps,
            "replayed_flaps": self.replayed_flaps,
            "flap_delta": self.flap_delta,
            "recorded_failures": self.recorded_failures,
            "replayed_failures": round(self.replayed_failures, 6),
            "expected_failure_delta": round(self.expected_failure_delta, 6),
            "reused": self.reused,
            "substituted": self.substituted,
            "substituted_by_provider": dict(sorted(self.substituted_by_provider.items())),
            "warnings": self.warnings,
            "report": self.report.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _contexts_from_events(events: Sequence[AttemptEvent], traffic_class: TrafficClass) -> list[RequestContext]:
    first: dict[str, AttemptEvent] = {}
    for e in events:
        cur = first.get(e.request_id)
        if cur is None or e.retry_count < cur.retry_count:
            first[e.request_id] = e
    ctxs = [
        RequestContext(e.request_id, e.operation, e.region, e.start_time, tenant=e.tenant, traffic_class=traffic_class)
        for e in first.values()
    ]
    ctxs.sort(key=lambda c: (c.timestamp, c.request_id))
    return ctxs


def _contexts_from_traces(traces: Sequence[DecisionTrace]) -> list[RequestContext]:
    ctxs = [t.context for t in traces if t.attempt == 0 and t.context is not None]
    ctxs.sort(key=lambda c: (c.timestamp, c.request_id))
    return ctxs


def load_traces(path: str | Path) -> list[DecisionTrace]:
    with open(path, encoding="utf-8") as fh:
        return [DecisionTrace.from_json(line) for line in fh if line.strip()]


def replay_events(
    events: Sequence[AttemptEvent],
    candidate: FactorList,
    links: Sequence[tuple[str, BusinessOutcome, int]] = (),
    traces: Sequence[DecisionTrace] | None = None,
    traffic_class: TrafficClass = TrafficClass.INTERACTIVE,
    operator_actions: Sequence[OperatorAction] = (),
    telemetry_impairment: TelemetryImpairment | None = None,
    config_impairment: ConfigImpairment | None = None,
) -> ReplayResult:
    """Re-drive the router over recorded requests with ``candidate`` and diff the decisions.

    Args:
        events: The recorded attempt log.
        candidate: Factor list to evaluate.
        links: Recorded completion links, needed when providers confirm asynchronously.
        traces: Recorded decision traces. When given they supply the request
            contexts (including requests that were never attempted) and the
            decisions to diff against; otherwise both come from the events.
        traffic_class: Traffic class for contexts rebuilt from events.
        operator_actions: Operator actions to re-apply during the replay.
        telemetry_impairment: Telemetry impairment to re-apply.
        config_impairment: Config-store impairment to re-apply.
    """
    for e in events:
        if e.schema_version != SCHEMA_VERSION:
            raise ReplayError(
                f"incompatible_schema_version: event {e.request_id}:{e.retry_count} has "
                f"schema {e.schema_version}, expected {SCHEMA_VERSION}"
            )
    contexts = _contexts_from_traces(traces) if traces else _contexts_from_events(events, traffic_class)
    recorded = decisions_from_traces(traces) if traces else decisions_from_events(events)
    source = RecordedSource(events, links, candidate.control.window_ms)
    last_ts = max((c.timestamp for c in contexts), default=0)
    settings = RunSettings(
        name="replay",
        mode=SimMode.EXPECTATION,
        seed=0,
        duration_ms=last_ts + 1,
        telemetry_impairment=telemetry_impairment,
        config_impairment=config_impairment,
        operator_actions=tuple(operator_actions),
        keep_traces=True,
    )
    report = Simulation(candidate, contexts, source, settings).run()
    replayed = decisions_from_traces(report.traces)
    if not traces:
        # Events exist only for attempts that reached admission; fallbacks left no record.
        replayed_cmp = {k: v for k, v in replayed.items() if not (v.choice or "").startswith("fallback:")}
    else:
        replayed_cmp = replayed
    diffs: list[DecisionDiff] = []
    for tid in sorted(set(recorded) | set(replayed_cmp)):
        a, b = recorded.get(tid), replayed_cmp.get(tid)
        if (a.choice if a else None) != (b.choice if b else None):
            ts = (a or b).timestamp  # type: ignore[union-attr]
            diffs.append(DecisionDiff(tid, ts, a.choice if a else None, b.choice if b else None))
    diffs.sort(key=lambda d: (d.timestamp, d.trace_id))
    rec_sw = derive_switches(recorded.values())
    rep_sw = derive_switches(replayed.values())
    result = ReplayResult(
        report=report,
        decisions_compared=len(set(recorded) | set(replayed_cmp)),
        diffs=diffs,
        recorded_switches=rec_sw,
        replayed_switches=rep_sw,
        recorded_flaps=count_flaps(rec_sw),
        replayed_flaps=count_flaps(rep_sw),
        recorded_failures=float(recorded_failures(events, links, (c.request_id for c in contexts))),
        replayed_failures=report.failed_request_count,
        reused=source.reused,
        substituted=source.substituted,
        substituted_by_provider=dict(source.substituted_by_provider),
    )
    logger.info("replay: %s", result.summary())
    return result


def replay(
    event_log_path: str | Path,
    candidate_factor_list: FactorList,
    links_path: str | Path | None = None,
    traces_path: str | Path | None = None,
    strict: bool = True,
    **kwargs: Any,
) -> ReplayResult:
    """Replay a JSONL event log file against ``candidate_factor_list``.

    Raises:
        ReplayError: The log is unreadable, malformed (when ``strict``) or
            written with an incompatible schema version.
    """
    try:
        events, warnings = load_event_log(event_log_path, strict=strict)
        links = load_completion_links(links_path) if links_path else []
        traces = load_traces(traces_path) if traces_path else None
    except OSError as exc:
        raise ReplayError(f"io_error: {exc}") from exc
    except ValueError as exc:
        raise ReplayError(str(exc)) from exc
    result = replay_events(events, candidate_factor_list, links, traces, **kwargs)
    result.warnings.extend(warnings)
    return result

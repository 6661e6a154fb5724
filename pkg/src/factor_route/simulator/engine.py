"""Discrete-event simulation of the closed routing loop over virtual time.

Arrivals are routed through the real :class:`~factor_route.router.Router`;
attempts complete at ``start + latency`` and feed the event log, the window
aggregator and the circuit breakers, so routing reacts to what it caused.

Two accounting modes exist. *Sampled* mode draws each outcome from a seeded
generator. *Expectation* mode realizes outcomes with per-provider error
diffusion (so telemetry still sees the right success fraction) and counts
failures as fractional probability mass, which makes closed-form results
reproduce exactly.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import math
import random
from collections import Counter, defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from typing import Any, Protocol

from factor_route.config import (
    ConfigStore,
    ConfigStoreUnavailable,
    FactorList,
    RetryPolicy,
    compute_version,
)
from factor_route.domain import (
    BusinessKind,
    BusinessOutcome,
    CircuitState,
    RequestContext,
    TrafficClass,
    TransportKind,
    TransportOutcome,
)
from factor_route.hashing import derive_seed
from factor_route.protection import CircuitTransition, Protection, RetryDecision
from factor_route.router import (
    AttemptResult,
    DecisionTrace,
    PendingAttempt,
    ProviderResponse,
    RouteOutcome,
    Router,
    SwitchRecord,
    begin_attempt,
    finish_attempt,
    rejected_result,
    trace_violations,
)
from factor_route.simulator.analytical import expected_failures, failover_latency_bound
from factor_route.simulator.scenario import (
    ArrivalProcess,
    ConfigImpairment,
    FailoverTerms,
    FailureMode,
    LatencyKind,
    OperatorAction,
    Scenario,
    SimMode,
    TelemetryImpairment,
)
from factor_route.telemetry import (
    EventLog,
    IncidentLog,
    IncidentMarker,
    SnapshotCache,
    WindowAggregator,
    WindowConfig,
)

logger = logging.getLogger(__name__)

SERIES_BUCKET_MS = 60_000

# Same-timestamp ordering: control-plane changes, then completions, then
# telemetry publication, then new work.
_PRIO_CONTROL = 0
_PRIO_COMPLETE = 1
_PRIO_LINK = 2
_PRIO_REFRESH = 3
_PRIO_ARRIVAL = 4


# --------------------------------------------------------------------------
# Provider responses
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SimResponse:
    response: ProviderResponse
    workflow_success: bool
    link_delay_ms: int | None = None
    label: str = "model"


class ResponseSource(Protocol):
    def respond(self, provider: str, ctx: RequestContext, attempt: int, now: int, deadline_ms: int) -> SimResponse: ...

    def success_prob(self, provider: str, ctx: RequestContext, attempt: int, now: int) -> tuple[float, bool]:
        """Return (success probability, whether a failure is visible to retry logic)."""
        ...


class ErrorDiffuser:
    """Deterministic Bernoulli substitute: emits True at long-run rate ``p``."""

    def __init__(self) -> None:
        self.acc: dict[tuple[str, str], float] = defaultdict(lambda: 0.5)

    def draw(self, key: tuple[str, str], p: float) -> bool:
        acc = self.acc[key] + p
        if acc >= 1.0:
            self.acc[key] = acc - 1.0
            return True
        self.acc[key] = acc
        return False


class ModelSource:
    """Responses drawn from a scenario's synthetic provider models."""

    def __init__(self, scenario: Scenario, mode: SimMode, seed: int) -> None:
        self.scenario = scenario
        self.mode = mode
        self._diffuser = ErrorDiffuser()
        self._rngs = {p.id: random.Random(derive_seed(seed, "provider", p.id)) for p in scenario.providers}

    def _draw(self, provider: str, what: str, p: float) -> bool:
        if self.mode is SimMode.EXPECTATION:
            return self._diffuser.draw((provider, what), p)
        return self._rngs[provider].random() < p

    def _latency(self, provider: str, base_ms: float, kind: LatencyKind, sigma: float, mult: float) -> int:
        if kind is LatencyKind.LOGNORMAL and self.mode is SimMode.SAMPLED:
            value = self._rngs[provider].lognormvariate(math.log(base_ms), sigma)
        else:
            value = base_ms
        return max(1, int(round(value * mult)))

    def success_prob(self, provider: str, ctx: RequestContext, attempt: int, now: int) -> tuple[float, bool]:
        c = self.scenario.provider(provider).conditions(now, ctx.region)
        return c.success_prob * (1.0 - c.reject_fraction), c.failure_mode is not FailureMode.SILENT

    def respond(self, provider: str, ctx: RequestContext, attempt: int, now: int, deadline_ms: int) -> SimResponse:
        m = self.scenario.provider(provider)
        c = m.conditions(now, ctx.region)
        rejected = self._draw(provider, "reject", c.reject_fraction)
        success = self._draw(provider, "success", c.success_prob)
        latency = self._latency(provider, m.latency.ms, m.latency.kind, m.latency.sigma, c.latency_multiplier)
        if rejected:
            return SimResponse(
                ProviderResponse(latency, TransportOutcome(TransportKind.RATE_LIMITED, 429, "throttled")), False
            )
        delayed = m.completion_delay_ms > 0
        ok = TransportOutcome(TransportKind.SUCCESS, 200)
        if success:
            if delayed:
                resp = ProviderResponse(latency, ok, BusinessOutcome(BusinessKind.ACCEPTED), m.cost_per_attempt)
                return SimResponse(resp, True, m.completion_delay_ms)
            return SimResponse(ProviderResponse(latency, ok, BusinessOutcome(BusinessKind.DELIVERED), m.cost_per_attempt), True)
        if c.failure_mode is FailureMode.SILENT:
            kind = BusinessKind.ACCEPTED if delayed else BusinessKind.FAILED
            return SimResponse(ProviderResponse(latency, ok, BusinessOutcome(kind), m.cost_per_attempt), False)
        if c.failure_mode is FailureMode.TIMEOUT:
            return SimResponse(
                ProviderResponse(deadline_ms + 1, TransportOutcome(TransportKind.TIMEOUT), cost=m.cost_per_attempt), False
            )
        return SimResponse(
            ProviderResponse(latency, TransportOutcome(TransportKind.SERVER_ERROR, 503, "unavailable"), cost=m.cost_per_attempt),
            False,
        )


# --------------------------------------------------------------------------
# Report
# --------------------------------------------------------------------------


def flap_count(switches: Sequence[SwitchRecord]) -> int:
    """Switches that undo the previous switch in the same scope (A->B then B->A)."""
    flaps = 0
    last: dict[tuple[str, str], SwitchRecord] = {}
    for s in switches:
        key = (s.operation, s.scope)
        prev = last.get(key)
        if prev is not None and prev.from_provider == s.to_provider and prev.to_provider == s.from_provider:
            flaps += 1
        last[key] = s
    return flaps


@dataclass
class ProviderCounts:
    attempts: int = 0
    attempt_successes: int = 0
    attempt_failures: int = 0
    workflow_successes: int = 0

    def to_dict(self) -> dict[str, int]:
        return {
            "attempts": self.attempts,
            "attempt_successes": self.attempt_successes,
            "attempt_failures": self.attempt_failures,
            "workflow_successes": self.workflow_successes,
        }


@dataclass
class SimReport:
    name: str
    mode: SimMode
    seed: int
    duration_ms: int
    requests: int
    succeeded: float
    failed_request_count: float
    shed_count: int
    fallback_by_kind: dict[str, int]
    per_provider: dict[str, ProviderCounts]
    completion_series: list[dict[str, Any]]
    switch_timeline: list[SwitchRecord]
    observed_failover_delay_ms: int | None
    failover_bound_ms: float | None
    bound_ok: bool
    flap_count: int
    cost_total: float
    circuit_transitions: list[CircuitTransition]
    trace_count: int
    complete_traces: int
    trace_violations: list[str]
    analytical: dict[str, Any] | None
    notes: list[str]
    config_versions: list[str]
    traces: list[DecisionTrace] = field(default_factory=list, repr=False)
    log: EventLog | None = field(default=None, repr=False)
    primary: str = ""
    sustained_windows: int = 1
    hysteresis_delta: float = 0.0
    cooldown_ms: int = 0

    @property
    def total_attempts(self) -> int:
        return sum(c.attempts for c in self.per_provider.values())

    @property
    def completion_rate(self) -> float:
        return self.succeeded / self.requests if self.requests else 0.0

    @property
    def cost_per_success(self) -> float | None:
        return self.cost_total / self.succeeded if self.succeeded > 0 else None

    @property
    def trace_completeness(self) -> float:
        return self.complete_traces / self.trace_count if self.trace_count else 1.0

    def to_dict(self) -> dict[str, Any]:
        cps = self.cost_per_success
        return {
            "scenario": self.name,
            "mode": self.mode.value,
            "seed": self.seed,
            "duration_ms": self.duration_ms,
            "requests": self.requests,
            "succeeded": round(self.succeeded, 6),
            "failed_request_count": round(self.failed_request_count, 6),
            "completion_rate": round(self.completion_rate, 6),
            "shed_count": self.shed_count,
            "fallback_by_kind": dict(sorted(self.fallback_by_kind.items())),
            "total_attempts": self.total_attempts,
            "per_provider": {p: c.to_dict() for p, c in sorted(self.per_provider.items())},
            "switch_count": len(self.switch_timeline),
            "flap_count": self.flap_count,
            "observed_failover_delay_ms": self.observed_failover_delay_ms,
            "failover_bound_ms": self.failover_bound_ms,
            "bound_ok": self.bound_ok,
            "cost_total": round(self.cost_total, 6),
            "cost_per_success": None if cps is None else round(cps, 9),
            "trace_count": self.trace_count,
            "trace_completeness": round(self.trace_completeness, 6),
            "trace_violations": self.trace_violations[:20],
            "analytical": self.analytical,
            "config_versions": self.config_versions,
            "notes": self.notes,
            "switch_timeline": [s.to_dict() for s in self.switch_timeline],
            "circuit_transitions": [t.to_dict() for t in self.circuit_transitions],
            "completion_series": self.completion_series,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def series_csv(self) -> str:
        lines = ["bucket_start_ms,requests,completed,completion_rate"]
        for row in self.completion_series:
            lines.append(f"{row['bucket_start_ms']},{row['requests']},{row['completed']},{row['completion_rate']}")
        return "\n".join(lines) + "\n"

    def traces_jsonl(self) -> str:
        return "".join(t.to_json() + "\n" for t in self.traces)


# --------------------------------------------------------------------------
# Engine
# --------------------------------------------------------------------------


@dataclass
class _Request:
    ctx: RequestContext
    failed: list[str] = field(default_factory=list)
    last_outcome: RouteOutcome | None = None
    failure_mass: float = 1.0
    terminal: str | None = None


@dataclass(frozen=True)
class RunSettings:
    """Everything about a run that is not the factor list or the arrival stream."""

    name: str
    mode: SimMode
    seed: int
    duration_ms: int
    telemetry_impairment: TelemetryImpairment | None = None
    config_impairment: ConfigImpairment | None = None
    operator_actions: tuple[OperatorAction, ...] = ()
    failover_terms: FailoverTerms | None = None
    fault_start_ms: int | None = None
    keep_traces: bool = True


class Simulation:
    """One run of the closed loop.

    Args:
        factor_list: Initial routing policy, installed at time 0.
        arrivals: Request contexts sorted by timestamp.
        source: Produces a provider response for each admitted attempt.
        settings: Mode, seed, impairments and operator actions.
    """

    def __init__(
        self,
        factor_list: FactorList,
        arrivals: Sequence[RequestContext],
        source: ResponseSource,
        settings: RunSettings,
    ) -> None:
        self.fl = factor_list
        self.arrivals = arrivals
        self.source = source
        self.settings = settings
        control = factor_list.control
        ci = settings.config_impairment
        self.store = ConfigStore() if ci is None or ci.stale_bound_ms is None else ConfigStore(ci.stale_bound_ms)
        self.store.put(factor_list)
        self.incidents = IncidentLog(control.incident_tau_ms)
        self.protection = Protection(listener=self._on_transition)
        self.log = EventLog(control.completion_link_timeout_ms)
        wc = WindowConfig(control.window_ms, control.bucket_ms, control.completion_link_timeout_ms)
        self.aggregator = WindowAggregator(wc, exact=True, incidents=self.incidents, log=self.log)
        self.snapshots = SnapshotCache()
        self.traces: list[DecisionTrace] = []
        self.router = Router(self.store, self.snapshots, self.protection, trace_sink=self._on_trace)
        self._heap: list[tuple[int, int, int, str, Any]] = []
        self._seq = itertools.count()
        self._requests: list[_Request] = []
        self._providers_by_version: dict[str, tuple[str, ...]] = {factor_list.version: factor_list.provider_ids}
        self._trace_count = 0
        self._complete = 0
        self._violations: list[str] = []
        self._notes: list[str] = []
        self._counts: dict[str, ProviderCounts] = {p: ProviderCounts() for p in factor_list.provider_ids}
        self._fallbacks: Counter[str] = Counter()

    # -- plumbing ---------------------------------------------------------

    def _push(self, t: int, prio: int, kind: str, payload: Any) -> None:
        heapq.heappush(self._heap, (t, prio, next(self._seq), kind, payload))

    def _on_transition(self, t: CircuitTransition) -> None:
        if t.from_state is CircuitState.CLOSED and t.to_state is CircuitState.OPEN:
            self.incidents.record(IncidentMarker(t.ts, t.key.operation, t.key.provider, t.key.scope, "circuit"))

    def _on_trace(self, trace: DecisionTrace) -> None:
        self._trace_count += 1
        ids = self._providers_by_version.get(trace.factor_list_version, ())
        problems = trace_violations(trace, ids)
        if problems:
            self._violations.extend(f"{trace.trace_id}: {p}" for p in problems)
        else:
            self._complete += 1
        if self.settings.keep_traces:
            self.traces.append(trace)

    # -- event handlers ---------------------------------------------------

    def _refresh(self, t: int) -> None:
        imp = self.settings.telemetry_impairment
        as_of = t
        if imp is not None:
            if imp.frozen_from_ms is not None and t >= imp.frozen_from_ms:
                return
            as_of = t - imp.lag_ms
            if as_of < 0:
                return
        self.snapshots.refresh(self.fl.operation, self.aggregator, as_of)

    def _operator(self, t: int, action: OperatorAction) -> None:
        current = self.store.get(self.fl.operation, t)
        providers = tuple(replace(p, enabled=action.enabled) if p.id == action.provider else p for p in current.providers)
        patched = replace(current, providers=providers, version="")
        patched = replace(patched, version=compute_version(patched))
        try:
            self.store.put(patched)
        except ConfigStoreUnavailable:
            self._notes.append(f"operator action at {t} ms rejected: config store unavailable")
            return
        self._providers_by_version[patched.version] = patched.provider_ids
        logger.info("operator set %s enabled=%s at %d", action.provider, action.enabled, t)

    def _expected_failure_mass(self, req: _Request, outcome: RouteOutcome, t: int) -> float:
        """Probability that the request fails, following the retry chain the router would take."""
        if outcome.selected is None or outcome.factor_list is None:
            return 1.0
        control = outcome.factor_list.control
        retries_possible = control.idempotent and control.retry_policy not in (RetryPolicy.NONE, RetryPolicy.HEDGED)
        provider: str | None = outcome.selected
        tried: list[str] = []
        mass = 1.0
        attempt = 0
        while provider is not None:
            p, visible = self.source.success_prob(provider, req.ctx, attempt, t)
            mass *= 1.0 - p
            attempt += 1
            if not (retries_possible and visible) or attempt > control.max_attempts:
                break
            if control.retry_policy is RetryPolicy.SAME_PROVIDER:
                continue
            tried.append(provider)
            provider = self.router.route(req.ctx, t, attempt=attempt, exclude=tried, commit=False).selected
        return mass

    def _start(self, req: _Request, t: int, attempt: int) -> None:
        outcome = self.router.route(req.ctx, t, attempt=attempt, exclude=req.failed)
        if attempt == 0 and self.settings.mode is SimMode.EXPECTATION:
            req.failure_mass = self._expected_failure_mass(req, outcome, t)
        self._admit(req, outcome, t)

    def _admit(self, req: _Request, outcome: RouteOutcome, t: int) -> None:
        req.last_outcome = outcome
        if outcome.selected is None:
            kind = outcome.fallback.value if outcome.fallback else "typed_error"
            self._fallbacks[kind] += 1
            req.terminal = "shed"
            return
        admitted = begin_attempt(outcome, req.ctx, self.protection, t)
        if not isinstance(admitted, PendingAttempt):
            assert outcome.factor_list is not None
            result = rejected_result(admitted, outcome.factor_list, self.protection, self.log)
            self._after(req, result, None)
            return
        assert outcome.factor_list is not None
        deadline = outcome.factor_list.control.deadline_for(req.ctx.traffic_class)
        sim = self.source.respond(admitted.provider, req.ctx, admitted.attempt, t, deadline)
        end = t + min(sim.response.latency_ms, deadline)
        self._push(end, _PRIO_COMPLETE, "complete", (req, admitted, sim))

    def _complete_attempt(self, req: _Request, pending: PendingAttempt, sim: SimResponse) -> None:
        result = finish_attempt(pending, sim.response, self.protection, self.log)
        if sim.link_delay_ms is not None and sim.workflow_success and not result.event.timeout:
            self._push(
                result.event.end_time + sim.link_delay_ms, _PRIO_LINK, "link", (req.ctx.request_id, pending.attempt)
            )
        self._after(req, result, sim)

    def _after(self, req: _Request, result: AttemptResult, sim: SimResponse | None) -> None:
        ev = result.event
        counts = self._counts.setdefault(ev.provider, ProviderCounts())
        counts.attempts += 1
        if result.outcome.is_success:
            counts.attempt_successes += 1
        else:
            counts.attempt_failures += 1
        workflow_ok = sim is not None and sim.workflow_success and not ev.timeout
        if workflow_ok:
            counts.workflow_successes += 1
        if result.retry is RetryDecision.STOP:
            req.terminal = "success" if workflow_ok else "failure"
            return
        attempt = ev.retry_count + 1
        t = ev.end_time
        if result.retry is RetryDecision.RETRY_SAME and req.last_outcome is not None:
            prev = req.last_outcome
            trace = replace(prev.trace, trace_id=f"{req.ctx.request_id}:{attempt}", attempt=attempt, timestamp=t)
            self._on_trace(trace)
            self._admit(req, RouteOutcome(trace, prev.factor_list), t)
            return
        req.failed.append(ev.provider)
        self._start(req, t, attempt)

    def _link(self, t: int, request_id: str) -> None:
        self.log.link_completion(request_id, BusinessOutcome(BusinessKind.DELIVERED), t)

    # -- main loop --------------------------------------------------------

    def run(self) -> SimReport:
        s = self.settings
        control = self.fl.control
        for a in s.operator_actions:
            self._push(a.at_ms, _PRIO_CONTROL, "operator", a)
        ci = s.config_impairment
        if ci is not None:
            self._push(ci.unavailable_from_ms, _PRIO_CONTROL, "config_down", None)
            if ci.unavailable_until_ms is not None:
                self._push(ci.unavailable_until_ms, _PRIO_CONTROL, "config_up", None)
        self._push(0, _PRIO_REFRESH, "refresh", None)
        arrivals = iter(self.arrivals)
        first = next(arrivals, None)
        if first is not None:
            self._push(first.timestamp, _PRIO_ARRIVAL, "arrival", first)
        while self._heap:
            t, _, _, kind, payload = heapq.heappop(self._heap)
            if kind == "arrival":
                req = _Request(payload)
                self._requests.append(req)
                self._start(req, t, 0)
                nxt = next(arrivals, None)
                if nxt is not None:
                    self._push(nxt.timestamp, _PRIO_ARRIVAL, "arrival", nxt)
            elif kind == "complete":
                self._complete_attempt(*payload)
            elif kind == "link":
                self._link(t, payload[0])
            elif kind == "refresh":
                self._refresh(t)
                nxt_t = t + control.metric_refresh_interval_ms
                if nxt_t <= s.duration_ms:
                    self._push(nxt_t, _PRIO_REFRESH, "refresh", None)
            elif kind == "operator":
                self._operator(t, payload)
            elif kind == "config_down":
                self.store.mark_unavailable(t)
            elif kind == "config_up":
                self.store.mark_available()
        return self._report()

    def _report(self) -> SimReport:
        s = self.settings
        expectation = s.mode is SimMode.EXPECTATION
        series: dict[int, list[float]] = {}
        misses: list[float] = []
        shed = 0
        for req in self._requests:
            if req.terminal is None:
                raise RuntimeError(f"request {req.ctx.request_id} has no terminal outcome")
            if req.terminal == "shed":
                shed += 1
            if expectation and req.terminal != "shed":
                miss = req.failure_mass
            else:
                miss = 0.0 if req.terminal == "success" else 1.0
            misses.append(miss)
            row = series.setdefault(req.ctx.timestamp // SERIES_BUCKET_MS * SERIES_BUCKET_MS, [0, 0.0])
            row[0] += 1
            row[1] += 1.0 - miss
        failed = math.fsum(misses)
        n = len(self._requests)
        switches = list(self.router.sticky.switches)
        observed = self._observed_delay(switches)
        bound = None
        bound_ok = True
        if s.failover_terms is not None:
            ft = s.failover_terms
            bound = failover_latency_bound(ft.detect_ms, ft.publish_ms, ft.aggregate_ms, ft.refresh_ms, ft.decision_ms)
            if s.fault_start_ms is not None:
                bound_ok = observed is not None and observed <= bound
        cost = math.fsum(e.cost for e in self.log.events)
        return SimReport(
            name=s.name,
            mode=s.mode,
            seed=s.seed,
            duration_ms=s.duration_ms,
            requests=n,
            succeeded=n - failed,
            failed_request_count=failed,
            shed_count=shed,
            fallback_by_kind=dict(self._fallbacks),
            per_provider=self._counts,
            completion_series=[
                {
                    "bucket_start_ms": b,
                    "requests": int(v[0]),
                    "completed": round(v[1], 6),
                    "completion_rate": round(v[1] / v[0], 6) if v[0] else None,
                }
                for b, v in sorted(series.items())
            ],
            switch_timeline=switches,
            observed_failover_delay_ms=observed,
            failover_bound_ms=bound,
            bound_ok=bound_ok,
            flap_count=flap_count(switches),
            cost_total=cost,
            circuit_transitions=list(self.protection.transitions),
            trace_count=self._trace_count,
            complete_traces=self._complete,
            trace_violations=list(self._violations),
            analytical=None,
            notes=list(self._notes),
            config_versions=self.store.versions(self.fl.operation),
            traces=self.traces,
            log=self.log,
            primary=self.fl.control.default_provider,
            sustained_windows=self.fl.control.sustained_windows_for(
                self.arrivals[0].traffic_class if self.arrivals else TrafficClass.INTERACTIVE
            ),
            hysteresis_delta=self.fl.control.hysteresis_delta,
            cooldown_ms=self.fl.control.cooldown_ms,
        )

    def _observed_delay(self, switches: Iterable[SwitchRecord]) -> int | None:
        start = self.settings.fault_start_ms
        if start is None:
            return None
        primary = self.fl.control.default_provider
        for sw in switches:
            if sw.ts >= start and sw.from_provider == primary:
                return sw.ts - start
        return None


# --------------------------------------------------------------------------
# Scenario entry point
# --------------------------------------------------------------------------


def generate_arrivals(scenario: Scenario, seed: int) -> list[RequestContext]:
    """Arrival contexts for ``scenario``; deterministic for a given seed."""
    gap = 60_000.0 / scenario.arrival_rate_per_min
    regions = list(scenario.regions.items())
    region_rng = random.Random(derive_seed(seed, "regions"))
    arrival_rng = random.Random(derive_seed(seed, "arrivals"))
    op = scenario.factor_list.operation
    out: list[RequestContext] = []
    i = 0
    clock = 0.0
    while True:
        if scenario.arrival_process is ArrivalProcess.DETERMINISTIC_UNIFORM:
            t = int(math.floor(i * gap))
        else:
            # Inverse-CDF exponential inter-arrival gap.
            clock += -math.log(1.0 - arrival_rng.random()) * gap
            t = int(math.floor(clock))
        if t >= scenario.duration_ms:
            break
        if len(regions) == 1:
            region = regions[0][0]
        else:
            u = region_rng.random()
            acc = 0.0
            region = regions[-1][0]
            for name, w in regions:
                acc += w
                if u < acc:
                    region = name
                    break
        out.append(
            RequestContext(
                request_id=f"{scenario.name}-{i:07d}",
                operation=op,
                region=region,
                timestamp=t,
                traffic_class=scenario.traffic_class,
            )
        )
        i += 1
    return out


def run_scenario(
    scenario: Scenario,
    mode: SimMode | str | None = None,
    seed: int | None = None,
    keep_traces: bool = True,
) -> SimReport:
    """Simulate ``scenario`` and return its report.

    ``mode`` and ``seed`` default to the scenario's own values.
    """
    mode = SimMode(mode) if mode is not None else scenario.mode
    seed = scenario.seed if seed is None else seed
    starts = scenario.provider(scenario.primary).fault_starts()
    settings = RunSettings(
        name=scenario.label,
        mode=mode,
        seed=seed,
        duration_ms=scenario.duration_ms,
        telemetry_impairment=scenario.telemetry_impairment,
        config_impairment=scenario.config_impairment,
        operator_actions=scenario.operator_actions,
        failover_terms=scenario.failover_terms,
        fault_start_ms=min(starts) if starts else None,
        keep_traces=keep_traces,
    )
    arrivals = generate_arrivals(scenario, seed)
    sim = Simulation(scenario.factor_list, arrivals, ModelSource(scenario, mode, seed), settings)
    report = sim.run()
    if scenario.analytical is not None:
        report.analytical = analytical_row(scenario, report)
    return report


def analytical_row(scenario: Scenario, report: SimReport) -> dict[str, Any]:
    a = scenario.analytical
    assert a is not None
    expected = expected_failures(a.lambda_per_min, a.duration_min, a.switch_min, a.p_f, a.p_s)
    row: dict[str, Any] = {
        "switch_min": a.switch_min,
        "expected_failures": round(expected, 6),
        "simulated_failures": round(report.failed_request_count, 6),
        "relative_error": round(abs(report.failed_request_count - expected) / expected, 9) if expected else None,
        "published": a.published,
    }
    if a.published is not None and a.published != int(round(expected)):
        row["note"] = f"published value {a.published} differs from the closed form {int(round(expected))}"
    return row


def run_many(scenario: Scenario, seeds: Iterable[int], mode: SimMode | str = SimMode.SAMPLED) -> list[SimReport]:
    return [run_scenario(scenario, mode, seed, keep_traces=False) for seed in seeds]


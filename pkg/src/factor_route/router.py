"""Per-request provider selection: gates, normalization, weighted scoring, hysteresis.

``Router.route`` follows a fixed order: resolve the effective factor list,
read the metric snapshot, evaluate every gate for every provider, score the
eligible ones, then pick the argmax subject to hysteresis and tie-breaking.
Each decision yields a complete :class:`DecisionTrace`, including fallbacks.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from typing import Any

from factor_route.config import (
    ConfigError,
    ConfigStale,
    ConfigStore,
    FactorList,
    FactorName,
    FallbackKind,
    GateKind,
    GateSpec,
    Orientation,
    ScoreFactorSpec,
    StalePolicy,
    TieBreak,
    apply_overrides,
)
from factor_route.domain import (
    AttemptEvent,
    BusinessOutcome,
    CircuitState,
    OutcomeClass,
    RequestContext,
    TransportKind,
    TransportOutcome,
    classify_outcome,
)
from factor_route.hashing import unit_interval
from factor_route.protection import (
    BulkheadPermit,
    CircuitDecision,
    Protection,
    RetryDecision,
    retry_decision,
)
from factor_route.telemetry import EventLog, MetricSnapshot, SnapshotCache, SnapshotView

logger = logging.getLogger(__name__)

TIE_EPSILON = 1e-9
RETRY_EXCLUSION_GATE = "retry_exclusion"
CONFIG_GATE = "config_available"


# --------------------------------------------------------------------------
# Trace types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GateResult:
    provider: str
    gate: str
    passed: bool
    reason: str = "ok"

    def __post_init__(self) -> None:
        if not self.passed and not self.reason:
            raise ValueError("a failed gate needs a reason")

    def to_dict(self) -> dict[str, Any]:
        return {"provider": self.provider, "gate": self.gate, "passed": self.passed, "reason": self.reason}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> GateResult:
        return cls(d["provider"], d["gate"], bool(d["passed"]), d["reason"])


@dataclass(frozen=True)
class FactorContribution:
    factor: str
    raw: float | None
    normalized: float
    weight: float
    used_default: bool

    @property
    def weighted(self) -> float:
        return self.weight * self.normalized

    def to_dict(self) -> dict[str, Any]:
        return {
            "factor": self.factor,
            "raw": self.raw,
            "normalized": self.normalized,
            "weight": self.weight,
            "used_default": self.used_default,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> FactorContribution:
        return cls(d["factor"], d["raw"], d["normalized"], d["weight"], d["used_default"])


@dataclass(frozen=True)
class ScoredCandidate:
    provider: str
    per_factor: tuple[FactorContribution, ...]
    total: float
    probe: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "provider": self.provider,
            "per_factor": [c.to_dict() for c in self.per_factor],
            "total": self.total,
            "probe": self.probe,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ScoredCandidate:
        return cls(
            d["provider"],
            tuple(FactorContribution.from_dict(c) for c in d["per_factor"]),
            d["total"],
            bool(d.get("probe", False)),
        )


@dataclass(frozen=True)
class DecisionTrace:
    trace_id: str
    request_id: str
    operation: str
    factor_list_version: str
    snapshot_id: str
    snapshot_ts: int | None
    snapshot_stale: bool
    gate_results: tuple[GateResult, ...]
    candidates: tuple[ScoredCandidate, ...]
    previous_choice: str | None
    hysteresis_applied: bool
    tie_break_applied: str | None
    selected: str | None
    fallback: FallbackKind | None
    timestamp: int
    attempt: int = 0
    probe: bool = False
    stale_policy_applied: str | None = None
    fallback_reason: str | None = None
    applied_overrides: tuple[int, ...] = ()
    context: RequestContext | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "trace_id": self.trace_id,
            "request_id": self.request_id,
            "operation": self.operation,
            "factor_list_version": self.factor_list_version,
            "snapshot_id": self.snapshot_id,
            "snapshot_ts": self.snapshot_ts,
            "snapshot_stale": self.snapshot_stale,
            "gate_results": [g.to_dict() for g in self.gate_results],
            "candidates": [c.to_dict() for c in self.candidates],
            "previous_choice": self.previous_choice,
            "hysteresis_applied": self.hysteresis_applied,
            "tie_break_applied": self.tie_break_applied,
            "selected": self.selected,
            "fallback": self.fallback.value if self.fallback else None,
            "fallback_reason": self.fallback_reason,
            "timestamp": self.timestamp,
            "attempt": self.attempt,
            "probe": self.probe,
            "stale_policy_applied": self.stale_policy_applied,
            "applied_overrides": list(self.applied_overrides),
            "context": self.context.to_dict() if self.context else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"), ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> DecisionTrace:
        return cls(
            trace_id=d["trace_id"],
            request_id=d["request_id"],
            operation=d["operation"],
            factor_list_version=d["factor_list_version"],
            snapshot_id=d["snapshot_id"],
            snapshot_ts=d["snapshot_ts"],
            snapshot_stale=d["snapshot_stale"],
            gate_results=tuple(GateResult.from_dict(g) for g in d["gate_results"]),
            candidates=tuple(ScoredCandidate.from_dict(c) for c in d["candidates"]),
            previous_choice=d["previous_choice"],
            hysteresis_applied=d["hysteresis_applied"],
            tie_break_applied=d["tie_break_applied"],
            selected=d["selected"],
            fallback=FallbackKind(d["fallback"]) if d["fallback"] else None,
            fallback_reason=d.get("fallback_reason"),
            timestamp=d["timestamp"],
            attempt=d.get("attempt", 0),
            probe=d.get("probe", False),
            stale_policy_applied=d.get("stale_policy_applied"),
            applied_overrides=tuple(d.get("applied_overrides", ())),
            context=RequestContext.from_dict(d["context"]) if d.get("context") else None,
        )

    @classmethod
    def from_json(cls, line: str) -> DecisionTrace:
        return cls.from_dict(json.loads(line))


def trace_violations(trace: DecisionTrace, provider_ids: Iterable[str]) -> list[str]:
    """Check the structural invariants every emitted trace must satisfy."""
    v: list[str] = []
    if (trace.selected is None) == (trace.fallback is None):
        v.append("exactly one of selected and fallback must be set")
    seen = {g.provider for g in trace.gate_results}
    missing = sorted(set(provider_ids) - seen)
    if missing:
        v.append(f"providers missing from gate results: {missing}")
    for g in trace.gate_results:
        if not g.passed and not g.reason:
            v.append(f"gate {g.gate} for {g.provider} failed without a reason")
    for c in trace.candidates:
        total = sum(f.weight * f.normalized for f in c.per_factor)
        if abs(total - c.total) > 1e-9:
            v.append(f"candidate {c.provider}: total {c.total} != weighted sum {total}")
        if any(not 0.0 <= f.normalized <= 1.0 for f in c.per_factor):
            v.append(f"candidate {c.provider}: normalized value outside [0, 1]")
    if trace.selected is not None:
        failed = {g.provider for g in trace.gate_results if not g.passed}
        if trace.selected in failed:
            v.append(f"selected provider {trace.selected} failed a gate")
    return v


@dataclass(frozen=True)
class RouteOutcome:
    trace: DecisionTrace
    factor_list: FactorList | None = None

    @property
    def selected(self) -> str | None:
        return self.trace.selected

    @property
    def fallback(self) -> FallbackKind | None:
        return self.trace.fallback


# --------------------------------------------------------------------------
# Sticky state
# --------------------------------------------------------------------------


@dataclass
class StickyEntry:
    incumbent: str | None = None
    last_switch_ts: int | None = None
    challenger: str | None = None
    challenger_streak: int = 0
    last_window: str | None = None


@dataclass(frozen=True)
class SwitchRecord:
    ts: int
    operation: str
    scope: str
    from_provider: str | None
    to_provider: str
    trace_id: str
    reason: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "ts": self.ts,
            "operation": self.operation,
            "scope": self.scope,
            "from": self.from_provider,
            "to": self.to_provider,
            "trace_id": self.trace_id,
            "reason": self.reason,
        }


class StickyState:
    """Incumbent tracking per (operation, scope) plus per-user and LRU memory."""

    def __init__(self) -> None:
        self.entries: dict[tuple[str, str], StickyEntry] = {}
        self.user_choice: dict[tuple[str, str], str] = {}
        self.last_selected: dict[tuple[str, str, str], int] = {}
        self.switches: list[SwitchRecord] = []
        self._lock = threading.Lock()

    def entry(self, operation: str, scope: str) -> StickyEntry:
        with self._lock:
            e = self.entries.get((operation, scope))
            return replace(e) if e is not None else StickyEntry()

    def commit(
        self,
        operation: str,
        scope: str,
        entry: StickyEntry,
        ctx: RequestContext,
        selected: str,
        now: int,
        switch: SwitchRecord | None,
    ) -> None:
        with self._lock:
            self.entries[(operation, scope)] = entry
            if ctx.user_key is not None:
                self.user_choice[(operation, ctx.user_key)] = selected
            self.last_selected[(operation, scope, selected)] = now
            if switch is not None:
                self.switches.append(switch)


# --------------------------------------------------------------------------
# Pure decision steps
# --------------------------------------------------------------------------


def normalize(factor: ScoreFactorSpec, raw: float | None) -> float:
    """Map a raw metric onto [0, 1]; absent metrics take the factor's default."""
    if raw is None:
        return factor.default_value
    if factor.orientation is Orientation.HIGHER_IS_BETTER:
        return min(max(raw, 0.0), 1.0)
    lo, hi = factor.lower_bound, factor.upper_bound
    assert lo is not None and hi is not None
    clamped = min(max(raw, lo), hi)
    return 1.0 - (clamped - lo) / (hi - lo)


def raw_metric(factor: FactorName, snap: MetricSnapshot | None, static_cost: float) -> float | None:
    if factor is FactorName.COST:
        if snap is not None and snap.mean_cost is not None:
            return snap.mean_cost
        return static_cost
    if snap is None:
        return None
    if factor is FactorName.COMPLETION_RATE:
        return snap.completion_rate
    if factor is FactorName.LATENCY_P95:
        return snap.latency_p95_ms
    if factor is FactorName.LATENCY_P99:
        return snap.latency_p99_ms
    return snap.incident_penalty


def score(
    fl: FactorList, provider: str, snapshots: Mapping[str, MetricSnapshot], probe: bool = False
) -> ScoredCandidate:
    spec = fl.provider(provider)
    snap = snapshots.get(provider)
    parts = []
    for f in fl.scores:
        raw = raw_metric(f.name, snap, spec.static_cost)
        parts.append(FactorContribution(f.name.value, raw, normalize(f, raw), f.weight, raw is None))
    total = math.fsum(p.weight * p.normalized for p in parts)
    return ScoredCandidate(provider, tuple(parts), total, probe)


@dataclass(frozen=True)
class GateInputs:
    """Everything gate evaluation may read, gathered so the check stays side-effect free."""

    circuit: CircuitDecision = CircuitDecision.ALLOW_NORMAL
    quota_available: bool = True
    rate_available: bool = True
    throttled: bool = False


def _compliance_denied(params: Mapping[str, Any], provider: str, ctx: RequestContext) -> bool:
    for rule in params.get("deny") or []:
        if rule.get("provider") != provider:
            continue
        region_hit = "region" not in rule or rule["region"] == ctx.region
        # Unknown tenant counts as a match: compliance fails closed.
        tenant_hit = "tenant" not in rule or ctx.tenant is None or rule["tenant"] == ctx.tenant
        if region_hit and tenant_hit:
            return True
    return False


def _maintenance_active(params: Mapping[str, Any], provider: str, now: int) -> bool:
    return any(
        w.get("provider") == provider and int(w["start_ms"]) <= now < int(w["end_ms"])
        for w in params.get("windows") or []
    )


def evaluate_gate(
    gate: GateSpec,
    fl: FactorList,
    provider: str,
    ctx: RequestContext,
    snap: MetricSnapshot | None,
    inputs: GateInputs,
    now: int,
) -> GateResult:
    spec = fl.provider(provider)
    name = gate.name
    g = name.value
    if name is GateKind.CIRCUIT_CLOSED:
        if inputs.circuit is CircuitDecision.DENY:
            return GateResult(provider, g, False, "circuit open")
        return GateResult(provider, g, True, "probe allowed" if inputs.circuit is CircuitDecision.ALLOW_PROBE else "ok")
    if name is GateKind.REGION_SUPPORTED:
        if spec.supports(ctx.region):
            return GateResult(provider, g, True)
        return GateResult(provider, g, False, f"region {ctx.region} not supported")
    if name is GateKind.QUOTA_AVAILABLE:
        if inputs.throttled:
            return GateResult(provider, g, False, "throttled by provider")
        if not inputs.quota_available:
            return GateResult(provider, g, False, "quota exhausted")
        if not inputs.rate_available:
            return GateResult(provider, g, False, "rate limit reached")
        return GateResult(provider, g, True)
    if name is GateKind.PROVIDER_ENABLED:
        return GateResult(provider, g, True) if spec.enabled else GateResult(provider, g, False, "provider disabled")
    if name is GateKind.COMPLIANCE_ALLOWED:
        if _compliance_denied(gate.params, provider, ctx):
            return GateResult(provider, g, False, "compliance policy denies tenant/region")
        return GateResult(provider, g, True)
    if name is GateKind.MAINTENANCE_INACTIVE:
        if _maintenance_active(gate.params, provider, now):
            return GateResult(provider, g, False, "maintenance window active")
        return GateResult(provider, g, True)
    # min_samples_met: providers with no data in the window are exempt (cold start).
    need = int(gate.params.get("min_samples", fl.control.min_sample_count))
    if snap is None or snap.sample_count == 0:
        return GateResult(provider, g, True, "cold start")
    if snap.sample_count >= need:
        return GateResult(provider, g, True)
    return GateResult(provider, g, False, f"only {snap.sample_count} of {need} samples")


def evaluate_gates(
    fl: FactorList,
    provider: str,
    ctx: RequestContext,
    snapshots: Mapping[str, MetricSnapshot],
    inputs: GateInputs,
    now: int,
) -> list[GateResult]:
    """Evaluate every configured gate in declared order, without short-circuiting."""
    snap = snapshots.get(provider)
    return [evaluate_gate(g, fl, provider, ctx, snap, inputs, now) for g in fl.gates]


def tie_break(
    tied: Sequence[ScoredCandidate],
    ctx: RequestContext,
    rule: TieBreak,
    fl: FactorList,
    sticky_user: str | None = None,
    last_selected: Mapping[str, int] | None = None,
    tie_window_ms: int = 60_000,
) -> str:
    """Pick one provider among candidates whose totals are within the tie epsilon."""
    names = sorted(c.provider for c in tied)
    if rule is TieBreak.STICKY_THEN_LEXICOGRAPHIC:
        if sticky_user in names:
            return sticky_user  # type: ignore[return-value]
        return names[0]
    if rule is TieBreak.PRIORITY_ORDER:
        return min(names, key=lambda p: (fl.provider(p).priority, p))
    if rule is TieBreak.LRU:
        seen = last_selected or {}
        return min(names, key=lambda p: (seen.get(p, -1), p))
    by_name = {c.provider: c for c in tied}
    weights = [max(by_name[p].total, 0.0) for p in names]
    total = math.fsum(weights)
    if total <= 0:
        weights, total = [1.0] * len(names), float(len(names))
    u = unit_interval(ctx.stickiness_key, ctx.timestamp // tie_window_ms, ctx.operation) * total
    acc = 0.0
    for p, w in zip(names, weights):
        acc += w
        if u < acc:
            return p
    return names[-1]


@dataclass(frozen=True)
class HysteresisResult:
    selected: str
    applied: bool
    switched: bool
    forced: bool
    entry: StickyEntry


def apply_hysteresis(
    best: ScoredCandidate,
    candidates: Sequence[ScoredCandidate],
    entry: StickyEntry,
    delta: float,
    cooldown_ms: int,
    sustained_windows: int,
    now: int,
    window_id: str = "",
) -> HysteresisResult:
    """Decide between the argmax ``best`` and the incumbent recorded in ``entry``.

    The challenger streak counts distinct metric windows (``window_id``) in
    which the challenger beat the incumbent by more than ``delta``; repeated
    decisions inside one window do not add to it.
    """
    new = replace(entry)
    by_name = {c.provider: c for c in candidates}
    incumbent = by_name.get(entry.incumbent) if entry.incumbent is not None else None

    def switch_to(provider: str, forced: bool) -> HysteresisResult:
        switched = entry.incumbent is not None and entry.incumbent != provider
        new.incumbent = provider
        if switched:
            new.last_switch_ts = now
        new.challenger, new.challenger_streak, new.last_window = None, 0, None
        return HysteresisResult(provider, False, switched, forced and switched, new)

    if incumbent is None:
        return switch_to(best.provider, forced=True)
    if best.provider == incumbent.provider:
        new.challenger, new.challenger_streak, new.last_window = None, 0, None
        return HysteresisResult(incumbent.provider, False, False, False, new)
    if not best.total > incumbent.total + delta:
        new.challenger, new.challenger_streak, new.last_window = None, 0, None
        return HysteresisResult(incumbent.provider, True, False, False, new)
    if new.challenger != best.provider:
        new.challenger, new.challenger_streak, new.last_window = best.provider, 1, window_id
    elif window_id != new.last_window:
        new.challenger_streak += 1
        new.last_window = window_id
    cooled = entry.last_switch_ts is None or now - entry.last_switch_ts >= cooldown_ms
    if cooled and new.challenger_streak >= sustained_windows:
        return switch_to(best.provider, forced=False)
    return HysteresisResult(incumbent.provider, True, False, False, new)


# --------------------------------------------------------------------------
# Router
# --------------------------------------------------------------------------


TraceSink = Callable[[DecisionTrace], None]


class Router:
    """Request-time selection over a config store, snapshot cache and protection state.

    Args:
        store: Source of factor lists.
        snapshots: Published metric snapshots.
        protection: Circuit breakers, quotas and rate limits consulted by gates.
        sticky: Incumbency memory; a fresh one is created if omitted.
        trace_sink: Receives every committed trace.
    """

    def __init__(
        self,
        store: ConfigStore,
        snapshots: SnapshotCache,
        protection: Protection | None = None,
        sticky: StickyState | None = None,
        trace_sink: TraceSink | None = None,
    ) -> None:
        self.store = store
        self.snapshots = snapshots
        self.protection = protection or Protection()
        self.sticky = sticky or StickyState()
        self.trace_sink = trace_sink
        self._last_config: dict[str, FactorList] = {}

    def _gate_inputs(self, fl: FactorList, provider: str, ctx: RequestContext, now: int) -> GateInputs:
        prot = self.protection
        decision = prot.breaker(fl.operation, provider, ctx.region, fl.control).peek(now)
        quota_ok = rate_ok = True
        throttled = False
        qgate = fl.gate(GateKind.QUOTA_AVAILABLE)
        if qgate is not None:
            q = prot.quota(provider, "global", (qgate.params.get("quotas") or {}).get(provider), now)
            quota_ok = q is None or q.check(now).value == "available"
            tb = prot.rate_limiter(provider, "global", (qgate.params.get("rate_limits") or {}).get(provider), now)
            rate_ok = tb is None or tb.available(now)
            throttled = prot.is_throttled(provider, "global", now)
        return GateInputs(decision, quota_ok, rate_ok, throttled)

    def _fallback_trace(
        self,
        ctx: RequestContext,
        now: int,
        attempt: int,
        reason: str,
        kind: FallbackKind = FallbackKind.TYPED_ERROR,
    ) -> DecisionTrace:
        known = self._last_config.get(ctx.operation)
        gates = tuple(
            GateResult(p, CONFIG_GATE, False, reason) for p in (known.provider_ids if known else ())
        )
        return DecisionTrace(
            trace_id=f"{ctx.request_id}:{attempt}",
            request_id=ctx.request_id,
            operation=ctx.operation,
            factor_list_version=known.version if known else "",
            snapshot_id="",
            snapshot_ts=None,
            snapshot_stale=True,
            gate_results=gates,
            candidates=(),
            previous_choice=None,
            hysteresis_applied=False,
            tie_break_applied=None,
            selected=None,
            fallback=kind,
            fallback_reason=reason,
            timestamp=now,
            attempt=attempt,
            context=ctx,
        )

    def route(
        self,
        ctx: RequestContext,
        now: int | None = None,
        attempt: int = 0,
        exclude: Iterable[str] = (),
        commit: bool = True,
    ) -> RouteOutcome:
        """Select a provider for ``ctx`` or return the configured fallback.

        Args:
            ctx: The request.
            now: Decision time; defaults to ``ctx.timestamp``.
            attempt: 0 for the first attempt, n for the n-th retry.
            exclude: Providers that already failed this request; they are
                recorded as failing a retry-exclusion gate.
            commit: When false, nothing is written to sticky state or the
                trace sink (used for what-if evaluation).
        """
        now = ctx.timestamp if now is None else now
        try:
            base = self.store.get(ctx.operation, now)
        except ConfigError as exc:
            reason = "config_stale" if isinstance(exc, ConfigStale) else "unknown_operation"
            trace = self._fallback_trace(ctx, now, attempt, reason)
            if commit:
                self._emit(trace)
            return RouteOutcome(trace, None)
        self._last_config[ctx.operation] = base
        fl = apply_overrides(base, ctx)
        control = fl.control
        scope = ctx.region
        view: SnapshotView = self.snapshots.get(ctx.operation, scope, now, control.stale_after_ms)
        snaps = view.snapshots
        excluded = set(exclude)

        gate_results: list[GateResult] = []
        eligible: list[str] = []
        probing: set[str] = set()
        for p in fl.provider_ids:
            inputs = self._gate_inputs(fl, p, ctx, now)
            results = evaluate_gates(fl, p, ctx, snaps, inputs, now)
            if p in excluded:
                results.append(GateResult(p, RETRY_EXCLUSION_GATE, False, "failed an earlier attempt"))
            gate_results.extend(results)
            if all(r.passed for r in results):
                eligible.append(p)
                if inputs.circuit is CircuitDecision.ALLOW_PROBE:
                    probing.add(p)

        candidates = tuple(score(fl, p, snaps, probe=p in probing) for p in eligible)
        entry = self.sticky.entry(ctx.operation, scope)
        trace_id = f"{ctx.request_id}:{attempt}"
        common = dict(
            trace_id=trace_id,
            request_id=ctx.request_id,
            operation=ctx.operation,
            factor_list_version=fl.version,
            snapshot_id=view.snapshot_id,
            snapshot_ts=view.freshness_ts,
            snapshot_stale=view.stale,
            gate_results=tuple(gate_results),
            candidates=candidates,
            previous_choice=entry.incumbent,
            timestamp=now,
            attempt=attempt,
            applied_overrides=fl.applied_overrides,
            context=ctx,
        )
        if not candidates:
            trace = DecisionTrace(
                **common,
                hysteresis_applied=False,
                tie_break_applied=None,
                selected=None,
                fallback=control.fallback,
                fallback_reason="no eligible providers",
            )
            if commit:
                self._emit(trace)
            return RouteOutcome(trace, fl)

        decision = self._decide(fl, ctx, candidates, probing, entry, view, now, attempt)
        trace = DecisionTrace(**common, **decision.trace_fields)
        if commit:
            if decision.entry is not None:
                switch = None
                if decision.switched:
                    switch = SwitchRecord(
                        now, ctx.operation, scope, entry.incumbent, trace.selected or "", trace_id, decision.reason
                    )
                self.sticky.commit(ctx.operation, scope, decision.entry, ctx, trace.selected or "", now, switch)
            self._emit(trace)
        return RouteOutcome(trace, fl)

    def _decide(
        self,
        fl: FactorList,
        ctx: RequestContext,
        candidates: tuple[ScoredCandidate, ...],
        probing: set[str],
        entry: StickyEntry,
        view: SnapshotView,
        now: int,
        attempt: int,
    ) -> _Decision:
        control = fl.control
        names = {c.provider for c in candidates}
        if probing:
            # Recovering providers get probe traffic first; probes never take incumbency.
            return _Decision(dict(selected=min(probing), probe=True), None, False, "")
        if attempt > 0:
            best, tie = self._argmax(fl, ctx, candidates)
            return _Decision(dict(selected=best.provider, tie_break_applied=tie), None, False, "")
        if view.stale and control.stale_metric_policy is StalePolicy.PREFER_DEFAULT:
            if control.default_provider in names:
                new = replace(entry, incumbent=control.default_provider, challenger=None, challenger_streak=0)
                switched = entry.incumbent is not None and entry.incumbent != control.default_provider
                if switched:
                    new.last_switch_ts = now
                return _Decision(
                    dict(selected=control.default_provider, stale_policy_applied=control.stale_metric_policy.value),
                    new,
                    switched,
                    "stale_default",
                )
        best, tie = self._argmax(fl, ctx, candidates)
        h = apply_hysteresis(
            best,
            candidates,
            entry,
            control.hysteresis_delta,
            control.cooldown_ms,
            control.sustained_windows_for(ctx.traffic_class),
            now,
            view.snapshot_id,
        )
        stale_mark = control.stale_metric_policy.value if view.stale else None
        return _Decision(
            dict(
                selected=h.selected,
                hysteresis_applied=h.applied,
                tie_break_applied=tie if h.selected == best.provider else None,
                stale_policy_applied=stale_mark,
            ),
            h.entry,
            h.switched,
            "forced" if h.forced else "score",
        )

    def _argmax(
        self, fl: FactorList, ctx: RequestContext, candidates: Sequence[ScoredCandidate]
    ) -> tuple[ScoredCandidate, str | None]:
        top = max(c.total for c in candidates)
        tied = [c for c in candidates if c.total >= top - TIE_EPSILON]
        if len(tied) == 1:
            return tied[0], None
        rule = fl.control.tie_break
        scope = ctx.region
        last = {
            p: ts for (op, sc, p), ts in self.sticky.last_selected.items() if op == ctx.operation and sc == scope
        }
        sticky_user = None
        if ctx.user_key is not None:
            sticky_user = self.sticky.user_choice.get((ctx.operation, ctx.user_key))
        name = tie_break(tied, ctx, rule, fl, sticky_user, last, fl.control.tie_window_ms)
        return next(c for c in tied if c.provider == name), rule.value

    def _emit(self, trace: DecisionTrace) -> None:
        if self.trace_sink is not None:
            self.trace_sink(trace)


@dataclass
class _Decision:
    extra: dict[str, Any]
    entry: StickyEntry | None
    switched: bool
    reason: str

    @property
    def trace_fields(self) -> dict[str, Any]:
        fields_ = dict(
            hysteresis_applied=False,
            tie_break_applied=None,
            fallback=None,
            probe=False,
            stale_policy_applied=None,
        )
        fields_.update(self.extra)
        return fields_


def route(ctx: RequestContext, router: Router, now: int | None = None) -> RouteOutcome:
    return router.route(ctx, now)


# --------------------------------------------------------------------------
# Protected invocation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ProviderResponse:
    """What a provider adapter reports for one call."""

    latency_ms: int
    transport: TransportOutcome
    business: BusinessOutcome = field(default_factory=BusinessOutcome)
    cost: float = 0.0


ProviderCall = Callable[[str, RequestContext, int], ProviderResponse]


@dataclass
class PendingAttempt:
    """An attempt that has been admitted and is waiting for its provider response."""

    ctx: RequestContext
    provider: str
    start_time: int
    attempt: int
    probe: bool
    permit: BulkheadPermit | None
    circuit_state: CircuitState
    trace_id: str
    factor_list: FactorList


@dataclass(frozen=True)
class AttemptResult:
    event: AttemptEvent
    outcome: OutcomeClass
    retry: RetryDecision


def _shed_event(
    ctx: RequestContext, provider: str, now: int, attempt: int, trace_id: str, fl: FactorList, category: str, state: CircuitState
) -> AttemptEvent:
    return AttemptEvent(
        request_id=ctx.request_id,
        operation=ctx.operation,
        provider=provider,
        region=ctx.region,
        tenant=ctx.tenant,
        start_time=now,
        end_time=now,
        latency_ms=0,
        transport=TransportOutcome(TransportKind.CONNECTION_ERROR, None, category),
        retry_count=attempt,
        circuit_state=state,
        factor_list_version=fl.version,
        trace_id=trace_id,
    )


def begin_attempt(
    outcome: RouteOutcome, ctx: RequestContext, protection: Protection, now: int
) -> PendingAttempt | AttemptEvent:
    """Admit a routed request through circuit, bulkhead, quota and rate limit.

    Returns the pending attempt, or a zero-latency failure event when a
    protection primitive rejects the call before it reaches the provider.
    """
    fl = outcome.factor_list
    provider = outcome.selected
    assert fl is not None and provider is not None
    control = fl.control
    trace = outcome.trace
    cb = protection.breaker(fl.operation, provider, ctx.region, control)
    decision = cb.allow(now)
    if decision is CircuitDecision.DENY:
        return _shed_event(ctx, provider, now, trace.attempt, trace.trace_id, fl, "circuit_open", cb.state)
    probe = decision is CircuitDecision.ALLOW_PROBE
    permit = protection.bulkhead(fl.operation, provider, control.bulkhead_capacity).acquire()
    if permit is None:
        if probe:
            cb.release_probe()
        return _shed_event(ctx, provider, now, trace.attempt, trace.trace_id, fl, "shed", cb.state)
    qgate = fl.gate(GateKind.QUOTA_AVAILABLE)
    if qgate is not None:
        q = protection.quota(provider, "global", (qgate.params.get("quotas") or {}).get(provider), now)
        if q is not None and q.check(now).value == "available":
            q.consume(now)
        tb = protection.rate_limiter(provider, "global", (qgate.params.get("rate_limits") or {}).get(provider), now)
        if tb is not None:
            tb.take(now)
    return PendingAttempt(ctx, provider, now, trace.attempt, probe, permit, cb.state, trace.trace_id, fl)


def finish_attempt(
    pending: PendingAttempt,
    response: ProviderResponse,
    protection: Protection,
    log: EventLog | None,
) -> AttemptResult:
    """Apply the deadline, feed the circuit, emit the event and decide on a retry."""
    control = pending.factor_list.control
    deadline = control.deadline_for(pending.ctx.traffic_class)
    transport, business, latency = response.transport, response.business, response.latency_ms
    timed_out = latency > deadline
    if timed_out:
        transport = TransportOutcome(TransportKind.TIMEOUT, None, "deadline")
        business = BusinessOutcome()
        latency = deadline
    end = pending.start_time + latency
    event = AttemptEvent(
        request_id=pending.ctx.request_id,
        operation=pending.ctx.operation,
        provider=pending.provider,
        region=pending.ctx.region,
        tenant=pending.ctx.tenant,
        start_time=pending.start_time,
        end_time=end,
        latency_ms=latency,
        transport=transport,
        business=business,
        timeout=timed_out,
        retry_count=pending.attempt,
        circuit_state=pending.circuit_state,
        cost=response.cost,
        factor_list_version=pending.factor_list.version,
        trace_id=pending.trace_id,
    )
    outcome = classify_outcome(transport, business)
    cb = protection.breaker(pending.ctx.operation, pending.provider, pending.ctx.region, control)
    cb.record(outcome, end, probe=pending.probe)
    if transport.kind is TransportKind.RATE_LIMITED:
        qgate = pending.factor_list.gate(GateKind.QUOTA_AVAILABLE)
        throttle_ms = int(qgate.params.get("throttle_ms", 1000)) if qgate is not None else 1000
        protection.throttle(pending.provider, "global", end + throttle_ms)
    if pending.permit is not None:
        pending.permit.release()
    if log is not None:
        log.append(event)
    return AttemptResult(event, outcome, _retry_for(event, outcome, pending.factor_list, protection, end))


def _retry_for(
    event: AttemptEvent, outcome: OutcomeClass, fl: FactorList, protection: Protection, now: int
) -> RetryDecision:
    if outcome.is_success:
        return RetryDecision.STOP
    control = fl.control
    return retry_decision(
        protection.retry_budget(fl.operation, control),
        event.retry_count + 1,
        control.idempotent,
        control.retry_policy,
        now,
        control.max_attempts,
    )


def rejected_result(event: AttemptEvent, fl: FactorList, protection: Protection, log: EventLog | None) -> AttemptResult:
    """Record a pre-invocation rejection as a failed attempt."""
    if log is not None:
        log.append(event)
    outcome = OutcomeClass.ATTEMPT_FAILURE
    return AttemptResult(event, outcome, _retry_for(event, outcome, fl, protection, event.end_time))


def invoke_protected(
    outcome: RouteOutcome,
    ctx: RequestContext,
    call: ProviderCall,
    router: Router,
    log: EventLog | None = None,
    now: int | None = None,
) -> list[AttemptResult]:
    """Run the selected provider under protection, retrying per policy.

    Every attempt yields exactly one :class:`AttemptEvent`. Retries to an
    alternate provider re-enter :meth:`Router.route` with the failed
    providers excluded. Returns the attempts in order.
    """
    now = ctx.timestamp if now is None else now
    results: list[AttemptResult] = []
    failed: list[str] = []
    while outcome.selected is not None and outcome.factor_list is not None:
        fl = outcome.factor_list
        admitted = begin_attempt(outcome, ctx, router.protection, now)
        if isinstance(admitted, AttemptEvent):
            result = rejected_result(admitted, fl, router.protection, log)
        else:
            deadline = fl.control.deadline_for(ctx.traffic_class)
            try:
                response = call(admitted.provider, ctx, deadline)
            except Exception as exc:  # adapters must never leak exceptions past this point
                logger.warning("provider %s raised %r", admitted.provider, exc)
                response = ProviderResponse(0, TransportOutcome(TransportKind.CONNECTION_ERROR, None, type(exc).__name__))
            result = finish_attempt(admitted, response, router.protection, log)
        results.append(result)
        if result.retry is RetryDecision.STOP:
            break
        now = result.event.end_time
        attempt = result.event.retry_count + 1
        if result.retry is RetryDecision.RETRY_SAME:
            outcome = RouteOutcome(
                replace(outcome.trace, trace_id=f"{ctx.request_id}:{attempt}", attempt=attempt, timestamp=now), fl
            )
            if router.trace_sink is not None:
                router.trace_sink(outcome.trace)
            continue
        failed.append(result.event.provider)
        outcome = router.route(ctx, now, attempt=attempt, exclude=failed)
    return results

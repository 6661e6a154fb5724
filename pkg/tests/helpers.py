"""Builders shared by the test modules."""

from __future__ import annotations

import random
from typing import Any

from factor_route.config import ConfigStore, FactorList, factor_list_from_mapping
from factor_route.domain import (
    AttemptEvent,
    BusinessKind,
    BusinessOutcome,
    OutcomeClass,
    RequestContext,
    TrafficClass,
    TransportKind,
    TransportOutcome,
)
from factor_route.protection import CircuitBreaker, CircuitConfig
from factor_route.router import Router, SwitchRecord
from factor_route.telemetry import MetricKey, MetricSnapshot, SnapshotCache

OP = "SEND_SMS"

# One "criterion N: PASS|FAIL ..." line per acceptance check, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def make_event(
    request_id: str,
    provider: str = "alpha",
    start: int = 0,
    latency: int = 100,
    ok: bool = True,
    business: BusinessKind = BusinessKind.UNKNOWN,
    region: str = "US",
    retry: int = 0,
    cost: float = 0.01,
    operation: str = OP,
) -> AttemptEvent:
    transport = TransportOutcome(TransportKind.SUCCESS, 200) if ok else TransportOutcome(TransportKind.SERVER_ERROR, 503)
    return AttemptEvent(
        request_id=request_id,
        operation=operation,
        provider=provider,
        region=region,
        start_time=start,
        end_time=start + latency,
        latency_ms=latency,
        transport=transport,
        business=BusinessOutcome(business),
        retry_count=retry,
        cost=cost,
    )


def make_ctx(
    request_id: str = "r1",
    ts: int = 0,
    region: str = "US",
    traffic_class: TrafficClass = TrafficClass.INTERACTIVE,
    tenant: str | None = None,
    user_key: str | None = None,
) -> RequestContext:
    return RequestContext(request_id, OP, region, ts, tenant=tenant, traffic_class=traffic_class, user_key=user_key)


def factor_list(
    providers: list[dict[str, Any]] | None = None,
    scores: list[dict[str, Any]] | None = None,
    gates: list[Any] | None = None,
    validate: bool = True,
    overrides: list[dict[str, Any]] | None = None,
    **control: Any,
) -> FactorList:
    providers = providers or [{"id": "alpha", "static_cost": 0.006}, {"id": "beta", "static_cost": 0.009}]
    doc = {
        "operation": OP,
        "providers": providers,
        "gates": ["circuit_closed", "region_supported"] if gates is None else gates,
        "scores": scores or [{"name": "completion_rate", "weight": 1.0}],
        "control": {"default_provider": providers[0]["id"], **control},
        "overrides": overrides or [],
    }
    return factor_list_from_mapping(doc, validate=validate)


def drive_breaker(seed: int, steps: int = 200) -> tuple[list[dict[str, Any]], Any]:
    """Run a circuit breaker through a random mix of admissions and outcomes.

    Failure probability switches between healthy and failing regimes so all
    three states get visited. Returns the recorded steps and the config.
    """
    rng = random.Random(seed)
    window = rng.randint(1, 30)
    cfg = CircuitConfig(
        failure_threshold=rng.choice([0.2, 0.5, 0.8, 1.0]),
        min_samples=rng.randint(1, window),
        window_size=window,
        open_ms=rng.choice([10, 100, 1000]),
        probe_budget=rng.randint(1, 3),
        probe_successes_to_close=rng.randint(1, 4),
    )
    moves: list[tuple[str, str, int]] = []
    cb = CircuitBreaker(
        MetricKey(OP, "p"), cfg, lambda t: moves.append((t.from_state.value, t.to_state.value, t.ts))
    )
    p_fail = rng.random()
    t = 0
    pending: list[bool] = []  # True for probe grants
    out: list[dict[str, Any]] = []
    for _ in range(steps):
        if rng.random() < 0.05:
            p_fail = rng.choice([0.0, 0.1, 0.5, 0.9, 1.0])
        t += rng.choice([0, 0, 1, rng.randint(0, cfg.open_ms)])
        moves.clear()
        r = rng.random()
        if r < 0.5 or not pending:
            d = cb.allow(t)
            step = {"t": t, "op": "allow", "decision": d.value}
            if d.value != "deny":
                pending.append(d.value == "allow_probe")
        else:
            probe = pending.pop(rng.randrange(len(pending)))
            if probe and rng.random() < 0.05:
                cb.release_probe()
                step = {"t": t, "op": "probe_result"}
            else:
                failed = rng.random() < p_fail
                outcome = OutcomeClass.ATTEMPT_FAILURE if failed else OutcomeClass.WORKFLOW_SUCCESS
                cb.record(outcome, t, probe=probe)
                step = {"t": t, "op": "probe_result" if probe else "result"}
        step["transitions"] = list(moves)
        step["in_flight"] = cb.probes_in_flight
        step["state"] = cb.state.value
        out.append(step)
    return out, cfg


def run_windows(
    series: list[dict[str, float]],
    delta: float,
    cooldown_ms: int,
    window_ms: int = 5_000,
    per_window: int = 3,
    sustained: int | None = None,
) -> list[SwitchRecord]:
    """Route ``per_window`` requests in each decision window and return the switches.

    ``series[k]`` holds every provider's completion rate for window ``k``;
    with a single completion-rate factor of weight 1 the rate is the score.
    """
    ids = sorted(series[0])
    fl = factor_list(
        providers=[{"id": p} for p in ids],
        gates=[],
        hysteresis_delta=delta,
        cooldown_ms=cooldown_ms,
        sustained_windows_required=sustained,
        stale_after_ms=window_ms * 2,
    )
    store = ConfigStore()
    store.put(fl)
    cache = SnapshotCache()
    router = Router(store, cache)
    for k, rates in enumerate(series):
        t = k * window_ms
        cache.publish(
            OP,
            [
                MetricSnapshot(MetricKey(OP, p, "US"), 100, int(r * 100), r, None, None, None, 0.0, 100, t)
                for p, r in rates.items()
            ],
            t,
        )
        for j in range(per_window):
            router.route(make_ctx(f"w{k}-{j}", t + j))
    return list(router.sticky.switches)

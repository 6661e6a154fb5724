"""Circuit breaker, bulkhead, retry budget, token bucket and quota behavior."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factor_route.config import RetryPolicy
from factor_route.domain import CircuitState, OutcomeClass
from factor_route.protection import (
    Bulkhead,
    CircuitBreaker,
    CircuitConfig,
    CircuitDecision,
    Protection,
    QuotaExhausted,
    QuotaState,
    QuotaStatus,
    RetryBudget,
    RetryDecision,
    TokenBucket,
    retry_decision,
)
from factor_route.telemetry import MetricKey
from helpers import OP, drive_breaker, factor_list
from oracles import breaker_violations

FAIL = OutcomeClass.ATTEMPT_FAILURE
OK = OutcomeClass.WORKFLOW_SUCCESS


def breaker(**kw):
    moves = []
    cb = CircuitBreaker(MetricKey(OP, "p"), CircuitConfig(**kw), moves.append)
    return cb, moves


def test_opens_at_threshold_after_min_samples():
    cb, moves = breaker(failure_threshold=0.5, min_samples=4, window_size=10, open_ms=100)
    for outcome in (FAIL, OK, FAIL):
        cb.record(outcome, 0)
    assert cb.state is CircuitState.CLOSED
    cb.record(OK, 1)
    assert cb.state is CircuitState.OPEN  # 2 of 4 failed
    assert [(m.from_state, m.to_state) for m in moves] == [(CircuitState.CLOSED, CircuitState.OPEN)]


def test_denies_while_open_then_probes_and_closes():
    cb, moves = breaker(min_samples=1, open_ms=100, probe_budget=1, probe_successes_to_close=2)
    cb.record(FAIL, 0)
    assert cb.allow(99) is CircuitDecision.DENY
    assert cb.peek(100) is CircuitDecision.ALLOW_PROBE
    assert cb.state is CircuitState.OPEN  # peek has no side effects
    assert cb.allow(100) is CircuitDecision.ALLOW_PROBE
    assert cb.allow(100) is CircuitDecision.DENY  # budget of one
    cb.record(OK, 150, probe=True)
    assert cb.state is CircuitState.HALF_OPEN
    assert cb.allow(151) is CircuitDecision.ALLOW_PROBE
    cb.record(OK, 160, probe=True)
    assert cb.state is CircuitState.CLOSED
    assert cb.sample_count == 0
    assert [m.to_state.value for m in moves] == ["open", "half_open", "closed"]


def test_probe_failure_reopens():
    cb, _ = breaker(min_samples=1, open_ms=100)
    cb.record(FAIL, 0)
    assert cb.allow(100) is CircuitDecision.ALLOW_PROBE
    cb.record(FAIL, 120, probe=True)
    assert cb.state is CircuitState.OPEN
    assert cb.opened_at == 120
    assert cb.allow(219) is CircuitDecision.DENY


def test_released_probe_slot_is_reusable():
    cb, _ = breaker(min_samples=1, open_ms=10)
    cb.record(FAIL, 0)
    assert cb.allow(10) is CircuitDecision.ALLOW_PROBE
    cb.release_probe()
    assert cb.allow(10) is CircuitDecision.ALLOW_PROBE


def test_sliding_window_forgets_old_failures():
    cb, _ = breaker(failure_threshold=0.5, min_samples=4, window_size=4)
    for outcome in (FAIL, OK, OK, OK, OK, FAIL):
        cb.record(outcome, 0)
    assert (cb.failure_count, cb.sample_count) == (1, 4)
    assert cb.state is CircuitState.CLOSED


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_breaker_runs_stay_legal(seed):
    steps, cfg = drive_breaker(seed)
    assert breaker_violations(steps, cfg.open_ms, cfg.probe_budget) == []
    assert all(s["in_flight"] <= cfg.probe_budget for s in steps)


def test_bulkhead_rejects_at_capacity():
    b = Bulkhead((OP, "p"), 2)
    p1, p2 = b.acquire(), b.acquire()
    assert p1 and p2 and b.acquire() is None
    p1.release()
    p1.release()  # idempotent
    assert b.in_use == 1
    assert b.acquire() is not None
    with pytest.raises(ValueError):
        Bulkhead((OP, "p"), 0)


def test_retry_rules():
    budget = RetryBudget(OP, 2, 1000)
    assert retry_decision(budget, 1, False, RetryPolicy.ALTERNATE_PROVIDER) is RetryDecision.STOP
    assert retry_decision(budget, 1, True, RetryPolicy.NONE) is RetryDecision.STOP
    assert retry_decision(budget, 1, True, RetryPolicy.SAME_PROVIDER) is RetryDecision.RETRY_SAME
    assert retry_decision(budget, 2, True, RetryPolicy.ALTERNATE_PROVIDER) is RetryDecision.RETRY_ALTERNATE
    assert retry_decision(budget, 1, True, RetryPolicy.ALTERNATE_PROVIDER) is RetryDecision.STOP  # budget spent
    assert retry_decision(budget, 1, True, "alternate_provider", now=1000) is RetryDecision.RETRY_ALTERNATE
    assert retry_decision(budget, 3, True, RetryPolicy.ALTERNATE_PROVIDER, now=1000) is RetryDecision.STOP
    with pytest.raises(NotImplementedError):
        retry_decision(budget, 1, True, RetryPolicy.HEDGED)


@given(st.lists(st.integers(0, 5000), max_size=200))
def test_retry_budget_never_exceeds_window_allowance(times):
    budget = RetryBudget(OP, 3, 1000)
    granted: dict[int, int] = {}
    for t in sorted(times):
        if budget.try_consume(t):
            granted[t // 1000] = granted.get(t // 1000, 0) + 1
    assert all(n <= 3 for n in granted.values())


def test_token_bucket_refills_to_burst():
    tb = TokenBucket(rate_per_sec=10, burst=2, now=0)
    assert tb.take(0) and tb.take(0) and not tb.take(0)
    assert not tb.available(99)
    assert tb.available(100)
    tb.take(10_000)
    assert tb.tokens == 1.0


def test_quota_resets_each_period():
    q = QuotaState((OP, "p"), limit=2, reset_ts=1000, period_ms=1000)
    q.consume(0)
    q.consume(10)
    assert q.check(20) is QuotaStatus.EXHAUSTED
    with pytest.raises(QuotaExhausted):
        q.consume(30)
    assert q.check(1000) is QuotaStatus.AVAILABLE
    q.consume(5500, 2)
    assert q.reset_ts == 6000


def test_registry_shares_state_per_key():
    control = factor_list().control
    prot = Protection()
    assert prot.breaker(OP, "alpha", "US", control) is prot.breaker(OP, "alpha", "US", control)
    assert prot.breaker(OP, "alpha", "DE", control) is not prot.breaker(OP, "alpha", "US", control)
    assert prot.quota("alpha", "global", None) is None
    q = prot.quota("alpha", "global", {"limit": 5, "period_ms": 1000}, now=1500)
    assert q.reset_ts == 2000
    prot.throttle("alpha", "global", 500)
    assert prot.is_throttled("alpha", "global", 499) and not prot.is_throttled("alpha", "global", 500)

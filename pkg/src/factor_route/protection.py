"""Local fault containment: circuit breakers, bulkheads, retry budgets, rate and quota limits.

Nothing here blocks. Contention resolves to an immediate allow or deny, and
every state change happens under the primitive's own lock.
"""

from __future__ import annotations

import logging
import threading
from collections import deque
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from factor_route.config import ControlParams, RetryPolicy
from factor_route.domain import CircuitState, OutcomeClass
from factor_route.telemetry import MetricKey

logger = logging.getLogger(__name__)

LEGAL_TRANSITIONS = frozenset(
    {
        (CircuitState.CLOSED, CircuitState.OPEN),
        (CircuitState.OPEN, CircuitState.HALF_OPEN),
        (CircuitState.HALF_OPEN, CircuitState.CLOSED),
        (CircuitState.HALF_OPEN, CircuitState.OPEN),
    }
)


class CircuitDecision(str, Enum):
    ALLOW_NORMAL = "allow_normal"
    ALLOW_PROBE = "allow_probe"
    DENY = "deny"


@dataclass
class CircuitConfig:
    failure_threshold: float = 0.5
    min_samples: int = 20
    window_size: int = 50
    open_ms: int = 30_000
    probe_budget: int = 1
    probe_successes_to_close: int = 3

    @classmethod
    def from_control(cls, c: ControlParams) -> CircuitConfig:
        return cls(
            failure_threshold=c.circuit_failure_threshold,
            min_samples=c.circuit_min_samples,
            window_size=c.circuit_window_size,
            open_ms=c.circuit_open_ms,
            probe_budget=c.half_open_probe_budget,
            probe_successes_to_close=c.probe_successes_to_close,
        )


@dataclass(frozen=True)
class CircuitTransition:
    ts: int
    key: MetricKey
    from_state: CircuitState
    to_state: CircuitState

    def to_dict(self) -> dict[str, Any]:
        return {
            "ts": self.ts,
            "key": self.key.to_dict(),
            "transition": f"{self.from_state.value}->{self.to_state.value}",
        }


TransitionListener = Callable[[CircuitTransition], None]


class CircuitBreaker:
    """Count-based circuit breaker over the last ``window_size`` outcomes.

    Closed circuits open once at least ``min_samples`` outcomes are in the
    window and the failure fraction reaches ``failure_threshold``. After
    ``open_ms`` the next :meth:`allow` moves to half-open and hands out probe
    slots; ``probe_successes_to_close`` consecutive probe successes close the
    circuit, any probe failure reopens it.
    """

    def __init__(
        self,
        key: MetricKey,
        config: CircuitConfig | None = None,
        listener: TransitionListener | None = None,
    ) -> None:
        self.key = key
        self.config = config or CircuitConfig()
        self.state = CircuitState.CLOSED
        self.opened_at: int | None = None
        self.probes_in_flight = 0
        self.probe_successes = 0
        self._outcomes: deque[bool] = deque(maxlen=self.config.window_size)
        self._failures = 0
        self._listener = listener
        self._lock = threading.Lock()

    @property
    def sample_count(self) -> int:
        return len(self._outcomes)

    @property
    def failure_count(self) -> int:
        return self._failures

    @property
    def success_count(self) -> int:
        return len(self._outcomes) - self._failures

    def _transition(self, to: CircuitState, now: int) -> CircuitTransition:
        t = CircuitTransition(now, self.key, self.state, to)
        assert (t.from_state, t.to_state) in LEGAL_TRANSITIONS
        self.state = to
        return t

    def _emit(self, t: CircuitTransition | None) -> None:
        if t is None:
            return
        logger.debug("circuit %s: %s -> %s at %d", self.key, t.from_state.value, t.to_state.value, t.ts)
        if self._listener is not None:
            self._listener(t)

    def _reset_window(self) -> None:
        self._outcomes = deque(maxlen=self.config.window_size)
        self._failures = 0

    def peek(self, now: int) -> CircuitDecision:
        """What :meth:`allow` would answer, without consuming a probe slot."""
        with self._lock:
            if self.state is CircuitState.CLOSED:
                return CircuitDecision.ALLOW_NORMAL
            if self.state is CircuitState.OPEN:
                assert self.opened_at is not None
                if now - self.opened_at < self.config.open_ms:
                    return CircuitDecision.DENY
                return CircuitDecision.ALLOW_PROBE
            if self.probes_in_flight < self.config.probe_budget:
                return CircuitDecision.ALLOW_PROBE
            return CircuitDecision.DENY

    def allow(self, now: int) -> CircuitDecision:
        transition = None
        with self._lock:
            if self.state is CircuitState.CLOSED:
                return CircuitDecision.ALLOW_NORMAL
            if self.state is CircuitState.OPEN:
                assert self.opened_at is not None
                if now - self.opened_at < self.config.open_ms:
                    return CircuitDecision.DENY
                transition = self._transition(CircuitState.HALF_OPEN, now)
                self.probe_successes = 0
            if self.probes_in_flight < self.config.probe_budget:
                self.probes_in_flight += 1
                decision = CircuitDecision.ALLOW_PROBE
            else:
                decision = CircuitDecision.DENY
        self._emit(transition)
        return decision

    def release_probe(self) -> None:
        """Return a probe slot that was granted but never used."""
        with self._lock:
            if self.probes_in_flight > 0:
                self.probes_in_flight -= 1

    def record(self, outcome: OutcomeClass, now: int, probe: bool = False) -> CircuitState:
        """Feed back the outcome of an attempt previously allowed by :meth:`allow`."""
        failed = outcome is OutcomeClass.ATTEMPT_FAILURE
        transition = None
        with self._lock:
            if probe:
                if self.probes_in_flight > 0:
                    self.probes_in_flight -= 1
                if self.state is CircuitState.HALF_OPEN:
                    if failed:
                        transition = self._transition(CircuitState.OPEN, now)
                        self.opened_at = now
                        self.probe_successes = 0
                        self.probes_in_flight = 0
                    else:
                        self.probe_successes += 1
                        if self.probe_successes >= self.config.probe_successes_to_close:
                            transition = self._transition(CircuitState.CLOSED, now)
                            self.opened_at = None
                            self.probe_successes = 0
                            self.probes_in_flight = 0
                            self._reset_window()
            elif self.state is CircuitState.CLOSED:
                if len(self._outcomes) == self._outcomes.maxlen and self._outcomes[0]:
                    self._failures -= 1
                self._outcomes.append(failed)
                self._failures += failed
                n = len(self._outcomes)
                if n >= self.config.min_samples and self._failures / n >= self.config.failure_threshold:
                    transition = self._transition(CircuitState.OPEN, now)
                    self.opened_at = now
                    self._reset_window()
            state = self.state
        self._emit(transition)
        return state


def circuit_allow(cb: CircuitBreaker, now: int) -> CircuitDecision:
    return cb.allow(now)


def circuit_record(cb: CircuitBreaker, outcome: OutcomeClass, now: int, probe: bool = False) -> CircuitState:
    return cb.record(outcome, now, probe=probe)


# --------------------------------------------------------------------------
# Bulkhead
# --------------------------------------------------------------------------


class BulkheadPermit:
    def __init__(self, bulkhead: Bulkhead) -> None:
        self._bulkhead = bulkhead
        self.released = False

    def release(self) -> None:
        if not self.released:
            self.released = True
            self._bulkhead._release()


class Bulkhead:
    """Counting semaphore that rejects instead of waiting."""

    def __init__(self, key: tuple[str, str], capacity: int) -> None:
        if capacity < 1:
            raise ValueError("bulkhead capacity must be >= 1")
        self.key = key
        self.capacity = capacity
        self.in_use = 0
        self._lock = threading.Lock()

    def acquire(self) -> BulkheadPermit | None:
        with self._lock:
            if self.in_use >= self.capacity:
                return None
            self.in_use += 1
        return BulkheadPermit(self)

    def _release(self) -> None:
        with self._lock:
            if self.in_use == 0:
                raise RuntimeError("bulkhead released more often than acquired")
            self.in_use -= 1


def bulkhead_acquire(b: Bulkhead) -> BulkheadPermit | None:
    return b.acquire()


def bulkhead_release(permit: BulkheadPermit) -> None:
    permit.release()


# --------------------------------------------------------------------------
# Retries
# --------------------------------------------------------------------------


class RetryDecision(str, Enum):
    RETRY_SAME = "retry_same"
    RETRY_ALTERNATE = "retry_alternate"
    STOP = "stop"


class RetryBudget:
    """Fixed-window retry allowance per operation."""

    def __init__(self, operation: str, budget_per_window: int, window_ms: int) -> None:
        self.operation = operation
        self.budget_per_window = budget_per_window
        self.window_ms = window_ms
        self.consumed = 0
        self._window = 0
        self._lock = threading.Lock()

    def _roll(self, now: int) -> None:
        w = now // self.window_ms
        if w != self._window:
            self._window = w
            self.consumed = 0

    def available(self, now: int) -> bool:
        with self._lock:
            self._roll(now)
            return self.consumed < self.budget_per_window

    def try_consume(self, now: int) -> bool:
        with self._lock:
            self._roll(now)
            if self.consumed >= self.budget_per_window:
                return False
            self.consumed += 1
            return True


def retry_decision(
    budget: RetryBudget,
    attempt_no: int,
    idempotent: bool,
    policy: RetryPolicy | str,
    now: int = 0,
    max_attempts: int = 2,
) -> RetryDecision:
    """Decide whether the failed attempt number ``attempt_no`` (1-based) is retried.

    Total attempts per request never exceed ``1 + max_attempts``.
    """
    if attempt_no < 1:
        raise ValueError("attempt_no must be >= 1")
    policy = RetryPolicy(policy)
    if policy is RetryPolicy.HEDGED:
        raise NotImplementedError("hedged requests are not supported")
    if not idempotent or policy is RetryPolicy.NONE or attempt_no > max_attempts:
        return RetryDecision.STOP
    if not budget.try_consume(now):
        return RetryDecision.STOP
    if policy is RetryPolicy.SAME_PROVIDER:
        return RetryDecision.RETRY_SAME
    return RetryDecision.RETRY_ALTERNATE


# --------------------------------------------------------------------------
# Rate limits and quotas
# --------------------------------------------------------------------------


class TokenBucket:
    def __init__(self, rate_per_sec: float, burst: float, now: int = 0) -> None:
        self.rate_per_ms = rate_per_sec / 1000.0
        self.burst = float(burst)
        self.tokens = float(burst)
        self.last_ts = now
        self._lock = threading.Lock()

    def _refill(self, now: int) -> None:
        if now > self.last_ts:
            self.tokens = min(self.burst, self.tokens + (now - self.last_ts) * self.rate_per_ms)
            self.last_ts = now

    def available(self, now: int, n: float = 1.0) -> bool:
        with self._lock:
            self._refill(now)
            return self.tokens >= n

    def take(self, now: int, n: float = 1.0) -> bool:
        with self._lock:
            self._refill(now)
            if self.tokens < n:
                return False
            self.tokens -= n
            return True


class QuotaExhausted(Exception):
    pass


class QuotaStatus(str, Enum):
    AVAILABLE = "available"
    EXHAUSTED = "exhausted"


class QuotaState:
    """Counter that resets to zero every ``period_ms`` starting at ``reset_ts``."""

    def __init__(self, key: tuple[str, str], limit: int, reset_ts: int, period_ms: int) -> None:
        self.key = key
        self.limit = limit
        self.used = 0
        self.reset_ts = reset_ts
        self.period_ms = period_ms
        self._lock = threading.Lock()

    def _apply_reset(self, now: int) -> None:
        if now >= self.reset_ts:
            periods = (now - self.reset_ts) // self.period_ms + 1
            self.reset_ts += periods * self.period_ms
            self.used = 0

    def check(self, now: int, n: int = 1) -> QuotaStatus:
        if n < 1:
            raise ValueError("n must be >= 1")
        with self._lock:
            self._apply_reset(now)
            return QuotaStatus.AVAILABLE if self.used + n <= self.limit else QuotaStatus.EXHAUSTED

    def consume(self, now: int, n: int = 1) -> None:
        if n < 1:
            raise ValueError("n must be >= 1")
        with self._lock:
            self._apply_reset(now)
            if self.used + n > self.limit:
                raise QuotaExhausted(f"quota {self.key} exhausted ({self.used}/{self.limit})")
            self.used += n


def quota_check(q: QuotaState, now: int, n: int = 1) -> QuotaStatus:
    return q.check(now, n)


def quota_consume(q: QuotaState, n: int = 1, now: int = 0) -> None:
    q.consume(now, n)


# --------------------------------------------------------------------------
# Registry
# --------------------------------------------------------------------------


@dataclass
class Protection:
    """All protection state for one router instance, created lazily per key."""

    listener: TransitionListener | None = None
    breakers: dict[MetricKey, CircuitBreaker] = field(default_factory=dict)
    bulkheads: dict[tuple[str, str], Bulkhead] = field(default_factory=dict)
    retry_budgets: dict[str, RetryBudget] = field(default_factory=dict)
    quotas: dict[tuple[str, str], QuotaState] = field(default_factory=dict)
    rate_limits: dict[tuple[str, str], TokenBucket] = field(default_factory=dict)
    throttled_until: dict[tuple[str, str], int] = field(default_factory=dict)
    transitions: list[CircuitTransition] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._lock = threading.Lock()

    def _on_transition(self, t: CircuitTransition) -> None:
        self.transitions.append(t)
        if self.listener is not None:
            self.listener(t)

    def breaker(self, operation: str, provider: str, region: str, control: ControlParams) -> CircuitBreaker:
        key = MetricKey(operation, provider, region)
        cb = self.breakers.get(key)
        if cb is None:
            with self._lock:
                cb = self.breakers.get(key)
                if cb is None:
                    cb = CircuitBreaker(key, CircuitConfig.from_control(control), self._on_transition)
                    self.breakers[key] = cb
        return cb

    def bulkhead(self, operation: str, provider: str, capacity: int) -> Bulkhead:
        key = (operation, provider)
        with self._lock:
            b = self.bulkheads.get(key)
            if b is None:
                b = self.bulkheads[key] = Bulkhead(key, capacity)
        return b

    def retry_budget(self, operation: str, control: ControlParams) -> RetryBudget:
        with self._lock:
            rb = self.retry_budgets.get(operation)
            if rb is None:
                rb = self.retry_budgets[operation] = RetryBudget(
                    operation, control.retry_budget_per_window, control.retry_budget_window_ms
                )
        return rb

    def quota(self, provider: str, scope: str, spec: dict[str, Any] | None, now: int = 0) -> QuotaState | None:
        if not spec:
            return None
        key = (provider, scope)
        with self._lock:
            q = self.quotas.get(key)
            if q is None:
                period = int(spec["period_ms"])
                q = self.quotas[key] = QuotaState(key, int(spec["limit"]), (now // period + 1) * period, period)
        return q

    def rate_limiter(self, provider: str, scope: str, spec: dict[str, Any] | None, now: int = 0) -> TokenBucket | None:
        if not spec:
            return None
        key = (provider, scope)
        with self._lock:
            tb = self.rate_limits.get(key)
            if tb is None:
                tb = self.rate_limits[key] = TokenBucket(float(spec["rate_per_sec"]), float(spec["burst"]), now)
        return tb

    def throttle(self, provider: str, scope: str, until: int) -> None:
        with self._lock:
            key = (provider, scope)
            self.throttled_until[key] = max(until, self.throttled_until.get(key, until))

    def is_throttled(self, provider: str, scope: str, now: int) -> bool:
        until = self.throttled_until.get((provider, scope))
        return until is not None and now < until

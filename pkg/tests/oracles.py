"""Independent reference implementations the package is checked against.

Nothing here imports the code under test except plain data types, so a bug
in the package cannot silently leak into its own oracle.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from typing import Any

WORKFLOW_SUCCESS = {"completed", "authorized", "delivered"}


# --------------------------------------------------------------------------
# Window statistics by brute-force rescan
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RawAttempt:
    """One attempt as the oracle sees it: plain numbers and strings."""

    request_id: str
    operation: str
    provider: str
    region: str
    start: int
    end: int
    latency: float
    cost: float
    business: str


@dataclass(frozen=True)
class RawLink:
    request_id: str
    ts: int
    business: str
    attempt_index: int


@dataclass(frozen=True)
class WindowStats:
    attempted: int
    completed: int
    completion_rate: float | None
    p95: float | None
    p99: float | None
    mean_cost: float | None
    latencies: tuple[float, ...]


def nearest_rank(values: Sequence[float], pct: int) -> float | None:
    """Smallest value with at least ``pct`` percent of the sample at or below it."""
    ordered = sorted(values)
    n = len(ordered)
    for i, v in enumerate(ordered, start=1):
        if i * 100 >= pct * n:
            return v
    return None


def completion_times(
    attempts: Sequence[RawAttempt], links: Sequence[RawLink], now: int, link_timeout_ms: int
) -> dict[int, int]:
    """Attempt index -> completion time, for completions visible at ``now``.

    ``links`` are in append order and already attached to an attempt index.
    An attempt completes at its own end time when it reports a workflow
    success, else at its first successful link; either way only within
    ``link_timeout_ms`` of its start.
    """
    done: dict[int, int] = {}
    for i, a in enumerate(attempts):
        if a.business in WORKFLOW_SUCCESS and a.end - a.start <= link_timeout_ms and a.end <= now:
            done[i] = a.end
    for link in links:
        i = link.attempt_index
        if link.business not in WORKFLOW_SUCCESS or link.ts > now:
            continue
        if link.ts - attempts[i].start > link_timeout_ms:
            continue
        done.setdefault(i, link.ts)
    return done


def window_stats(
    attempts: Sequence[RawAttempt],
    done: dict[int, int],
    operation: str,
    provider: str,
    scope: str,
    lo: int,
    now: int,
) -> WindowStats:
    """Rescan every attempt for the window ``(lo, now]``; ``done`` comes from :func:`completion_times`."""
    attempted = completed = 0
    lats: list[float] = []
    cost = 0.0
    for i, a in enumerate(attempts):
        if a.operation != operation or a.provider != provider:
            continue
        if scope != "global" and a.region != scope:
            continue
        if not (lo < a.start <= now):
            continue
        attempted += 1
        lats.append(a.latency)
        cost += a.cost
        if i in done:
            completed += 1
    return WindowStats(
        attempted=attempted,
        completed=completed,
        completion_rate=completed / attempted if attempted else None,
        p95=nearest_rank(lats, 95),
        p99=nearest_rank(lats, 99),
        mean_cost=cost / attempted if attempted else None,
        latencies=tuple(sorted(lats)),
    )


# --------------------------------------------------------------------------
# Router selection by exhaustive evaluation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleFactor:
    name: str
    weight: float
    lower_is_better: bool
    lo: float | None
    hi: float | None
    default: float


@dataclass(frozen=True)
class OracleProvider:
    id: str
    static_cost: float
    eligible: bool
    metrics: Mapping[str, float | None] | None  # None: no snapshot at all


def oracle_normalize(f: OracleFactor, raw: float | None) -> float:
    if raw is None:
        return f.default
    if not f.lower_is_better:
        return min(1.0, max(0.0, raw))
    assert f.lo is not None and f.hi is not None
    x = min(f.hi, max(f.lo, raw))
    return 1.0 - (x - f.lo) / (f.hi - f.lo)


def oracle_raw(f: OracleFactor, p: OracleProvider) -> float | None:
    if f.name == "cost":
        if p.metrics is not None and p.metrics.get("cost") is not None:
            return p.metrics["cost"]
        return p.static_cost
    if p.metrics is None:
        return None
    return p.metrics.get(f.name)


def oracle_total(factors: Sequence[OracleFactor], p: OracleProvider) -> float:
    return math.fsum(f.weight * oracle_normalize(f, oracle_raw(f, p)) for f in factors)


def oracle_select(
    factors: Sequence[OracleFactor],
    providers: Sequence[OracleProvider],
    incumbent: str | None,
    delta: float,
    cooled: bool,
    streak_met: bool,
    tie_eps: float = 1e-9,
) -> tuple[str | None, dict[str, float]]:
    """Gate, score, argmax with lexicographic ties, then the hysteresis rule.

    Returns the expected selection (``None`` for a fallback) and every
    eligible provider's total.
    """
    totals = {p.id: oracle_total(factors, p) for p in providers if p.eligible}
    if not totals:
        return None, totals
    top = max(totals.values())
    best = min(pid for pid, t in totals.items() if t >= top - tie_eps)
    if incumbent is None or incumbent not in totals:
        return best, totals
    if best == incumbent:
        return incumbent, totals
    if totals[best] > totals[incumbent] + delta and cooled and streak_met:
        return best, totals
    return incumbent, totals


# --------------------------------------------------------------------------
# Circuit breaker trace checks
# --------------------------------------------------------------------------

LEGAL_BREAKER_MOVES = {("closed", "open"), ("open", "half_open"), ("half_open", "closed"), ("half_open", "open")}


def breaker_violations(steps: Sequence[dict[str, Any]], open_ms: int, probe_budget: int) -> list[str]:
    """Check a recorded breaker run.

    Each step is ``{"t", "op", "decision" or "outcome", "transitions": [(from, to, ts)]}``.
    Outstanding probes are tracked from the grants and the probe outcomes
    reported back, independently of the breaker's own counters.
    """
    out: list[str] = []
    opened_at: int | None = None
    state = "closed"
    outstanding = 0
    for s in steps:
        for frm, to, ts in s["transitions"]:
            if (frm, to) not in LEGAL_BREAKER_MOVES:
                out.append(f"illegal transition {frm}->{to} at {ts}")
            if frm != state:
                out.append(f"transition from {frm} while in {state} at {ts}")
            state = to
            if to == "open":
                opened_at = ts
                outstanding = 0
            elif to == "closed":
                opened_at = None
                outstanding = 0
        if s["op"] == "allow":
            d = s["decision"]
            if opened_at is not None and s["t"] - opened_at < open_ms and d != "deny":
                out.append(f"granted {d} at {s['t']} inside the open interval from {opened_at}")
            if d == "allow_probe":
                outstanding += 1
                if outstanding > probe_budget:
                    out.append(f"{outstanding} probes outstanding at {s['t']}, budget {probe_budget}")
            if d == "allow_normal" and state != "closed":
                out.append(f"normal traffic admitted while {state} at {s['t']}")
        elif s["op"] == "probe_result":
            outstanding = max(0, outstanding - 1)
    return out

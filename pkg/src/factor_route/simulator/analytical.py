"""Closed-form availability and failover arithmetic used as the simulator's oracle."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass


def _check_prob(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value}")


def availability_serial(avails: Sequence[float]) -> float:
    """Availability of a chain where every dependency must be up."""
    if not avails:
        raise ValueError("availability_serial needs at least one dependency")
    for i, a in enumerate(avails):
        _check_prob(f"avails[{i}]", a)
    return math.prod(avails)


def availability_parallel(a1: float, a2: float) -> float:
    """Availability of two independent redundant providers."""
    _check_prob("a1", a1)
    _check_prob("a2", a2)
    return 1.0 - (1.0 - a1) * (1.0 - a2)


def expected_failures(lambda_per_min: float, d_min: float, t_switch_min: float, p_f: float, p_s: float) -> float:
    """Expected failed requests during an outage of ``d_min`` minutes.

    Traffic stays on the degraded primary (success ``p_f``) until the switch
    after ``min(d_min, t_switch_min)`` minutes and runs on the secondary
    (success ``p_s``) for the rest of the outage.
    """
    if d_min < 0 or t_switch_min < 0 or lambda_per_min < 0:
        raise ValueError("rate, duration and switch time must be non-negative")
    _check_prob("p_f", p_f)
    _check_prob("p_s", p_s)
    t = min(d_min, t_switch_min)
    return lambda_per_min * (t * (1.0 - p_f) + (d_min - t) * (1.0 - p_s))


def failover_latency_bound(
    t_detect: float, t_publish: float, t_aggregate: float, t_refresh: float, t_decision: float
) -> float:
    """Upper bound on the time from provider degradation to traffic shift."""
    terms = (t_detect, t_publish, t_aggregate, t_refresh, t_decision)
    if any(t < 0 for t in terms):
        raise ValueError("failover terms must be non-negative")
    return float(sum(terms))


@dataclass(frozen=True)
class Table2Row:
    strategy: str
    switch_min: float
    expected_failures: float
    published: int

    @property
    def rounded(self) -> int:
        return int(round(self.expected_failures))

    @property
    def matches_published(self) -> bool:
        return self.rounded == self.published


TABLE2_PARAMS = {"lambda_per_min": 1000.0, "d_min": 10.0, "p_f": 0.05, "p_s": 0.99}

# Published values for the sensitivity table; the 0.5-minute row is printed
# as 595 although the closed form gives 570.
TABLE2_STRATEGIES: tuple[tuple[str, float, int], ...] = (
    ("No failover", 10.0, 9500),
    ("Manual failover", 8.0, 7620),
    ("Static monitor failover", 2.0, 1980),
    ("Dynamic telemetry routing", 0.5, 595),
    ("Ideal instant switch", 0.0, 100),
)

TABLE2_FOOTNOTE = (
    "Dynamic telemetry routing: the published table prints 595; the closed form "
    "1000 * (0.5 * 0.95 + 9.5 * 0.01) evaluates to 570, which is reported here."
)


def table2_rows(
    lambda_per_min: float = 1000.0, d_min: float = 10.0, p_f: float = 0.05, p_s: float = 0.99
) -> list[Table2Row]:
    return [
        Table2Row(name, t, expected_failures(lambda_per_min, d_min, t, p_f, p_s), published)
        for name, t, published in TABLE2_STRATEGIES
    ]

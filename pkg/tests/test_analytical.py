"""Closed-form availability and expected-failure arithmetic."""

from __future__ import annotations

from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from factor_route.simulator.analytical import (
    TABLE2_FOOTNOTE,
    availability_parallel,
    availability_serial,
    expected_failures,
    failover_latency_bound,
    table2_rows,
)

# Frozen from an exact rational evaluation of rate * (T*(1-p_f) + (D-T)*(1-p_s)).
FROZEN_ROWS = {10.0: 9500, 8.0: 7620, 2.0: 1980, 0.5: 570, 0.0: 100}


def exact_failures(lam, d, t, pf, ps) -> Fraction:
    lam, d, t, pf, ps = (Fraction(str(x)) for x in (lam, d, t, pf, ps))
    t = min(t, d)
    return lam * (t * (1 - pf) + (d - t) * (1 - ps))


def test_rows_match_exact_rational_values():
    for row in table2_rows():
        exact = exact_failures(1000, 10, row.switch_min, 0.05, 0.99)
        assert exact == FROZEN_ROWS[row.switch_min]
        assert row.expected_failures == pytest.approx(float(exact), abs=1e-9)
        assert row.rounded == FROZEN_ROWS[row.switch_min]


def test_only_the_half_minute_row_differs_from_the_published_table():
    mismatched = [r for r in table2_rows() if not r.matches_published]
    assert [(r.switch_min, r.rounded, r.published) for r in mismatched] == [(0.5, 570, 595)]
    assert "595" in TABLE2_FOOTNOTE and "570" in TABLE2_FOOTNOTE


def test_serial_availability_of_three_nines():
    assert 0.9970 <= availability_serial([0.999] * 3) <= 0.9971
    assert 0.9950 <= availability_serial([0.999] * 5) <= 0.9951
    assert availability_parallel(0.9, 0.9) == pytest.approx(0.99)


@given(st.lists(st.fractions(0, 1), min_size=1, max_size=8))
def test_serial_matches_exact_product(avails):
    exact = Fraction(1)
    for a in avails:
        exact *= a
    assert availability_serial([float(a) for a in avails]) == pytest.approx(float(exact), abs=1e-12)


@given(st.floats(0, 1), st.floats(0, 1))
def test_parallel_beats_either_component(a, b):
    par = availability_parallel(a, b)
    assert max(a, b) - 1e-12 <= par <= 1.0


@given(
    st.integers(0, 5000),
    st.integers(0, 60),
    st.integers(0, 60),
    st.integers(0, 100),
    st.integers(0, 100),
)
def test_expected_failures_matches_rational_oracle(lam, d, t, pf, ps):
    got = expected_failures(lam, d, t, pf / 100, ps / 100)
    want = exact_failures(lam, d, t, Fraction(pf, 100), Fraction(ps, 100))
    assert got == pytest.approx(float(want), rel=1e-12, abs=1e-9)


def test_switch_time_beyond_the_outage_is_clamped():
    assert expected_failures(1000, 10, 25, 0.05, 0.99) == expected_failures(1000, 10, 10, 0.05, 0.99)


@pytest.mark.parametrize(
    "call",
    [
        lambda: availability_serial([]),
        lambda: availability_serial([1.2]),
        lambda: availability_parallel(-0.1, 0.5),
        lambda: expected_failures(-1, 10, 1, 0.5, 0.5),
        lambda: expected_failures(1, 10, 1, 1.5, 0.5),
        lambda: failover_latency_bound(1, 2, 3, -4, 5),
    ],
)
def test_rejects_out_of_range_inputs(call):
    with pytest.raises(ValueError):
        call()


def test_failover_bound_sums_its_terms():
    assert failover_latency_bound(10_000, 0, 10_000, 10_000, 10_000) == 40_000.0

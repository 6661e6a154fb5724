"""Outcome taxonomy, request contexts and attempt-event invariants."""

from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from factor_route.domain import (
    WORKFLOW_SUCCESS_KINDS,
    AttemptEvent,
    BusinessKind,
    BusinessOutcome,
    OutcomeClass,
    RequestContext,
    TrafficClass,
    TransportKind,
    TransportOutcome,
    classify_outcome,
    is_operation_id,
    validate_event,
)
from factor_route.hashing import canonical_json, content_hash, derive_seed, fnv1a_64, unit_interval
from helpers import make_event


@pytest.mark.parametrize("kind", list(BusinessKind))
def test_workflow_success_wins_over_transport(kind):
    failed = TransportOutcome(TransportKind.TIMEOUT)
    expected = OutcomeClass.WORKFLOW_SUCCESS if kind in WORKFLOW_SUCCESS_KINDS else OutcomeClass.ATTEMPT_FAILURE
    assert classify_outcome(failed, BusinessOutcome(kind)) is expected


def test_accepted_is_only_an_attempt_success():
    ok = TransportOutcome(TransportKind.SUCCESS, 202)
    assert classify_outcome(ok, BusinessOutcome(BusinessKind.ACCEPTED)) is OutcomeClass.ATTEMPT_SUCCESS
    assert OutcomeClass.ATTEMPT_SUCCESS.is_success
    assert not OutcomeClass.ATTEMPT_FAILURE.is_success


@pytest.mark.parametrize("name,ok", [("SEND_SMS", True), ("AUTHORIZE", True), ("send_sms", False), ("", False), (3, False)])
def test_operation_ids(name, ok):
    assert is_operation_id(name) is ok


def test_request_context_rejects_bad_fields():
    with pytest.raises(ValueError):
        RequestContext("", "SEND_SMS", "US", 0)
    with pytest.raises(ValueError):
        RequestContext("r", "send", "US", 0)
    with pytest.raises(ValueError):
        RequestContext("r", "SEND_SMS", "US", 0, priority=-1)


def test_request_context_round_trip_and_stickiness():
    ctx = RequestContext("r", "SEND_SMS", "DE", 5, tenant="t", traffic_class="background", user_key="u")
    assert ctx.traffic_class is TrafficClass.BACKGROUND
    assert ctx.stickiness_key == "u"
    assert RequestContext.from_dict(ctx.to_dict()) == ctx
    assert RequestContext("r", "SEND_SMS", "DE", 5).stickiness_key == "r"


def test_valid_event_has_no_violations():
    assert validate_event(make_event("r1")) == []


@pytest.mark.parametrize(
    "changes,fragment",
    [
        ({"latency_ms": 5}, "latency"),
        ({"end_time": -1, "latency_ms": -1}, "time order"),
        ({"operation": "lower"}, "operation id"),
        ({"provider": " x"}, "provider id"),
        ({"retry_count": -1}, "retry count"),
        ({"timeout": True}, "timeout consistency"),
        ({"schema_version": 0}, "schema version"),
    ],
)
def test_event_violations(changes, fragment):
    base = make_event("r1").to_dict()
    event = AttemptEvent(
        **{
            **{k: v for k, v in base.items() if k not in ("transport", "business")},
            "transport": TransportOutcome(TransportKind.SUCCESS, 200),
            "business": BusinessOutcome(),
            **changes,
        }
    )
    assert any(fragment in v for v in validate_event(event))


def test_timeout_transport_has_no_status_code():
    e = AttemptEvent("r", "SEND_SMS", "a", "US", 0, 10, 10, TransportOutcome(TransportKind.TIMEOUT, 504), timeout=True)
    assert any("status code" in v for v in validate_event(e))


@given(
    latency=st.integers(0, 10_000),
    retry=st.integers(0, 5),
    ok=st.booleans(),
    business=st.sampled_from(list(BusinessKind)),
    cost=st.floats(0, 10, allow_nan=False),
)
def test_event_json_round_trip(latency, retry, ok, business, cost):
    e = make_event("req", latency=latency, retry=retry, ok=ok, business=business, cost=cost)
    back = AttemptEvent.from_json(e.to_json())
    assert back == e
    assert back.to_json() == e.to_json()


def test_fnv1a_known_vectors():
    assert fnv1a_64("") == 0xCBF29CE484222325
    assert fnv1a_64("a") == 0xAF63DC4C8601EC8C


@given(st.lists(st.text(max_size=8), max_size=4))
def test_unit_interval_range_and_stability(parts):
    u = unit_interval(*parts)
    assert 0.0 <= u < 1.0
    assert u == unit_interval(*parts)


def test_hash_helpers_are_order_insensitive_for_mappings():
    assert canonical_json({"b": 1, "a": 2}) == '{"a":2,"b":1}'
    assert content_hash({"b": 1, "a": 2}) == content_hash({"a": 2, "b": 1})
    assert derive_seed(1, "x") != derive_seed(1, "y")
    assert derive_seed(1, "x") == derive_seed(1, "x")

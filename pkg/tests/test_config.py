"""Factor-list parsing, validation, overrides and the versioned store."""

from __future__ import annotations

from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from factor_route.config import (
    ConfigCache,
    ConfigParseError,
    ConfigStale,
    ConfigStore,
    ConfigStoreUnavailable,
    FactorListInvalid,
    GateKind,
    UnknownOperation,
    apply_overrides,
    in_ramp,
    load_factor_list,
    parse_factor_list,
    serialize_factor_list,
    validate_factor_list,
)
from factor_route.simulator.scenario import bundled_config_path
from helpers import factor_list, make_ctx

BASE = """\
operation: SEND_SMS
providers:
  - {id: alpha, supported_regions: [US, DE], static_cost: 0.006}
  - {id: beta, static_cost: 0.009}
gates: [circuit_closed, region_supported]
scores:
  - {name: completion_rate, weight: 0.7}
  - {name: latency_p95, weight: 0.3, orientation: lower_is_better, lower_bound: 100, upper_bound: 1100}
control: {default_provider: alpha}
"""


def test_bundled_config_loads():
    fl = load_factor_list(str(bundled_config_path("send_sms")))
    assert fl.operation == "SEND_SMS"
    assert fl.provider_ids == ("alpha", "beta")
    assert len(fl.version) == 16


def test_defaults_fill_control():
    fl = parse_factor_list(BASE)
    c = fl.control
    assert (c.cooldown_ms, c.hysteresis_delta, c.min_sample_count, c.circuit_open_ms) == (60_000, 0.05, 20, 30_000)
    assert c.sustained_windows_for(make_ctx().traffic_class) == 2


def test_version_is_content_hash_and_stable_under_reserialization():
    fl = parse_factor_list(BASE)
    again = parse_factor_list(serialize_factor_list(fl))
    assert again == fl
    assert again.version == fl.version
    assert parse_factor_list(BASE.replace("0.006", "0.007")).version != fl.version


def test_declared_version_must_match():
    with pytest.raises(FactorListInvalid) as err:
        parse_factor_list("version: deadbeef\n" + BASE)
    assert any("content hash" in v for v in err.value.violations)


def test_syntax_error_carries_position():
    with pytest.raises(ConfigParseError) as err:
        parse_factor_list("operation: SEND_SMS\nproviders: [\n")
    assert err.value.line is not None


def test_unknown_key_is_a_parse_error():
    with pytest.raises(ConfigParseError):
        parse_factor_list(BASE + "surprise: 1\n")


@pytest.mark.parametrize(
    "old,new,fragment",
    [
        ("weight: 0.7", "weight: 0.6", "sum to 1"),
        ("default_provider: alpha", "default_provider: gamma", "default_provider"),
        ("lower_bound: 100, upper_bound: 1100", "lower_bound: 100", "lower_bound and upper_bound"),
        ("lower_bound: 100", "lower_bound: 2000", "lower_bound must be <"),
        ("{id: beta", "{id: alpha", "duplicate provider"),
        ("operation: SEND_SMS", "operation: send_sms", "operation"),
    ],
)
def test_invariant_violations(old, new, fragment):
    with pytest.raises(FactorListInvalid) as err:
        parse_factor_list(BASE.replace(old, new))
    assert any(fragment in v for v in err.value.violations), err.value.violations


def test_validate_off_returns_invalid_list():
    fl = parse_factor_list(BASE.replace("weight: 0.7", "weight: 0.6"), validate=False)
    assert validate_factor_list(fl)


@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=3))
def test_normalized_weights_always_validate(raw):
    names = ["completion_rate", "incident_penalty", "cost"][: len(raw)]
    total = sum(raw)
    weights = [w / total for w in raw]
    weights[-1] = 1.0 - sum(weights[:-1])
    scores = []
    for name, w in zip(names, weights):
        s = {"name": name, "weight": w}
        if name != "completion_rate":
            s.update(orientation="lower_is_better", lower_bound=0.0, upper_bound=1.0)
        scores.append(s)
    assert validate_factor_list(factor_list(scores=scores)) == []


OVERRIDES = BASE + """\
overrides:
  - scope: {region: DE}
    patch:
      providers: {alpha: {enabled: false}}
      weights: {completion_rate: 0.5, latency_p95: 0.5}
  - scope: {traffic_class: background}
    patch: {control: {hysteresis_delta: 0.2}}
"""


def test_overrides_apply_in_order_and_keep_version():
    fl = parse_factor_list(OVERRIDES)
    eff = apply_overrides(fl, make_ctx(region="DE"))
    assert eff.applied_overrides == (0,)
    assert not eff.provider("alpha").enabled
    assert [s.weight for s in eff.scores] == [0.5, 0.5]
    assert eff.version == fl.version
    assert apply_overrides(fl, make_ctx(region="US")) is fl
    bg = apply_overrides(fl, make_ctx(region="DE", traffic_class="background"))
    assert bg.applied_overrides == (0, 1)
    assert bg.control.hysteresis_delta == 0.2


def test_override_patch_weights_must_sum_to_one():
    bad = OVERRIDES.replace("latency_p95: 0.5}", "latency_p95: 0.1}")
    with pytest.raises(FactorListInvalid):
        parse_factor_list(bad)


def test_ramp_membership_is_stable_and_monotone():
    keys = [f"user-{i}" for i in range(2000)]
    quarter = {k for k in keys if in_ramp(k, 0.25)}
    half = {k for k in keys if in_ramp(k, 0.5)}
    assert quarter <= half
    assert 400 < len(quarter) < 600
    assert not any(in_ramp(k, 0.0) for k in keys)
    assert all(in_ramp(k, 1.0) for k in keys)


def test_store_serves_last_known_good_then_goes_stale():
    store = ConfigStore(stale_bound_ms=1000)
    fl = parse_factor_list(BASE)
    assert store.put(fl) == fl.version
    with pytest.raises(UnknownOperation):
        store.get("AUTHORIZE", 0)
    store.mark_unavailable(100)
    assert store.get("SEND_SMS", 1100) is fl
    with pytest.raises(ConfigStale):
        store.get("SEND_SMS", 1101)
    with pytest.raises(ConfigStoreUnavailable):
        store.put(parse_factor_list(BASE.replace("0.006", "0.005")))
    store.mark_available()
    assert store.get("SEND_SMS", 10**9) is fl


def test_store_rejects_invalid_and_keeps_history():
    store = ConfigStore()
    fl = parse_factor_list(BASE)
    store.put(fl)
    with pytest.raises(FactorListInvalid):
        store.put(parse_factor_list(BASE.replace("weight: 0.7", "weight: 0.6"), validate=False))
    second = parse_factor_list(BASE.replace("0.006", "0.005"))
    store.put(second)
    assert store.versions("SEND_SMS") == [fl.version, second.version]
    assert store.get("SEND_SMS", 0) is second


def test_emergency_install_bypasses_cache_ttl():
    store = ConfigStore()
    cache = ConfigCache(store, ttl_ms=60_000)
    fl = parse_factor_list(BASE)
    store.put(fl)
    assert cache.get("SEND_SMS", 0) is fl
    routine = parse_factor_list(BASE.replace("0.006", "0.005"))
    store.put(routine)
    assert cache.get("SEND_SMS", 10) is fl
    emergency = parse_factor_list(
        BASE + "overrides:\n  - scope: {region: US}\n    emergency: true\n    patch: {providers: {alpha: {enabled: false}}}\n"
    )
    store.put(emergency)
    assert cache.get("SEND_SMS", 20) is emergency


def test_gate_lookup():
    fl = factor_list(gates=["provider_enabled", {"name": "min_samples_met", "params": {"min_samples": 5}}])
    assert fl.gate(GateKind.MIN_SAMPLES_MET).params["min_samples"] == 5
    assert fl.gate(GateKind.CIRCUIT_CLOSED) is None
    assert replace(fl, version="x").version == "x"

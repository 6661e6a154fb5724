"""Preference state machine reconstruction over recovery runs."""

from __future__ import annotations

import pytest

from factor_route.simulator.conformance import MachineParams, PrefState, check_state_machine, conformant, reconstruct
from factor_route.simulator.engine import run_scenario
from factor_route.simulator.scenario import bundled_scenario_path, load_scenario

RECOVERY = bundled_scenario_path("recovery")


@pytest.fixture(scope="module")
def runs():
    out = {}
    for variant in (None, "probe_failure", "dual_outage"):
        sc = load_scenario(RECOVERY, variant)
        out[variant] = (sc, run_scenario(sc))
    return out


def labels(sc, report):
    (res,) = check_state_machine(report, sc).values()
    return res


def test_clean_recovery_walks_t1_t2_t3(runs):
    res = labels(*runs[None])
    assert res.ok and res.labels == ["T1", "T2", "T3"]
    assert res.path == ["primary_preferred", "secondary_preferred", "probe_primary", "primary_preferred"]


def test_failed_probe_goes_back_to_secondary(runs):
    res = labels(*runs["probe_failure"])
    assert res.ok and "T4" in res.labels
    assert res.labels[-1] == "T3"


def test_dual_outage_enters_and_leaves_degraded_mode(runs):
    res = labels(*runs["dual_outage"])
    assert res.ok
    assert res.labels.index("T5") < res.labels.index("T6")
    assert res.transitions[-1].to_state is PrefState.PRIMARY


def test_report_parameters_reproduce_the_scenario_check(runs):
    sc, report = runs[None]
    assert check_state_machine(report)["US"].labels == labels(sc, report).labels


def test_early_return_is_flagged_nonconforming(runs):
    sc, report = runs[None]
    control = sc.factor_list.control
    params = MachineParams(control.default_provider, control.hysteresis_delta, 10**9, 50)
    results = reconstruct(report.traces, report.circuit_transitions, report.switch_timeline, params)
    assert not conformant(results)
    (res,) = results.values()
    assert res.violations and all(v.to_dict()["evidence"] for v in res.violations)

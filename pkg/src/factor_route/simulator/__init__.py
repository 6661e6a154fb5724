"""Closed-form failover model, scenario simulation, conformance checks and replay."""

from factor_route.simulator.analytical import (
    TABLE2_FOOTNOTE,
    Table2Row,
    availability_parallel,
    availability_serial,
    expected_failures,
    failover_latency_bound,
    table2_rows,
)
from factor_route.simulator.conformance import ConformanceResult, PrefState, check_state_machine, conformant
from factor_route.simulator.engine import SimReport, generate_arrivals, run_many, run_scenario
from factor_route.simulator.replay import ReplayError, ReplayResult, replay, replay_events
from factor_route.simulator.scenario import (
    Scenario,
    ScenarioError,
    SimMode,
    bundled_scenario_path,
    bundled_scenarios,
    load_scenario,
    scenario_variants,
)

__all__ = [
    "TABLE2_FOOTNOTE",
    "ConformanceResult",
    "PrefState",
    "ReplayError",
    "ReplayResult",
    "Scenario",
    "ScenarioError",
    "SimMode",
    "SimReport",
    "Table2Row",
    "availability_parallel",
    "availability_serial",
    "bundled_scenario_path",
    "bundled_scenarios",
    "check_state_machine",
    "conformant",
    "expected_failures",
    "failover_latency_bound",
    "generate_arrivals",
    "load_scenario",
    "replay",
    "replay_events",
    "run_many",
    "run_scenario",
    "scenario_variants",
    "table2_rows",
]

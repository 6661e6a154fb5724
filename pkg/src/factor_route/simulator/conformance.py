"""Provider-preference state machine reconstruction and conformance checking.

Four states describe where a two-provider operation sends its traffic:

* ``primary_preferred``: normal traffic goes to the default provider.
* ``secondary_preferred``: the primary was degraded or its circuit opened.
* ``probe_primary``: the primary is receiving probe traffic again.
* ``degraded_mode``: no provider passes its gates; requests get fallbacks.

Legal transitions are T1 (primary -> secondary, degradation or open circuit),
T2 (secondary -> probe, cooldown elapsed and probes allowed), T3 (probe ->
primary, sustained recovery), T4 (probe -> secondary, probe failure), T5
(secondary -> degraded, every provider gated out) and T6 (degraded ->
primary, provider recovery). Anything else is reported as nonconforming.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from factor_route.domain import CircuitState
from factor_route.protection import CircuitTransition
from factor_route.router import DecisionTrace, SwitchRecord

CONTROL_PLANE_FALLBACKS = frozenset({"config_stale", "unknown_operation"})


class PrefState(str, Enum):
    PRIMARY = "primary_preferred"
    SECONDARY = "secondary_preferred"
    PROBE = "probe_primary"
    DEGRADED = "degraded_mode"


LEGAL = {
    "T1": (PrefState.PRIMARY, PrefState.SECONDARY),
    "T2": (PrefState.SECONDARY, PrefState.PROBE),
    "T3": (PrefState.PROBE, PrefState.PRIMARY),
    "T4": (PrefState.PROBE, PrefState.SECONDARY),
    "T5": (PrefState.SECONDARY, PrefState.DEGRADED),
    "T6": (PrefState.DEGRADED, PrefState.PRIMARY),
}


@dataclass(frozen=True)
class PrefTransition:
    ts: int
    label: str
    from_state: PrefState
    to_state: PrefState
    evidence: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "ts": self.ts,
            "label": self.label,
            "from": self.from_state.value,
            "to": self.to_state.value,
            "evidence": self.evidence,
        }


@dataclass(frozen=True)
class Nonconforming:
    ts: int
    from_state: PrefState | None
    to_state: PrefState | None
    evidence: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "ts": self.ts,
            "from": self.from_state.value if self.from_state else None,
            "to": self.to_state.value if self.to_state else None,
            "evidence": self.evidence,
        }


@dataclass
class ConformanceResult:
    scope: str
    initial: PrefState | None = None
    transitions: list[PrefTransition] = field(default_factory=list)
    violations: list[Nonconforming] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def labels(self) -> list[str]:
        return [t.label for t in self.transitions]

    @property
    def path(self) -> list[str]:
        if self.initial is None:
            return []
        return [self.initial.value] + [t.to_state.value for t in self.transitions]

    def to_dict(self) -> dict[str, Any]:
        return {
            "scope": self.scope,
            "ok": self.ok,
            "labels": self.labels,
            "path": self.path,
            "transitions": [t.to_dict() for t in self.transitions],
            "violations": [v.to_dict() for v in self.violations],
        }


@dataclass(frozen=True)
class MachineParams:
    primary: str
    hysteresis_delta: float
    cooldown_ms: int
    sustained_windows: int


def _total(trace: DecisionTrace, provider: str | None) -> float | None:
    for c in trace.candidates:
        if c.provider == provider:
            return c.total
    return None


def _gate_failures(trace: DecisionTrace, provider: str) -> list[str]:
    return [f"{g.gate}: {g.reason}" for g in trace.gate_results if g.provider == provider and not g.passed]


class _Reconstructor:
    def __init__(self, scope: str, params: MachineParams, switches: dict[str, SwitchRecord]) -> None:
        self.scope = scope
        self.p = params
        self.switches = switches
        self.result = ConformanceResult(scope)
        self.state: PrefState | None = None
        self.history: list[DecisionTrace] = []
        self.last_switch_ts: int | None = None

    def _move(self, ts: int, label: str, evidence: str) -> None:
        frm, to = LEGAL[label]
        assert self.state is frm
        self.result.transitions.append(PrefTransition(ts, label, frm, to, evidence))
        self.state = to

    def _illegal(self, ts: int, to: PrefState, evidence: str) -> None:
        self.result.violations.append(Nonconforming(ts, self.state, to, evidence))
        self.state = to

    def _sustained_evidence(self, switch_trace: DecisionTrace) -> tuple[bool, str]:
        """Count consecutive metric windows in which the primary beat the incumbent by more than delta."""
        windows: list[str] = []
        for t in reversed(self.history):
            if t.probe or t.stale_policy_applied == "prefer_default":
                break
            mine = _total(t, self.p.primary)
            theirs = _total(t, t.previous_choice)
            if mine is None or theirs is None or t.previous_choice == self.p.primary:
                break
            if not mine > theirs + self.p.hysteresis_delta:
                break
            if t.snapshot_id not in windows:
                windows.append(t.snapshot_id)
        n = len(windows)
        ok = n >= self.p.sustained_windows
        return ok, f"primary ahead by more than delta in {n} consecutive window(s), {self.p.sustained_windows} required"

    def on_circuit(self, tr: CircuitTransition) -> None:
        if self.state is PrefState.PROBE and tr.to_state is CircuitState.OPEN:
            self._move(tr.ts, "T4", f"primary circuit {tr.from_state.value}->open")

    def on_trace(self, trace: DecisionTrace) -> None:
        if trace.fallback is not None:
            if trace.fallback_reason in CONTROL_PLANE_FALLBACKS:
                return
            if self.state is PrefState.SECONDARY:
                self._move(trace.timestamp, "T5", "no provider passed its gates")
            elif self.state is None:
                self.state = PrefState.DEGRADED
                self.result.initial = PrefState.DEGRADED
            elif self.state is not PrefState.DEGRADED:
                self._illegal(trace.timestamp, PrefState.DEGRADED, "all providers gated out from a non-secondary state")
            self.history.append(trace)
            return
        sel = trace.selected
        primary = self.p.primary
        if self.state is None:
            if trace.probe:
                return
            self.state = PrefState.PRIMARY if sel == primary else PrefState.SECONDARY
            self.result.initial = self.state
            self.history.append(trace)
            return
        if trace.probe:
            if sel == primary and self.state is PrefState.SECONDARY:
                self._move(trace.timestamp, "T2", "primary circuit admits probes")
            return
        switch = self.switches.get(trace.trace_id)
        if self.state is PrefState.PRIMARY and sel != primary:
            failures = _gate_failures(trace, primary)
            mine, theirs = _total(trace, primary), _total(trace, sel)
            if failures:
                self._move(trace.timestamp, "T1", "primary gated out (" + "; ".join(failures) + ")")
            elif mine is not None and theirs is not None and theirs > mine + self.p.hysteresis_delta:
                self._move(trace.timestamp, "T1", f"primary score degraded ({mine:.4f} vs {theirs:.4f})")
            else:
                self._illegal(trace.timestamp, PrefState.SECONDARY, "left the primary without degradation evidence")
            self.last_switch_ts = trace.timestamp
        elif self.state in (PrefState.SECONDARY, PrefState.PROBE) and sel == primary:
            self.history.append(trace)
            forced = switch is not None and switch.reason == "forced"
            if self.state is PrefState.SECONDARY:
                elapsed = None if self.last_switch_ts is None else trace.timestamp - self.last_switch_ts
                if forced or elapsed is None or elapsed >= self.p.cooldown_ms:
                    self._move(trace.timestamp, "T2", "cooldown elapsed with the primary's circuit closed")
                else:
                    self._illegal(trace.timestamp, PrefState.PROBE, f"returned to the primary {elapsed} ms after the last switch")
            if forced:
                self._move(trace.timestamp, "T3", "incumbent gated out; primary healthy")
            else:
                ok, evidence = self._sustained_evidence(trace)
                if ok:
                    self._move(trace.timestamp, "T3", evidence)
                else:
                    self._illegal(trace.timestamp, PrefState.PRIMARY, evidence)
            self.last_switch_ts = trace.timestamp
            return
        elif self.state is PrefState.DEGRADED:
            if sel == primary:
                self._move(trace.timestamp, "T6", "primary passes its gates again")
            else:
                self._illegal(trace.timestamp, PrefState.SECONDARY, "recovered onto the secondary from degraded mode")
            self.last_switch_ts = trace.timestamp
        self.history.append(trace)


def reconstruct(
    traces: Sequence[DecisionTrace],
    transitions: Sequence[CircuitTransition],
    switches: Sequence[SwitchRecord],
    params: MachineParams,
) -> dict[str, ConformanceResult]:
    """Replay traces and the primary's circuit history into preference states, per scope."""
    by_trace = {s.trace_id: s for s in switches}
    scopes = sorted({t.context.region for t in traces if t.context is not None})
    results: dict[str, ConformanceResult] = {}
    for scope in scopes:
        events: list[tuple[int, int, int, Any]] = []
        for i, t in enumerate(traces):
            if t.attempt == 0 and t.context is not None and t.context.region == scope:
                events.append((t.timestamp, 1, i, t))
        for i, tr in enumerate(transitions):
            if tr.key.provider != params.primary or tr.key.scope != scope:
                continue
            # Completions (which close or reopen a circuit) are processed before
            # same-millisecond arrivals; open->half_open happens at admission.
            order = 2 if tr.to_state is CircuitState.HALF_OPEN else 0
            events.append((tr.ts, order, i, tr))
        events.sort(key=lambda e: (e[0], e[1], e[2]))
        rec = _Reconstructor(scope, params, by_trace)
        for _, _, _, item in events:
            if isinstance(item, DecisionTrace):
                rec.on_trace(item)
            else:
                rec.on_circuit(item)
        results[scope] = rec.result
    return results


def check_state_machine(report: Any, scenario: Any = None) -> dict[str, ConformanceResult]:
    """Check a simulation report's preference transitions against T1-T6.

    Args:
        report: A :class:`~factor_route.simulator.engine.SimReport` with traces kept.
        scenario: Optional scenario; its factor list supplies the hysteresis
            parameters when given, otherwise the report's copies are used.
    """
    if scenario is not None:
        control = scenario.factor_list.control
        params = MachineParams(
            control.default_provider,
            control.hysteresis_delta,
            control.cooldown_ms,
            control.sustained_windows_for(scenario.traffic_class),
        )
    else:
        params = MachineParams(report.primary, report.hysteresis_delta, report.cooldown_ms, report.sustained_windows)
    return reconstruct(report.traces, report.circuit_transitions, report.switch_timeline, params)


def conformant(results: dict[str, ConformanceResult]) -> bool:
    return all(r.ok for r in results.values())

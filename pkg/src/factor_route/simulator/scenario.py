"""Scenario documents: synthetic providers, fault timelines, workload and impairments."""

from __future__ import annotations

import copy
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from factor_route.config import ConfigError, FactorList, factor_list_from_mapping
from factor_route.domain import TrafficClass


class ScenarioError(ValueError):
    """The scenario document is malformed or violates an invariant."""


class LatencyKind(str, Enum):
    CONSTANT = "constant"
    LOGNORMAL = "lognormal"


class FaultKind(str, Enum):
    FULL_OUTAGE = "full_outage"
    PARTIAL_REGIONAL = "partial_regional"
    RATE_LIMIT = "rate_limit"
    LATENCY_ONLY = "latency_only"
    RECOVERY_RAMP = "recovery_ramp"


class FailureMode(str, Enum):
    """How a failed call looks to the caller."""

    SERVER_ERROR = "server_error"
    TIMEOUT = "timeout"
    # Transport succeeds but the workflow never completes.
    SILENT = "silent"


class ArrivalProcess(str, Enum):
    DETERMINISTIC_UNIFORM = "deterministic_uniform"
    POISSON = "poisson"


class SimMode(str, Enum):
    EXPECTATION = "expectation"
    SAMPLED = "sampled"


@dataclass(frozen=True)
class LatencyDist:
    kind: LatencyKind = LatencyKind.CONSTANT
    ms: float = 100.0
    sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.ms <= 0:
            raise ScenarioError("latency must be positive")
        if self.kind is LatencyKind.LOGNORMAL and self.sigma <= 0:
            raise ScenarioError("lognormal latency needs sigma > 0")


@dataclass(frozen=True)
class RegionOverride:
    success_prob: float | None = None
    latency_multiplier: float = 1.0


@dataclass(frozen=True)
class FaultPhase:
    start_ms: int
    end_ms: int
    kind: FaultKind
    degraded_success_prob: float = 0.0
    affected_regions: tuple[str, ...] = ()
    latency_multiplier: float = 1.0
    reject_fraction: float = 0.0
    ramp_duration_ms: int = 0
    failure_mode: FailureMode | None = None

    def __post_init__(self) -> None:
        if not self.start_ms < self.end_ms:
            raise ScenarioError(f"fault phase start_ms {self.start_ms} must be < end_ms {self.end_ms}")
        for name in ("degraded_success_prob", "reject_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ScenarioError(f"fault phase {name} must be in [0, 1]")
        if self.latency_multiplier <= 0:
            raise ScenarioError("latency_multiplier must be positive")
        if self.kind is FaultKind.PARTIAL_REGIONAL and not self.affected_regions:
            raise ScenarioError("partial_regional phases must list affected_regions")
        if self.kind is FaultKind.RECOVERY_RAMP and self.ramp_duration_ms <= 0:
            raise ScenarioError("recovery_ramp phases need ramp_duration_ms > 0")

    def active(self, t: int) -> bool:
        return self.start_ms <= t < self.end_ms

    def affects(self, region: str) -> bool:
        return not self.affected_regions or region in self.affected_regions


@dataclass(frozen=True)
class ProviderModel:
    id: str
    base_success_prob: float
    latency: LatencyDist = field(default_factory=LatencyDist)
    per_region: Mapping[str, RegionOverride] = field(default_factory=dict)
    cost_per_attempt: float = 0.0
    completion_delay_ms: int = 0
    failure_mode: FailureMode = FailureMode.SERVER_ERROR
    faults: tuple[FaultPhase, ...] = ()

    def __post_init__(self) -> None:
        if not 0.0 <= self.base_success_prob <= 1.0:
            raise ScenarioError(f"provider {self.id}: base_success_prob must be in [0, 1]")
        for r, o in self.per_region.items():
            if o.success_prob is not None and not 0.0 <= o.success_prob <= 1.0:
                raise ScenarioError(f"provider {self.id}: region {r} success_prob must be in [0, 1]")
        for a, b in zip(self.faults, self.faults[1:]):
            if b.start_ms < a.end_ms:
                raise ScenarioError(f"provider {self.id}: fault phases overlap or are out of order")

    def phase_at(self, t: int, region: str) -> FaultPhase | None:
        for ph in self.faults:
            if ph.active(t) and ph.affects(region):
                return ph
        return None

    def healthy_success(self, region: str) -> float:
        o = self.per_region.get(region)
        if o is not None and o.success_prob is not None:
            return o.success_prob
        return self.base_success_prob

    def conditions(self, t: int, region: str) -> Conditions:
        """Success probability, reject fraction and latency multiplier at ``t``."""
        base = self.healthy_success(region)
        o = self.per_region.get(region)
        mult = o.latency_multiplier if o is not None else 1.0
        ph = self.phase_at(t, region)
        if ph is None:
            return Conditions(base, 0.0, mult, self.failure_mode)
        mode = ph.failure_mode or self.failure_mode
        if ph.kind in (FaultKind.FULL_OUTAGE, FaultKind.PARTIAL_REGIONAL):
            return Conditions(ph.degraded_success_prob, 0.0, mult, mode)
        if ph.kind is FaultKind.RATE_LIMIT:
            return Conditions(base, ph.reject_fraction, mult, mode)
        if ph.kind is FaultKind.LATENCY_ONLY:
            return Conditions(base, 0.0, mult * ph.latency_multiplier, mode)
        frac = min(1.0, (t - ph.start_ms) / ph.ramp_duration_ms)
        p = ph.degraded_success_prob + (base - ph.degraded_success_prob) * frac
        return Conditions(p, 0.0, mult, mode)

    def fault_starts(self) -> list[int]:
        return [ph.start_ms for ph in self.faults if ph.kind is not FaultKind.RECOVERY_RAMP]


@dataclass(frozen=True)
class Conditions:
    success_prob: float
    reject_fraction: float
    latency_multiplier: float
    failure_mode: FailureMode


@dataclass(frozen=True)
class TelemetryImpairment:
    lag_ms: int = 0
    frozen_from_ms: int | None = None


@dataclass(frozen=True)
class ConfigImpairment:
    unavailable_from_ms: int
    unavailable_until_ms: int | None = None
    # How long the last-known-good config may be served; None keeps the store default.
    stale_bound_ms: int | None = None


@dataclass(frozen=True)
class OperatorAction:
    at_ms: int
    provider: str
    enabled: bool


@dataclass(frozen=True)
class FailoverTerms:
    detect_ms: int = 0
    publish_ms: int = 0
    aggregate_ms: int = 0
    refresh_ms: int = 0
    decision_ms: int = 0


@dataclass(frozen=True)
class AnalyticalParams:
    lambda_per_min: float
    duration_min: float
    switch_min: float
    p_f: float
    p_s: float
    published: int | None = None


@dataclass(frozen=True)
class Scenario:
    name: str
    duration_ms: int
    arrival_rate_per_min: float
    providers: tuple[ProviderModel, ...]
    factor_list: FactorList
    arrival_process: ArrivalProcess = ArrivalProcess.DETERMINISTIC_UNIFORM
    regions: Mapping[str, float] = field(default_factory=lambda: {"US": 1.0})
    seed: int = 0
    mode: SimMode = SimMode.SAMPLED
    traffic_class: TrafficClass = TrafficClass.INTERACTIVE
    telemetry_impairment: TelemetryImpairment | None = None
    config_impairment: ConfigImpairment | None = None
    operator_actions: tuple[OperatorAction, ...] = ()
    failover_terms: FailoverTerms | None = None
    analytical: AnalyticalParams | None = None
    description: str = ""
    variant: str | None = None

    def __post_init__(self) -> None:
        if not self.providers:
            raise ScenarioError("scenario needs at least one provider")
        if not self.arrival_rate_per_min > 0:
            raise ScenarioError("arrival_rate_per_min must be > 0")
        if self.duration_ms <= 0:
            raise ScenarioError("duration_ms must be > 0")
        if not self.regions or abs(math.fsum(self.regions.values()) - 1.0) > 1e-9:
            raise ScenarioError("region weights must sum to 1")
        if any(w < 0 for w in self.regions.values()):
            raise ScenarioError("region weights must be non-negative")
        model_ids = {p.id for p in self.providers}
        config_ids = set(self.factor_list.provider_ids)
        if model_ids != config_ids:
            raise ScenarioError(
                f"provider models {sorted(model_ids)} do not match factor list providers {sorted(config_ids)}"
            )
        for a in self.operator_actions:
            if a.provider not in model_ids:
                raise ScenarioError(f"operator action names unknown provider {a.provider!r}")

    @property
    def primary(self) -> str:
        return self.factor_list.control.default_provider

    def provider(self, pid: str) -> ProviderModel:
        for p in self.providers:
            if p.id == pid:
                return p
        raise KeyError(pid)

    @property
    def label(self) -> str:
        return f"{self.name}[{self.variant}]" if self.variant else self.name


# --------------------------------------------------------------------------
# Loading
# --------------------------------------------------------------------------

_SCENARIO_KEYS = {
    "name",
    "description",
    "duration_ms",
    "arrival_rate_per_min",
    "arrival_process",
    "regions",
    "seed",
    "mode",
    "traffic_class",
    "providers",
    "factor_list",
    "telemetry_impairment",
    "config_impairment",
    "operator_actions",
    "failover_terms",
    "analytical",
    "variants",
}


def deep_merge(base: Any, patch: Any) -> Any:
    """Merge ``patch`` into a copy of ``base``; mappings merge, everything else replaces."""
    if isinstance(base, Mapping) and isinstance(patch, Mapping):
        out = dict(base)
        for k, v in patch.items():
            out[k] = deep_merge(base[k], v) if k in base else copy.deepcopy(v)
        return out
    return copy.deepcopy(patch)


def _check_keys(obj: Mapping[str, Any], allowed: set[str], where: str) -> None:
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ScenarioError(f"{where}: unknown keys {unknown}")


def _latency(doc: Any) -> LatencyDist:
    if doc is None:
        return LatencyDist()
    _check_keys(doc, {"kind", "ms", "median_ms", "sigma"}, "latency")
    kind = LatencyKind(doc.get("kind", "constant"))
    ms = doc.get("median_ms", doc.get("ms", 100))
    return LatencyDist(kind, float(ms), float(doc.get("sigma", 0.0)))


def _fault(doc: Mapping[str, Any]) -> FaultPhase:
    _check_keys(doc, {"start_ms", "end_ms", "kind", "params"}, "fault")
    p = dict(doc.get("params") or {})
    _check_keys(
        p,
        {
            "degraded_success_prob",
            "affected_regions",
            "latency_multiplier",
            "reject_fraction",
            "ramp_duration_ms",
            "failure_mode",
        },
        "fault.params",
    )
    kind = FaultKind(doc["kind"])
    start, end = int(doc["start_ms"]), int(doc["end_ms"])
    ramp = int(p.get("ramp_duration_ms", end - start if kind is FaultKind.RECOVERY_RAMP else 0))
    return FaultPhase(
        start_ms=start,
        end_ms=end,
        kind=kind,
        degraded_success_prob=float(p.get("degraded_success_prob", 0.0)),
        affected_regions=tuple(p.get("affected_regions") or ()),
        latency_multiplier=float(p.get("latency_multiplier", 1.0)),
        reject_fraction=float(p.get("reject_fraction", 0.0)),
        ramp_duration_ms=ramp,
        failure_mode=FailureMode(p["failure_mode"]) if p.get("failure_mode") else None,
    )


def _provider(doc: Mapping[str, Any]) -> ProviderModel:
    _check_keys(
        doc,
        {
            "id",
            "base_success_prob",
            "latency",
            "per_region",
            "cost_per_attempt",
            "completion_delay_ms",
            "failure_mode",
            "faults",
        },
        f"provider {doc.get('id')}",
    )
    per_region = {
        r: RegionOverride(
            None if o.get("success_prob") is None else float(o["success_prob"]),
            float(o.get("latency_multiplier", 1.0)),
        )
        for r, o in (doc.get("per_region") or {}).items()
    }
    return ProviderModel(
        id=str(doc["id"]),
        base_success_prob=float(doc["base_success_prob"]),
        latency=_latency(doc.get("latency")),
        per_region=per_region,
        cost_per_attempt=float(doc.get("cost_per_attempt", 0.0)),
        completion_delay_ms=int(doc.get("completion_delay_ms", 0)),
        failure_mode=FailureMode(doc.get("failure_mode", "server_error")),
        faults=tuple(_fault(f) for f in doc.get("faults") or ()),
    )


def scenario_from_mapping(doc: Mapping[str, Any], variant: str | None = None) -> Scenario:
    """Build a :class:`Scenario`, applying the named variant patch first."""
    if not isinstance(doc, Mapping):
        raise ScenarioError("scenario document must be a mapping")
    _check_keys(doc, _SCENARIO_KEYS, "scenario")
    variants = doc.get("variants") or {}
    if variant is not None:
        if variant not in variants:
            raise ScenarioError(f"unknown variant {variant!r}; known: {sorted(variants)}")
        doc = deep_merge({k: v for k, v in doc.items() if k != "variants"}, variants[variant])
    try:
        fl = factor_list_from_mapping(doc["factor_list"])
    except ConfigError as exc:
        raise ScenarioError(f"factor_list: {exc}") from exc
    except KeyError as exc:
        raise ScenarioError(f"missing key {exc}") from exc
    try:
        ti = doc.get("telemetry_impairment")
        ci = doc.get("config_impairment")
        ft = doc.get("failover_terms")
        an = doc.get("analytical")
        return Scenario(
            name=str(doc["name"]),
            description=str(doc.get("description", "")),
            duration_ms=int(doc["duration_ms"]),
            arrival_rate_per_min=float(doc["arrival_rate_per_min"]),
            arrival_process=ArrivalProcess(doc.get("arrival_process", "deterministic_uniform")),
            regions={str(k): float(v) for k, v in (doc.get("regions") or {"US": 1.0}).items()},
            seed=int(doc.get("seed", 0)),
            mode=SimMode(doc.get("mode", "sampled")),
            traffic_class=TrafficClass(doc.get("traffic_class", "interactive")),
            providers=tuple(_provider(p) for p in doc["providers"]),
            factor_list=fl,
            telemetry_impairment=TelemetryImpairment(**ti) if ti else None,
            config_impairment=ConfigImpairment(**ci) if ci else None,
            operator_actions=tuple(OperatorAction(**a) for a in doc.get("operator_actions") or ()),
            failover_terms=FailoverTerms(**ft) if ft else None,
            analytical=AnalyticalParams(**an) if an else None,
            variant=variant,
        )
    except KeyError as exc:
        raise ScenarioError(f"missing key {exc}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(str(exc)) from exc


def load_scenario_document(path: str | Path) -> dict[str, Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FileNotFoundError(f"cannot read scenario {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: scenario document must be a mapping")
    return doc


def load_scenario(path: str | Path, variant: str | None = None) -> Scenario:
    return scenario_from_mapping(load_scenario_document(path), variant)


def scenario_variants(path: str | Path) -> list[str]:
    return sorted((load_scenario_document(path).get("variants") or {}).keys())


def bundled_scenario_path(name: str) -> Path:
    """Path of a scenario shipped with the package, e.g. ``"outage"``."""
    stem = name[:-5] if name.endswith(".yaml") else name
    return Path(str(resources.files("factor_route") / "assets" / "scenarios" / f"{stem}.yaml"))


def bundled_config_path(name: str) -> Path:
    stem = name[:-5] if name.endswith(".yaml") else name
    return Path(str(resources.files("factor_route") / "assets" / "configs" / f"{stem}.yaml"))


def bundled_scenarios() -> list[str]:
    root = resources.files("factor_route") / "assets" / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))

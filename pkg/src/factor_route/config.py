"""Factor lists: parse, validate, version, override and serve routing policy.

A factor list is the per-operation routing policy document::

    operation: SEND_SMS
    providers:
      - {id: alpha, supported_regions: [US, BR], static_cost: 0.006, priority: 0}
      - {id: beta, supported_regions: ["*"], static_cost: 0.009, priority: 1}
    gates: [circuit_closed, region_supported, quota_available]
    scores:
      - {name: completion_rate, weight: 0.5, orientation: higher_is_better, default_value: 0.5}
      - ...
    control: {default_provider: alpha, hysteresis_delta: 0.05, ...}
    overrides: []

Version ids are content hashes, so identical documents share a version.
Unknown keys are rejected everywhere.
"""

from __future__ import annotations

import logging
import math
import threading
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Any

import yaml

from factor_route.domain import RequestContext, TrafficClass, is_operation_id, is_provider_id
from factor_route.hashing import content_hash, fnv1a_64

logger = logging.getLogger(__name__)

WEIGHT_TOLERANCE = 1e-9
RAMP_MODULUS = 1_000_000
DEFAULT_STALE_CONFIG_BOUND_MS = 15 * 60 * 1000
ANY_REGION = "*"


class GateKind(str, Enum):
    CIRCUIT_CLOSED = "circuit_closed"
    REGION_SUPPORTED = "region_supported"
    QUOTA_AVAILABLE = "quota_available"
    PROVIDER_ENABLED = "provider_enabled"
    COMPLIANCE_ALLOWED = "compliance_allowed"
    MAINTENANCE_INACTIVE = "maintenance_inactive"
    MIN_SAMPLES_MET = "min_samples_met"


class FactorName(str, Enum):
    COMPLETION_RATE = "completion_rate"
    LATENCY_P95 = "latency_p95"
    LATENCY_P99 = "latency_p99"
    COST = "cost"
    INCIDENT_PENALTY = "incident_penalty"


class Orientation(str, Enum):
    HIGHER_IS_BETTER = "higher_is_better"
    LOWER_IS_BETTER = "lower_is_better"


class TieBreak(str, Enum):
    STICKY_THEN_LEXICOGRAPHIC = "sticky_then_lexicographic"
    WEIGHTED_RANDOM = "weighted_random"
    PRIORITY_ORDER = "priority_order"
    LRU = "lru"


class FallbackKind(str, Enum):
    TYPED_ERROR = "typed_error"
    ENQUEUE_RETRY = "enqueue_retry"
    ALTERNATE_CHANNEL = "alternate_channel"
    SHED = "shed"


class StalePolicy(str, Enum):
    PREFER_DEFAULT = "prefer_default"
    HOLD_LAST_RANKING = "hold_last_ranking"


class RetryPolicy(str, Enum):
    NONE = "none"
    SAME_PROVIDER = "same_provider"
    ALTERNATE_PROVIDER = "alternate_provider"
    HEDGED = "hedged"


# --------------------------------------------------------------------------
# Errors
# --------------------------------------------------------------------------


class ConfigError(Exception):
    """Base class for factor-list problems."""


class ConfigParseError(ConfigError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


class FactorListInvalid(ConfigError):
    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


class ConfigStale(ConfigError):
    """Config store has been unavailable for longer than the last-known-good bound."""


class UnknownOperation(ConfigError, KeyError):
    pass


class ConfigStoreUnavailable(ConfigError):
    pass


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ProviderSpec:
    id: str
    supported_regions: tuple[str, ...] = (ANY_REGION,)
    enabled: bool = True
    static_cost: float = 0.0
    priority: int = 0

    def supports(self, region: str) -> bool:
        return ANY_REGION in self.supported_regions or region in self.supported_regions


@dataclass(frozen=True)
class GateSpec:
    name: GateKind
    params: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ScoreFactorSpec:
    name: FactorName
    weight: float
    orientation: Orientation = Orientation.HIGHER_IS_BETTER
    lower_bound: float | None = None
    upper_bound: float | None = None
    default_value: float = 0.5

    @property
    def has_bounds(self) -> bool:
        return self.lower_bound is not None and self.upper_bound is not None


@dataclass(frozen=True)
class ControlParams:
    default_provider: str
    metric_refresh_interval_ms: int = 5_000
    min_sample_count: int = 20
    cooldown_ms: int = 60_000
    hysteresis_delta: float = 0.05
    # None: 2 consecutive windows for interactive traffic, 1 for the rest.
    sustained_windows_required: int | None = None
    circuit_failure_threshold: float = 0.5
    circuit_min_samples: int = 20
    circuit_window_size: int = 50
    circuit_open_ms: int = 30_000
    half_open_probe_budget: int = 1
    probe_successes_to_close: int = 3
    tie_break: TieBreak = TieBreak.STICKY_THEN_LEXICOGRAPHIC
    fallback: FallbackKind = FallbackKind.TYPED_ERROR
    stale_metric_policy: StalePolicy = StalePolicy.PREFER_DEFAULT
    stale_after_ms: int = 30_000
    window_ms: int = 60_000
    bucket_ms: int = 5_000
    completion_link_timeout_ms: int = 120_000
    incident_tau_ms: int = 300_000
    retry_policy: RetryPolicy = RetryPolicy.NONE
    idempotent: bool = False
    max_attempts: int = 2
    retry_budget_per_window: int = 100
    retry_budget_window_ms: int = 60_000
    deadline_interactive_ms: int = 2_000
    deadline_background_ms: int = 10_000
    bulkhead_capacity: int = 64
    tie_window_ms: int = 60_000

    def sustained_windows_for(self, traffic_class: TrafficClass) -> int:
        if self.sustained_windows_required is not None:
            return self.sustained_windows_required
        return 2 if traffic_class is TrafficClass.INTERACTIVE else 1

    def deadline_for(self, traffic_class: TrafficClass) -> int:
        if traffic_class is TrafficClass.INTERACTIVE:
            return self.deadline_interactive_ms
        return self.deadline_background_ms


@dataclass(frozen=True)
class OverrideSpec:
    scope: Mapping[str, str]
    patch: Mapping[str, Any]
    ramp_fraction: float | None = None
    emergency: bool = False

    def matches(self, ctx: RequestContext) -> bool:
        for attr, expected in self.scope.items():
            actual = getattr(ctx, attr)
            if isinstance(actual, Enum):
                actual = actual.value
            if actual != expected:
                return False
        if self.ramp_fraction is not None:
            return in_ramp(ctx.stickiness_key, self.ramp_fraction)
        return True


@dataclass(frozen=True)
class FactorList:
    operation: str
    providers: tuple[ProviderSpec, ...]
    gates: tuple[GateSpec, ...]
    scores: tuple[ScoreFactorSpec, ...]
    control: ControlParams
    overrides: tuple[OverrideSpec, ...] = ()
    version: str = ""
    applied_overrides: tuple[int, ...] = field(default=(), compare=False)

    def provider(self, provider_id: str) -> ProviderSpec:
        for p in self.providers:
            if p.id == provider_id:
                return p
        raise KeyError(provider_id)

    @property
    def provider_ids(self) -> tuple[str, ...]:
        return tuple(p.id for p in self.providers)

    def gate(self, kind: GateKind) -> GateSpec | None:
        for g in self.gates:
            if g.name is kind:
                return g
        return None

    @property
    def has_emergency_override(self) -> bool:
        return any(o.emergency for o in self.overrides)


def in_ramp(key: str, fraction: float) -> bool:
    """Stable ramp membership: FNV-1a(key) mod 10^6 < fraction * 10^6."""
    return fnv1a_64(key) % RAMP_MODULUS < fraction * RAMP_MODULUS


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

_TOP_KEYS = {"operation", "version", "providers", "gates", "scores", "control", "overrides"}
_PROVIDER_KEYS = {f.name for f in fields(ProviderSpec)}
_SCORE_KEYS = {f.name for f in fields(ScoreFactorSpec)}
_OVERRIDE_KEYS = {"scope", "patch", "ramp_fraction", "emergency"}
_SCOPE_KEYS = {"region", "tenant", "traffic_class"}
_PATCH_KEYS = {"providers", "weights", "control"}
_CONTROL_FIELDS = {f.name: f for f in fields(ControlParams)}
_CONTROL_ENUMS: dict[str, type[Enum]] = {
    "tie_break": TieBreak,
    "fallback": FallbackKind,
    "stale_metric_policy": StalePolicy,
    "retry_policy": RetryPolicy,
}
_CONTROL_FLOATS = {"hysteresis_delta", "circuit_failure_threshold"}
_CONTROL_BOOLS = {"idempotent"}
_CONTROL_STRS = {"default_provider"}


def _enum_value(v: Any) -> Any:
    return v.value if isinstance(v, Enum) else v


def _control_to_dict(c: ControlParams) -> dict[str, Any]:
    return {f.name: _enum_value(getattr(c, f.name)) for f in fields(ControlParams)}


def _content_dict(fl: FactorList) -> dict[str, Any]:
    return {
        "operation": fl.operation,
        "providers": [
            {
                "id": p.id,
                "supported_regions": list(p.supported_regions),
                "enabled": p.enabled,
                "static_cost": p.static_cost,
                "priority": p.priority,
            }
            for p in fl.providers
        ],
        "gates": [
            {"name": g.name.value, "params": _plain(g.params)} if g.params else g.name.value
            for g in fl.gates
        ],
        "scores": [
            {
                "name": s.name.value,
                "weight": s.weight,
                "orientation": s.orientation.value,
                "lower_bound": s.lower_bound,
                "upper_bound": s.upper_bound,
                "default_value": s.default_value,
            }
            for s in fl.scores
        ],
        "control": _control_to_dict(fl.control),
        "overrides": [
            {
                "scope": dict(o.scope),
                "patch": _plain(o.patch),
                "ramp_fraction": o.ramp_fraction,
                "emergency": o.emergency,
            }
            for o in fl.overrides
        ],
    }


def _plain(obj: Any) -> Any:
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return _enum_value(obj)


def compute_version(fl: FactorList) -> str:
    return content_hash(_content_dict(fl))


def factor_list_to_dict(fl: FactorList) -> dict[str, Any]:
    doc = _content_dict(fl)
    return {"operation": doc.pop("operation"), "version": fl.version, **doc}


def serialize_factor_list(fl: FactorList) -> str:
    return yaml.safe_dump(factor_list_to_dict(fl), sort_keys=False, default_flow_style=None)


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------


class _MarkedDict(dict):
    """Mapping that remembers the source position of each key."""

    marks: dict[str, tuple[int, int]]
    mark: tuple[int, int]


class _MarkedLoader(yaml.SafeLoader):
    pass


def _construct_marked_mapping(loader: _MarkedLoader, node: yaml.MappingNode) -> _MarkedDict:
    loader.flatten_mapping(node)
    result = _MarkedDict()
    result.marks = {}
    result.mark = (node.start_mark.line + 1, node.start_mark.column + 1)
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        if key in result:
            raise ConfigParseError(
                f"duplicate key {key!r}", key_node.start_mark.line + 1, key_node.start_mark.column + 1
            )
        result[key] = loader.construct_object(value_node, deep=True)
        result.marks[str(key)] = (key_node.start_mark.line + 1, key_node.start_mark.column + 1)
    return result


_MarkedLoader.add_constructor(
    yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_marked_mapping
)


def _pos(obj: Any, key: str | None = None) -> tuple[int | None, int | None]:
    if isinstance(obj, _MarkedDict):
        if key is not None and key in obj.marks:
            return obj.marks[key]
        return obj.mark
    return None, None


def _fail(message: str, obj: Any = None, key: str | None = None) -> ConfigParseError:
    return ConfigParseError(message, *_pos(obj, key))


def _check_keys(obj: Any, allowed: set[str], where: str) -> None:
    if not isinstance(obj, Mapping):
        raise _fail(f"{where}: expected a mapping, got {type(obj).__name__}", obj)
    for key in obj:
        if key not in allowed:
            raise _fail(f"{where}: unknown key {key!r}", obj, str(key))


def _require(obj: Mapping, key: str, where: str) -> Any:
    if key not in obj:
        raise _fail(f"{where}: missing required field {key!r}", obj)
    return obj[key]


def _as_enum(enum_cls: type[Enum], value: Any, where: str, obj: Any, key: str) -> Any:
    try:
        return enum_cls(value)
    except ValueError:
        allowed = ", ".join(e.value for e in enum_cls)
        raise _fail(f"{where}: {value!r} is not one of [{allowed}]", obj, key) from None


def _as_number(value: Any, where: str, obj: Any, key: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise _fail(f"{where}: {key} must be a number", obj, key)
    return float(value)


def _as_int(value: Any, where: str, obj: Any, key: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise _fail(f"{where}: {key} must be an integer", obj, key)
    return value


def _parse_control(obj: Any, where: str = "control", partial: bool = False) -> dict[str, Any]:
    _check_keys(obj, set(_CONTROL_FIELDS), where)
    out: dict[str, Any] = {}
    for key, value in obj.items():
        if key in _CONTROL_ENUMS:
            out[key] = _as_enum(_CONTROL_ENUMS[key], value, where, obj, key)
        elif key in _CONTROL_FLOATS:
            out[key] = _as_number(value, where, obj, key)
        elif key in _CONTROL_BOOLS:
            if not isinstance(value, bool):
                raise _fail(f"{where}: {key} must be a boolean", obj, key)
            out[key] = value
        elif key in _CONTROL_STRS:
            if not isinstance(value, str):
                raise _fail(f"{where}: {key} must be a string", obj, key)
            out[key] = value
        elif key == "sustained_windows_required" and value is None:
            out[key] = None
        else:
            out[key] = _as_int(value, where, obj, key)
    if not partial and "default_provider" not in out:
        raise _fail(f"{where}: missing required field 'default_provider'", obj)
    return out


def _parse_provider(obj: Any, i: int) -> ProviderSpec:
    where = f"providers[{i}]"
    if isinstance(obj, str):
        return ProviderSpec(id=obj)
    _check_keys(obj, _PROVIDER_KEYS, where)
    pid = _require(obj, "id", where)
    if not isinstance(pid, str):
        raise _fail(f"{where}: id must be a string", obj, "id")
    regions = obj.get("supported_regions", [ANY_REGION])
    if not isinstance(regions, list) or not all(isinstance(r, str) for r in regions):
        raise _fail(f"{where}: supported_regions must be a list of strings", obj, "supported_regions")
    enabled = obj.get("enabled", True)
    if not isinstance(enabled, bool):
        raise _fail(f"{where}: enabled must be a boolean", obj, "enabled")
    return ProviderSpec(
        id=pid,
        supported_regions=tuple(regions),
        enabled=enabled,
        static_cost=_as_number(obj.get("static_cost", 0.0), where, obj, "static_cost"),
        priority=_as_int(obj.get("priority", 0), where, obj, "priority"),
    )


def _parse_gate(obj: Any, i: int) -> GateSpec:
    where = f"gates[{i}]"
    if isinstance(obj, str):
        return GateSpec(name=_as_enum(GateKind, obj, where, None, ""))
    _check_keys(obj, {"name", "params"}, where)
    name = _as_enum(GateKind, _require(obj, "name", where), where, obj, "name")
    params = obj.get("params", {}) or {}
    if not isinstance(params, Mapping):
        raise _fail(f"{where}: params must be a mapping", obj, "params")
    return GateSpec(name=name, params=_plain(params))


def _parse_score(obj: Any, i: int) -> ScoreFactorSpec:
    where = f"scores[{i}]"
    _check_keys(obj, _SCORE_KEYS, where)
    name = _as_enum(FactorName, _require(obj, "name", where), where, obj, "name")
    default_orientation = (
        Orientation.HIGHER_IS_BETTER
        if name is FactorName.COMPLETION_RATE
        else Orientation.LOWER_IS_BETTER
    )
    orientation = (
        _as_enum(Orientation, obj["orientation"], where, obj, "orientation")
        if "orientation" in obj
        else default_orientation
    )
    lower = obj.get("lower_bound")
    upper = obj.get("upper_bound")
    if name is FactorName.INCIDENT_PENALTY and lower is None and upper is None:
        lower, upper = 0.0, 1.0
    return ScoreFactorSpec(
        name=name,
        weight=_as_number(_require(obj, "weight", where), where, obj, "weight"),
        orientation=orientation,
        lower_bound=None if lower is None else _as_number(lower, where, obj, "lower_bound"),
        upper_bound=None if upper is None else _as_number(upper, where, obj, "upper_bound"),
        default_value=_as_number(obj.get("default_value", 0.5), where, obj, "default_value"),
    )


def _parse_override(obj: Any, i: int) -> OverrideSpec:
    where = f"overrides[{i}]"
    _check_keys(obj, _OVERRIDE_KEYS, where)
    scope = _require(obj, "scope", where)
    _check_keys(scope, _SCOPE_KEYS, f"{where}.scope")
    patch = _require(obj, "patch", where)
    _check_keys(patch, _PATCH_KEYS, f"{where}.patch")
    clean_patch: dict[str, Any] = {}
    if "providers" in patch:
        provs = patch["providers"]
        if not isinstance(provs, Mapping):
            raise _fail(f"{where}.patch.providers must be a mapping", patch, "providers")
        clean: dict[str, dict[str, bool]] = {}
        for pid, p in provs.items():
            _check_keys(p, {"enabled"}, f"{where}.patch.providers.{pid}")
            if not isinstance(p.get("enabled"), bool):
                raise _fail(f"{where}.patch.providers.{pid}.enabled must be a boolean", p)
            clean[str(pid)] = {"enabled": p["enabled"]}
        clean_patch["providers"] = clean
    if "weights" in patch:
        weights = patch["weights"]
        if not isinstance(weights, Mapping):
            raise _fail(f"{where}.patch.weights must be a mapping", patch, "weights")
        clean_patch["weights"] = {
            _as_enum(FactorName, k, f"{where}.patch.weights", weights, str(k)).value: _as_number(
                v, f"{where}.patch.weights", weights, str(k)
            )
            for k, v in weights.items()
        }
    if "control" in patch:
        clean_patch["control"] = {
            k: _enum_value(v)
            for k, v in _parse_control(patch["control"], f"{where}.patch.control", partial=True).items()
        }
    ramp = obj.get("ramp_fraction")
    emergency = obj.get("emergency", False)
    if not isinstance(emergency, bool):
        raise _fail(f"{where}: emergency must be a boolean", obj, "emergency")
    return OverrideSpec(
        scope={str(k): str(v) for k, v in scope.items()},
        patch=clean_patch,
        ramp_fraction=None if ramp is None else _as_number(ramp, where, obj, "ramp_fraction"),
        emergency=emergency,
    )


def _build(doc: Any) -> tuple[FactorList, str | None]:
    if doc is None:
        raise ConfigParseError("empty document")
    _check_keys(doc, _TOP_KEYS, "factor list")
    operation = _require(doc, "operation", "factor list")
    providers = _require(doc, "providers", "factor list")
    if not isinstance(providers, list):
        raise _fail("providers must be a list", doc, "providers")
    gates = doc.get("gates", []) or []
    scores = _require(doc, "scores", "factor list")
    if not isinstance(gates, list):
        raise _fail("gates must be a list", doc, "gates")
    if not isinstance(scores, list):
        raise _fail("scores must be a list", doc, "scores")
    overrides = doc.get("overrides", []) or []
    if not isinstance(overrides, list):
        raise _fail("overrides must be a list", doc, "overrides")
    control = _parse_control(_require(doc, "control", "factor list"))
    fl = FactorList(
        operation=str(operation),
        providers=tuple(_parse_provider(p, i) for i, p in enumerate(providers)),
        gates=tuple(_parse_gate(g, i) for i, g in enumerate(gates)),
        scores=tuple(_parse_score(s, i) for i, s in enumerate(scores)),
        control=ControlParams(**control),
        overrides=tuple(_parse_override(o, i) for i, o in enumerate(overrides)),
    )
    declared = doc.get("version")
    return replace(fl, version=compute_version(fl)), (None if declared is None else str(declared))


def parse_factor_list(text: str | bytes, validate: bool = True) -> FactorList:
    """Parse a factor-list document.

    Raises:
        ConfigParseError: syntax errors, unknown keys, missing fields (with
            line/column when known).
        FactorListInvalid: the document parsed but breaks an invariant, such
            as weights that do not sum to 1. Only raised when ``validate``.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    if not text.strip():
        raise ConfigParseError("empty document")
    try:
        doc = yaml.load(text, Loader=_MarkedLoader)  # noqa: S506 - SafeLoader subclass
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise ConfigParseError(
            f"syntax error: {exc.problem}",
            None if mark is None else mark.line + 1,
            None if mark is None else mark.column + 1,
        ) from exc
    fl, declared = _build(doc)
    if validate:
        violations = validate_factor_list(fl)
        if declared is not None and declared != fl.version:
            violations.append(
                f"version: declared {declared!r} does not match content hash {fl.version!r}"
            )
        if violations:
            raise FactorListInvalid(violations)
    return fl


def load_factor_list(path: str, validate: bool = True) -> FactorList:
    with open(path, encoding="utf-8") as fh:
        return parse_factor_list(fh.read(), validate=validate)


def factor_list_from_mapping(doc: Mapping[str, Any], validate: bool = True) -> FactorList:
    """Build from an already-loaded mapping (e.g. inline in a scenario file)."""
    return parse_factor_list(yaml.safe_dump(_plain(doc), sort_keys=False), validate=validate)


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------


def _weights_ok(weights: Iterable[float]) -> bool:
    return abs(math.fsum(weights) - 1.0) <= WEIGHT_TOLERANCE


def _validate_control(c: ControlParams, provider_ids: set[str], where: str) -> list[str]:
    v: list[str] = []
    positive = (
        "metric_refresh_interval_ms",
        "circuit_open_ms",
        "stale_after_ms",
        "window_ms",
        "bucket_ms",
        "completion_link_timeout_ms",
        "incident_tau_ms",
        "retry_budget_window_ms",
        "deadline_interactive_ms",
        "deadline_background_ms",
        "tie_window_ms",
    )
    for name in positive:
        if getattr(c, name) <= 0:
            v.append(f"{where}.{name} must be > 0")
    at_least_one = (
        "min_sample_count",
        "circuit_min_samples",
        "circuit_window_size",
        "half_open_probe_budget",
        "probe_successes_to_close",
        "bulkhead_capacity",
    )
    for name in at_least_one:
        if getattr(c, name) < 1:
            v.append(f"{where}.{name} must be >= 1")
    if c.sustained_windows_required is not None and c.sustained_windows_required < 1:
        v.append(f"{where}.sustained_windows_required must be >= 1")
    for name in ("cooldown_ms", "retry_budget_per_window", "max_attempts"):
        if getattr(c, name) < 0:
            v.append(f"{where}.{name} must be >= 0")
    if not 0.0 <= c.hysteresis_delta <= 1.0:
        v.append(f"{where}.hysteresis_delta must be in [0, 1]")
    if not 0.0 < c.circuit_failure_threshold <= 1.0:
        v.append(f"{where}.circuit_failure_threshold must be in (0, 1]")
    if c.circuit_min_samples > c.circuit_window_size:
        v.append(f"{where}.circuit_min_samples cannot exceed circuit_window_size")
    if c.bucket_ms > 0 and c.window_ms % c.bucket_ms != 0:
        v.append(f"{where}.window_ms must be a multiple of bucket_ms")
    elif c.bucket_ms > 0 and c.window_ms // c.bucket_ms < 2:
        v.append(f"{where}: window must hold at least 2 buckets")
    if c.default_provider not in provider_ids:
        v.append(f"{where}.default_provider {c.default_provider!r} is not a configured provider")
    if c.retry_policy is RetryPolicy.HEDGED:
        v.append(f"{where}.retry_policy 'hedged' is not implemented")
    return v


def validate_factor_list(fl: FactorList) -> list[str]:
    """Check every factor-list invariant; returns violations (empty when ok)."""
    v: list[str] = []
    if not is_operation_id(fl.operation):
        v.append(f"operation: {fl.operation!r} is not an uppercase token")
    if not fl.providers:
        v.append("providers: at least one provider is required")
    ids = [p.id for p in fl.providers]
    seen: set[str] = set()
    for pid in ids:
        if not is_provider_id(pid):
            v.append(f"providers: invalid provider id {pid!r}")
        if pid in seen:
            v.append(f"providers: duplicate provider id {pid!r}")
        seen.add(pid)
    for p in fl.providers:
        if p.static_cost < 0:
            v.append(f"providers.{p.id}.static_cost must be >= 0")
        if p.priority < 0:
            v.append(f"providers.{p.id}.priority must be >= 0")
    if not fl.version:
        v.append("version: must be non-empty")

    gate_names = [g.name for g in fl.gates]
    if len(set(gate_names)) != len(gate_names):
        v.append("gates: duplicate gate kinds")
    for g in fl.gates:
        v.extend(_validate_gate(g, fl))

    if not fl.scores:
        v.append("scores: at least one scoring factor is required")
    factor_names = [s.name for s in fl.scores]
    if len(set(factor_names)) != len(factor_names):
        v.append("scores: duplicate factor names")
    for s in fl.scores:
        where = f"scores.{s.name.value}"
        if s.weight < 0 or s.weight > 1:
            v.append(f"{where}.weight must be in [0, 1]")
        if not 0.0 <= s.default_value <= 1.0:
            v.append(f"{where}.default_value must be in [0, 1]")
        if s.orientation is Orientation.LOWER_IS_BETTER and not s.has_bounds:
            v.append(f"{where}: lower_is_better factor requires lower_bound and upper_bound")
        if (s.lower_bound is None) != (s.upper_bound is None):
            v.append(f"{where}: bounds must be given together")
        if s.has_bounds and not s.lower_bound < s.upper_bound:  # type: ignore[operator]
            v.append(f"{where}: lower_bound must be < upper_bound")
    if fl.scores and not _weights_ok(s.weight for s in fl.scores):
        v.append(f"scores: weights must sum to 1 (got {math.fsum(s.weight for s in fl.scores):.12g})")

    v.extend(_validate_control(fl.control, seen, "control"))

    for i, o in enumerate(fl.overrides):
        v.extend(_validate_override(o, i, fl))
    return v


def _validate_gate(g: GateSpec, fl: FactorList) -> list[str]:
    v: list[str] = []
    where = f"gates.{g.name.value}"
    p = g.params
    known = {
        GateKind.CIRCUIT_CLOSED: set(),
        GateKind.REGION_SUPPORTED: set(),
        GateKind.PROVIDER_ENABLED: set(),
        GateKind.QUOTA_AVAILABLE: {"quotas", "rate_limits", "throttle_ms"},
        GateKind.COMPLIANCE_ALLOWED: {"deny"},
        GateKind.MAINTENANCE_INACTIVE: {"windows"},
        GateKind.MIN_SAMPLES_MET: {"min_samples"},
    }[g.name]
    for key in p:
        if key not in known:
            v.append(f"{where}: unknown param {key!r}")
    ids = set(fl.provider_ids)
    if g.name is GateKind.REGION_SUPPORTED:
        for prov in fl.providers:
            if not prov.supported_regions:
                v.append(f"{where}: provider {prov.id!r} declares no supported_regions")
    elif g.name is GateKind.QUOTA_AVAILABLE:
        for pid, q in (p.get("quotas") or {}).items():
            if pid not in ids:
                v.append(f"{where}.quotas: unknown provider {pid!r}")
            if not isinstance(q, Mapping) or int(q.get("limit", -1)) < 0 or int(q.get("period_ms", 0)) <= 0:
                v.append(f"{where}.quotas.{pid}: needs limit >= 0 and period_ms > 0")
        for pid, r in (p.get("rate_limits") or {}).items():
            if pid not in ids:
                v.append(f"{where}.rate_limits: unknown provider {pid!r}")
            if not isinstance(r, Mapping) or float(r.get("rate_per_sec", 0)) <= 0 or float(r.get("burst", 0)) < 1:
                v.append(f"{where}.rate_limits.{pid}: needs rate_per_sec > 0 and burst >= 1")
    elif g.name is GateKind.COMPLIANCE_ALLOWED:
        for rule in p.get("deny") or []:
            if not isinstance(rule, Mapping) or rule.get("provider") not in ids:
                v.append(f"{where}.deny: each rule needs a configured provider")
            elif set(rule) - {"provider", "region", "tenant"}:
                v.append(f"{where}.deny: rules may only name provider, region, tenant")
    elif g.name is GateKind.MAINTENANCE_INACTIVE:
        for w in p.get("windows") or []:
            if not isinstance(w, Mapping) or w.get("provider") not in ids:
                v.append(f"{where}.windows: each window needs a configured provider")
            elif not int(w.get("start_ms", 0)) < int(w.get("end_ms", 0)):
                v.append(f"{where}.windows: start_ms must be < end_ms")
    elif g.name is GateKind.MIN_SAMPLES_MET:
        if "min_samples" in p and int(p["min_samples"]) < 1:
            v.append(f"{where}.min_samples must be >= 1")
    return v


def _validate_override(o: OverrideSpec, i: int, fl: FactorList) -> list[str]:
    v: list[str] = []
    where = f"overrides[{i}]"
    if not o.scope:
        v.append(f"{where}: scope must name at least one attribute")
    for key in o.scope:
        if key not in _SCOPE_KEYS:
            v.append(f"{where}: unknown scope attribute {key!r}")
    if "traffic_class" in o.scope and o.scope["traffic_class"] not in {t.value for t in TrafficClass}:
        v.append(f"{where}: unknown traffic_class {o.scope['traffic_class']!r}")
    if o.ramp_fraction is not None and not 0.0 <= o.ramp_fraction <= 1.0:
        v.append(f"{where}: ramp_fraction must be in [0, 1]")
    for pid in (o.patch.get("providers") or {}):
        if pid not in fl.provider_ids:
            v.append(f"{where}: patch names unknown provider {pid!r}")
    weights = o.patch.get("weights")
    if weights:
        names = {s.name.value for s in fl.scores}
        for name in weights:
            if name not in names:
                v.append(f"{where}: patch weights name unconfigured factor {name!r}")
        patched = [weights.get(s.name.value, s.weight) for s in fl.scores]
        if not _weights_ok(patched):
            v.append(f"{where}: patched weights must sum to 1")
    if o.patch.get("control"):
        try:
            patched_control = _patch_control(fl.control, o.patch["control"])
        except (TypeError, ValueError) as exc:
            v.append(f"{where}: bad control patch ({exc})")
        else:
            v.extend(_validate_control(patched_control, set(fl.provider_ids), f"{where}.patch.control"))
    return v


# --------------------------------------------------------------------------
# Overrides
# --------------------------------------------------------------------------


def _patch_control(control: ControlParams, patch: Mapping[str, Any]) -> ControlParams:
    changes = {
        k: (_CONTROL_ENUMS[k](v) if k in _CONTROL_ENUMS else v) for k, v in patch.items()
    }
    return replace(control, **changes)


def _apply_patch(fl: FactorList, patch: Mapping[str, Any]) -> FactorList:
    providers = fl.providers
    if patch.get("providers"):
        pp = patch["providers"]
        providers = tuple(
            replace(p, enabled=pp[p.id]["enabled"]) if p.id in pp else p for p in providers
        )
    scores = fl.scores
    if patch.get("weights"):
        w = patch["weights"]
        scores = tuple(
            replace(s, weight=w[s.name.value]) if s.name.value in w else s for s in scores
        )
    control = fl.control
    if patch.get("control"):
        control = _patch_control(control, patch["control"])
    return replace(fl, providers=providers, scores=scores, control=control)


def apply_overrides(fl: FactorList, ctx: RequestContext) -> FactorList:
    """Return the effective factor list for ``ctx``.

    Matching overrides are applied in list order. The version id stays the
    base document's; ``applied_overrides`` lists the indices that matched.
    """
    applied: list[int] = []
    effective = fl
    for i, o in enumerate(fl.overrides):
        if o.matches(ctx):
            effective = _apply_patch(effective, o.patch)
            applied.append(i)
    if not applied:
        return fl
    return replace(effective, applied_overrides=tuple(applied))


# --------------------------------------------------------------------------
# Store
# --------------------------------------------------------------------------


@dataclass
class _OperationEntry:
    versions: list[FactorList] = field(default_factory=list)
    active: FactorList | None = None
    last_known_good: FactorList | None = None


class ConfigStore:
    """Versioned factor lists with last-known-good service during outages.

    Readers always see a complete validated version: installs swap a single
    reference under a lock.
    """

    def __init__(self, stale_bound_ms: int = DEFAULT_STALE_CONFIG_BOUND_MS) -> None:
        self.stale_bound_ms = stale_bound_ms
        self.unavailable_since: int | None = None
        self._entries: dict[str, _OperationEntry] = {}
        self._lock = threading.Lock()
        self._listeners: list[Callable[[str, FactorList], None]] = []

    def subscribe(self, listener: Callable[[str, FactorList], None]) -> None:
        """Register an invalidation listener called on every install."""
        self._listeners.append(listener)

    def put(self, fl: FactorList) -> str:
        violations = validate_factor_list(fl)
        if violations:
            raise FactorListInvalid(violations)
        if self.unavailable_since is not None:
            raise ConfigStoreUnavailable("config store is unavailable; install rejected")
        with self._lock:
            entry = self._entries.setdefault(fl.operation, _OperationEntry())
            entry.versions.append(fl)
            entry.active = fl
            entry.last_known_good = fl
        logger.info("installed factor list %s for %s", fl.version, fl.operation)
        for listener in self._listeners:
            listener(fl.operation, fl)
        return fl.version

    def get(self, operation: str, now: int) -> FactorList:
        with self._lock:
            entry = self._entries.get(operation)
            if entry is None or entry.active is None:
                raise UnknownOperation(operation)
            if self.unavailable_since is None:
                return entry.active
            if now - self.unavailable_since <= self.stale_bound_ms:
                return entry.last_known_good  # type: ignore[return-value]
        raise ConfigStale(
            f"config store unavailable since {self.unavailable_since}; "
            f"last-known-good bound of {self.stale_bound_ms} ms exceeded"
        )

    def versions(self, operation: str) -> list[str]:
        with self._lock:
            entry = self._entries.get(operation)
            return [] if entry is None else [fl.version for fl in entry.versions]

    def operations(self) -> list[str]:
        with self._lock:
            return sorted(self._entries)

    def mark_unavailable(self, ts: int) -> None:
        if self.unavailable_since is None:
            self.unavailable_since = ts
            logger.warning("config store unavailable from %d", ts)

    def mark_available(self) -> None:
        self.unavailable_since = None


def store_put(store: ConfigStore, fl: FactorList) -> str:
    return store.put(fl)


def store_get(store: ConfigStore, operation: str, now: int) -> FactorList:
    return store.get(operation, now)


class ConfigCache:
    """Reader-side TTL cache over a :class:`ConfigStore`.

    Installs carrying an emergency override invalidate the cached entry at
    once, so emergency disables never wait out the TTL.
    """

    def __init__(self, store: ConfigStore, ttl_ms: int = 0) -> None:
        self.store = store
        self.ttl_ms = ttl_ms
        self._cache: dict[str, tuple[int, FactorList]] = {}
        self._lock = threading.Lock()
        store.subscribe(self._on_install)

    def _on_install(self, operation: str, fl: FactorList) -> None:
        if fl.has_emergency_override:
            with self._lock:
                self._cache.pop(operation, None)

    def get(self, operation: str, now: int) -> FactorList:
        with self._lock:
            hit = self._cache.get(operation)
        if hit is not None and now - hit[0] < self.ttl_ms:
            return hit[1]
        fl = self.store.get(operation, now)
        with self._lock:
            self._cache[operation] = (now, fl)
        return fl

"""Core vocabulary: identifiers, request context, outcome taxonomy, attempt events.

Every value here is immutable. ``AttemptEvent`` has a canonical JSONL form
(one object per line, snake_case keys) shared by the event log, telemetry
and replay.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

SCHEMA_VERSION = 1

_OPERATION_RE = re.compile(r"^[A-Z][A-Z0-9_]*$")
_COST_DIGITS = 6


class TrafficClass(str, Enum):
    INTERACTIVE = "interactive"
    BACKGROUND = "background"
    RECOVERY = "recovery"


class TransportKind(str, Enum):
    SUCCESS = "success"
    TIMEOUT = "timeout"
    RATE_LIMITED = "rate_limited"
    SERVER_ERROR = "server_error"
    CLIENT_ERROR = "client_error"
    CONNECTION_ERROR = "connection_error"


class BusinessKind(str, Enum):
    ACCEPTED = "accepted"
    DELIVERED = "delivered"
    COMPLETED = "completed"
    AUTHORIZED = "authorized"
    DECLINED = "declined"
    FAILED = "failed"
    UNKNOWN = "unknown"


WORKFLOW_SUCCESS_KINDS = frozenset(
    {BusinessKind.COMPLETED, BusinessKind.AUTHORIZED, BusinessKind.DELIVERED}
)


class OutcomeClass(str, Enum):
    ATTEMPT_SUCCESS = "attempt_success"
    WORKFLOW_SUCCESS = "workflow_success"
    ATTEMPT_FAILURE = "attempt_failure"

    @property
    def is_success(self) -> bool:
        return self is not OutcomeClass.ATTEMPT_FAILURE


class CircuitState(str, Enum):
    CLOSED = "closed"
    OPEN = "open"
    HALF_OPEN = "half_open"


def is_operation_id(name: object) -> bool:
    """Operation ids are uppercase-with-underscore tokens such as ``SEND_SMS``."""
    return isinstance(name, str) and bool(_OPERATION_RE.match(name))


def is_provider_id(name: object) -> bool:
    return isinstance(name, str) and name != "" and name.strip() == name


@dataclass(frozen=True)
class RequestContext:
    request_id: str
    operation: str
    region: str
    timestamp: int
    tenant: str | None = None
    traffic_class: TrafficClass = TrafficClass.INTERACTIVE
    user_key: str | None = None
    priority: int = 0

    def __post_init__(self) -> None:
        if not self.request_id:
            raise ValueError("request_id must be non-empty")
        if not is_operation_id(self.operation):
            raise ValueError(f"invalid operation id: {self.operation!r}")
        if not self.region:
            raise ValueError("region must be non-empty")
        if self.priority < 0:
            raise ValueError("priority must be >= 0")
        if not isinstance(self.traffic_class, TrafficClass):
            object.__setattr__(self, "traffic_class", TrafficClass(self.traffic_class))

    @property
    def stickiness_key(self) -> str:
        return self.user_key if self.user_key is not None else self.request_id

    def to_dict(self) -> dict[str, Any]:
        return {
            "request_id": self.request_id,
            "operation": self.operation,
            "region": self.region,
            "tenant": self.tenant,
            "traffic_class": self.traffic_class.value,
            "user_key": self.user_key,
            "priority": self.priority,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RequestContext:
        return cls(
            request_id=data["request_id"],
            operation=data["operation"],
            region=data["region"],
            timestamp=int(data["timestamp"]),
            tenant=data.get("tenant"),
            traffic_class=TrafficClass(data.get("traffic_class", "interactive")),
            user_key=data.get("user_key"),
            priority=int(data.get("priority", 0)),
        )


@dataclass(frozen=True)
class TransportOutcome:
    kind: TransportKind
    status_code: int | None = None
    error_category: str | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.kind, TransportKind):
            object.__setattr__(self, "kind", TransportKind(self.kind))

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "status_code": self.status_code,
            "error_category": self.error_category,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TransportOutcome:
        return cls(
            kind=TransportKind(data["kind"]),
            status_code=data.get("status_code"),
            error_category=data.get("error_category"),
        )


@dataclass(frozen=True)
class BusinessOutcome:
    kind: BusinessKind = BusinessKind.UNKNOWN

    def __post_init__(self) -> None:
        if not isinstance(self.kind, BusinessKind):
            object.__setattr__(self, "kind", BusinessKind(self.kind))

    @property
    def is_workflow_success(self) -> bool:
        return self.kind in WORKFLOW_SUCCESS_KINDS

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind.value}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> BusinessOutcome:
        return cls(kind=BusinessKind(data["kind"]))


def classify_outcome(transport: TransportOutcome, business: BusinessOutcome) -> OutcomeClass:
    """Map a (transport, business) pair to the three-level outcome taxonomy.

    A workflow-level success wins regardless of transport; a transport success
    without a downstream success signal is only an attempt success.
    """
    if business.kind in WORKFLOW_SUCCESS_KINDS:
        return OutcomeClass.WORKFLOW_SUCCESS
    if transport.kind is TransportKind.SUCCESS:
        return OutcomeClass.ATTEMPT_SUCCESS
    return OutcomeClass.ATTEMPT_FAILURE


@dataclass(frozen=True)
class AttemptEvent:
    request_id: str
    operation: str
    provider: str
    region: str
    start_time: int
    end_time: int
    latency_ms: float
    transport: TransportOutcome
    business: BusinessOutcome = field(default_factory=BusinessOutcome)
    tenant: str | None = None
    timeout: bool = False
    retry_count: int = 0
    circuit_state: CircuitState = CircuitState.CLOSED
    cost: float = 0.0
    factor_list_version: str = ""
    trace_id: str = ""
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self) -> None:
        if not isinstance(self.circuit_state, CircuitState):
            object.__setattr__(self, "circuit_state", CircuitState(self.circuit_state))
        object.__setattr__(self, "cost", round(float(self.cost), _COST_DIGITS))

    @property
    def outcome_class(self) -> OutcomeClass:
        return classify_outcome(self.transport, self.business)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "request_id": self.request_id,
            "operation": self.operation,
            "provider": self.provider,
            "region": self.region,
            "tenant": self.tenant,
            "start_time": self.start_time,
            "end_time": self.end_time,
            "latency_ms": self.latency_ms,
            "timeout": self.timeout,
            "retry_count": self.retry_count,
            "circuit_state": self.circuit_state.value,
            "transport": self.transport.to_dict(),
            "business": self.business.to_dict(),
            "cost": self.cost,
            "factor_list_version": self.factor_list_version,
            "trace_id": self.trace_id,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"), ensure_ascii=False)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> AttemptEvent:
        return cls(
            schema_version=int(data["schema_version"]),
            request_id=data["request_id"],
            operation=data["operation"],
            provider=data["provider"],
            region=data["region"],
            tenant=data.get("tenant"),
            start_time=int(data["start_time"]),
            end_time=int(data["end_time"]),
            latency_ms=data["latency_ms"],
            timeout=bool(data["timeout"]),
            retry_count=int(data["retry_count"]),
            circuit_state=CircuitState(data["circuit_state"]),
            transport=TransportOutcome.from_dict(data["transport"]),
            business=BusinessOutcome.from_dict(data["business"]),
            cost=data["cost"],
            factor_list_version=data["factor_list_version"],
            trace_id=data["trace_id"],
        )

    @classmethod
    def from_json(cls, line: str) -> AttemptEvent:
        return cls.from_dict(json.loads(line))


def validate_event(event: AttemptEvent) -> list[str]:
    """Return every violated ``AttemptEvent`` invariant; an empty list means ok."""
    violations: list[str] = []
    if not isinstance(event.schema_version, int) or event.schema_version < 1:
        violations.append("schema version: must be a positive integer")
    if not event.request_id:
        violations.append("request id: must be non-empty")
    if not is_operation_id(event.operation):
        violations.append(f"operation id: {event.operation!r} is not an uppercase token")
    if not is_provider_id(event.provider):
        violations.append(f"provider id: {event.provider!r} is not a valid token")
    if not event.region:
        violations.append("region: must be non-empty")
    if event.end_time < event.start_time:
        violations.append("time order: end_time precedes start_time")
    if event.latency_ms < 0:
        violations.append("latency: must be non-negative")
    elif event.latency_ms != event.end_time - event.start_time:
        violations.append("latency: must equal end_time - start_time")
    if event.retry_count < 0:
        violations.append("retry count: must be >= 0")
    if event.cost < 0:
        violations.append("cost: must be non-negative")
    if event.timeout and event.transport.kind is not TransportKind.TIMEOUT:
        violations.append("timeout consistency: timeout flag requires transport kind timeout")
    if event.transport.kind is TransportKind.TIMEOUT and event.transport.status_code is not None:
        violations.append("timeout consistency: timeout carries no status code")
    return violations

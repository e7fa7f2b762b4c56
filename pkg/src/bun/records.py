"""Domain records held by the behavioral information base."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

from .literals import Literal, check_literal, is_ident, is_name

if TYPE_CHECKING:
    from .policy import Verdict


class RecordError(ValueError):
    """A record violates one of its invariants."""


class Outcome(str, enum.Enum):
    APPLIED = "applied"
    DENIED = "denied"
    FAILED = "failed"


class EventKind(str, enum.Enum):
    OBJECT_CHANGED = "object_changed"
    BEHAVIOR_RECORDED = "behavior_recorded"
    EXTERNAL_SIGNAL = "external_signal"


Delta = dict[str, tuple[Optional[Literal], Literal]]


def _check_id(kind: str, value: str) -> None:
    if not value or not is_ident(value):
        raise RecordError(f"{kind} id {value!r} is empty or malformed")


def _check_attrs(owner: str, attrs: dict[str, Literal]) -> None:
    for key, value in attrs.items():
        if not key or key.startswith(".") or key.endswith(".") or ".." in key:
            raise RecordError(f"{owner}: bad attribute path {key!r}")
        try:
            check_literal(value)
        except ValueError as exc:
            raise RecordError(f"{owner}: {key}: {exc}") from None


def _check_names(owner: str, what: str, names: frozenset[str]) -> None:
    for name in names:
        if not is_name(name):
            raise RecordError(f"{owner}: {what} entry {name!r} is not a valid name")


@dataclass
class SubjectRecord:
    id: str
    roles: frozenset[str] = frozenset()
    capabilities: frozenset[str] = frozenset()
    attributes: dict[str, Literal] = field(default_factory=dict)
    goals: tuple[str, ...] = ()

    def validate(self) -> None:
        _check_id("subject", self.id)
        _check_names(self.id, "role", frozenset(self.roles))
        _check_names(self.id, "capability", frozenset(self.capabilities))
        _check_attrs(self.id, self.attributes)


@dataclass
class ObjectRecord:
    id: str
    cls: str = "Thing"
    attributes: dict[str, Literal] = field(default_factory=dict)
    state: dict[str, Literal] = field(default_factory=dict)
    affordances: frozenset[str] = frozenset()
    tags: frozenset[str] = frozenset()

    def validate(self) -> None:
        _check_id("object", self.id)
        if not is_name(self.cls):
            raise RecordError(f"{self.id}: class {self.cls!r} is not a valid name")
        _check_names(self.id, "affordance", frozenset(self.affordances))
        _check_names(self.id, "tag", frozenset(self.tags))
        _check_attrs(self.id, self.attributes)
        _check_attrs(self.id, self.state)


class ModelKind(str, enum.Enum):
    THRESHOLD = "threshold"
    LINEAR = "linear_extrapolation"


@dataclass
class ForecastModel:
    """A forecast over one object state path.

    ``parameters`` keys: ``path``, ``bound``, ``direction`` (one of
    ``> >= < <=``) and, for linear extrapolation, ``window``.
    """

    model_id: str
    kind: ModelKind
    parameters: dict[str, Literal]

    def validate(self) -> None:
        _check_id("model", self.model_id)
        required = {"path", "bound", "direction"}
        if self.kind is ModelKind.LINEAR:
            required.add("window")
        missing = required - set(self.parameters)
        if missing:
            raise RecordError(f"model {self.model_id}: missing parameters {sorted(missing)}")
        if self.parameters["direction"] not in (">", ">=", "<", "<="):
            raise RecordError(f"model {self.model_id}: bad direction {self.parameters['direction']!r}")
        bound = self.parameters["bound"]
        if isinstance(bound, (bool, str)):
            raise RecordError(f"model {self.model_id}: bound must be numeric")
        if self.kind is ModelKind.LINEAR:
            window = self.parameters["window"]
            if isinstance(window, bool) or not isinstance(window, int) or window < 2:
                raise RecordError(f"model {self.model_id}: window must be an integer >= 2")


@dataclass
class BehaviorRecord:
    """One requested behavior ``subject:operation(object)`` and what became of it."""

    subject_id: str
    operation: str
    object_id: str
    verdict: "Verdict"
    outcome: Outcome
    logical_time: int
    object_class: str = ""
    args: dict[str, Literal] = field(default_factory=dict)
    context: dict[str, object] = field(default_factory=dict)
    state_delta: Delta = field(default_factory=dict)
    caused_by: Optional[int] = None
    cascade_depth: int = 0
    reason: Optional[str] = None
    behavior_id: Optional[int] = None


@dataclass(frozen=True)
class EventRecord:
    event_id: int
    kind: EventKind
    entity_id: str
    delta: Delta
    tags: frozenset[str]
    logical_time: int
    cause_behavior_id: Optional[int] = None

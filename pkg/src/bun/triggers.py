"""Information-driven dynamics: subscriptions, trigger rules and propagation governance.

Events from the change feed are delivered to matching subscriptions and
matched against event-condition-action trigger rules. Every attempt to fire
produces a FiringDecision, including the ones the governor suppresses
(duplicates inside the dedup window, chains past the depth cap, or requests
beyond the per-tick budget). Suppressed triggers are never retried.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

from .literals import Literal, LiteralError, format_literal, is_name, parse_literal
from .predicate import TRUE, BindingEnv, Expr, OpBinding, evaluate, namespaces, parse_predicate, to_text
from .records import EventKind, EventRecord, ObjectRecord, SubjectRecord
from .store import Store, StoreError
from .textfmt import Token, one, parse_int, parse_string, quote, split_clauses

EVENT_ENTITY = "$event.entity"
EVENT_ID = "$event.id"
DEDUP_FIELDS = ("trigger_id", "actor", "object_id")


class TriggerError(ValueError):
    pass


@dataclass(frozen=True)
class EventPattern:
    kind: Optional[EventKind] = None
    entity_id: Optional[str] = None
    tags: frozenset[str] = frozenset()
    path_prefix: Optional[str] = None

    def is_empty(self) -> bool:
        return self.kind is None and self.entity_id is None and not self.tags and self.path_prefix is None

    def matches(self, event: EventRecord) -> bool:
        if self.kind is not None and event.kind is not self.kind:
            return False
        if self.entity_id is not None and event.entity_id != self.entity_id:
            return False
        if not self.tags <= event.tags:
            return False
        if self.path_prefix is not None:
            prefix = self.path_prefix
            if not any(p == prefix or p.startswith(prefix + ".") for p in event.delta):
                return False
        return True

    def to_text(self) -> str:
        parts = []
        if self.kind is not None:
            parts.append(f"kind={self.kind.value}")
        if self.entity_id is not None:
            parts.append(f"entity={self.entity_id}")
        if self.tags:
            parts.append("tags=" + ",".join(sorted(self.tags)))
        if self.path_prefix is not None:
            parts.append(f"path={self.path_prefix}")
        return " ".join(parts)


def parse_pattern(toks: list[Token], anchor: Token) -> EventPattern:
    fields: dict[str, object] = {}
    for tok in toks:
        key, eq, value = tok.text.partition("=")
        if not eq or not value:
            raise tok.error(f"expected filter key=value, found {tok.text!r}")
        if key in fields:
            raise tok.error(f"duplicate filter {key!r}")
        if key == "kind":
            try:
                fields["kind"] = EventKind(value)
            except ValueError:
                raise tok.error(f"unknown event kind {value!r}") from None
        elif key == "entity":
            fields["entity_id"] = value
        elif key == "tags":
            fields["tags"] = frozenset(t for t in value.split(",") if t)
        elif key == "path":
            fields["path_prefix"] = value
        else:
            raise tok.error(f"unknown filter field {key!r}")
    pattern = EventPattern(**fields)  # type: ignore[arg-type]
    if pattern.is_empty():
        raise anchor.error("event pattern needs at least one filter")
    return pattern


@dataclass
class Subscription:
    subscription_id: str
    subscriber: str
    pattern: EventPattern
    created_at: int = 0


# ---------------------------------------------------------------------------
# Action templates and requests
# ---------------------------------------------------------------------------

Value = Union[Literal, "EventRef"]


@dataclass(frozen=True)
class EventRef:
    """A template value filled in from the triggering event."""

    name: str  # "$event.entity" or "$event.id"

    def resolve(self, event: Optional[EventRecord]) -> Literal:
        if event is None:
            raise TriggerError(f"{self.name} used without a triggering event")
        return event.entity_id if self.name == EVENT_ENTITY else event.event_id


def _value(tok: Token) -> Value:
    key, _, raw = tok.text.partition("=")
    if raw in (EVENT_ENTITY, EVENT_ID):
        return EventRef(raw)
    try:
        return parse_literal(raw, bare_strings=True)
    except LiteralError as exc:
        raise tok.error(str(exc)) from None


def _values(toks: Optional[list[Token]]) -> dict[str, Value]:
    out: dict[str, Value] = {}
    for tok in toks or ():
        key, eq, _ = tok.text.partition("=")
        if not eq or not key:
            raise tok.error(f"expected key=value, found {tok.text!r}")
        if key in out:
            raise tok.error(f"duplicate key {key!r}")
        out[key] = _value(tok)
    return out


def _format_values(values: Mapping[str, Value]) -> str:
    return " ".join(
        f"{k}={v.name if isinstance(v, EventRef) else format_literal(v)}" for k, v in sorted(values.items())
    )


@dataclass
class ActionTemplate:
    actor: str
    operation: str
    object_id: str  # literal id, EVENT_ENTITY, or "choice(a,b,...)" in agent scripts
    args: dict[str, Value] = field(default_factory=dict)
    effects: dict[str, Value] = field(default_factory=dict)
    expect: dict[str, Value] = field(default_factory=dict)

    def choices(self) -> Optional[tuple[str, ...]]:
        if self.object_id.startswith("choice(") and self.object_id.endswith(")"):
            return tuple(p for p in self.object_id[7:-1].split(",") if p)
        return None

    def literal_objects(self) -> tuple[str, ...]:
        """Object ids named directly (for reference checking)."""
        if self.object_id == EVENT_ENTITY:
            return ()
        return self.choices() or (self.object_id,)

    def resolve_object(self, event: Optional[EventRecord], rng=None) -> str:
        if self.object_id == EVENT_ENTITY:
            if event is None:
                raise TriggerError(f"{EVENT_ENTITY} used without a triggering event")
            return event.entity_id
        options = self.choices()
        if options is not None:
            if rng is None:
                raise TriggerError("choice(...) needs the scenario RNG")
            return rng.choice(options)
        return self.object_id

    def fill(self, values: Mapping[str, Value], event: Optional[EventRecord]) -> dict[str, Literal]:
        return {k: v.resolve(event) if isinstance(v, EventRef) else v for k, v in values.items()}

    def format_tail(self, with_actor: bool = True) -> str:
        parts = ["do"]
        if with_actor:
            parts.append(self.actor)
        parts += [self.operation, self.object_id]
        for word, values in (("args", self.args), ("sets", self.effects), ("expect", self.expect)):
            if values:
                parts += [word, _format_values(values)]
        return " ".join(parts)


def parse_action(do: list[Token], clauses: Mapping[str, list[Token]], anchor: Token,
                 actor: Optional[str] = None) -> ActionTemplate:
    want = 2 if actor is not None else 3
    if len(do) != want:
        shape = "<operation> <object>" if actor is not None else "<actor> <operation> <object>"
        raise anchor.error(f"'do' takes {shape}")
    if actor is None:
        actor = do[0].text
        do = do[1:]
    op, obj = do[0].text, do[1].text
    if not is_name(op):
        raise do[0].error(f"bad operation name {op!r}")
    return ActionTemplate(
        actor=actor,
        operation=op,
        object_id=obj,
        args=_values(clauses.get("args")),
        effects=_values(clauses.get("sets")),
        expect=_values(clauses.get("expect")),
    )


@dataclass
class BehaviorRequest:
    subject_id: str
    operation: str
    object_id: str
    args: dict[str, Literal] = field(default_factory=dict)
    effects: dict[str, Literal] = field(default_factory=dict)
    expect: dict[str, Literal] = field(default_factory=dict)
    caused_by: Optional[int] = None
    cascade_depth: int = 0
    tags: frozenset[str] = frozenset()
    origin: str = ""
    priority: int = 0
    event_id: Optional[int] = None


# ---------------------------------------------------------------------------
# Trigger rules and governance
# ---------------------------------------------------------------------------

@dataclass
class TriggerRule:
    trigger_id: str
    pattern: EventPattern
    action: ActionTemplate
    condition: Expr = TRUE
    priority: int = 0
    description: str = ""


CONDITION_NAMESPACES = frozenset({"object", "context"})


def check_trigger(rule: TriggerRule) -> None:
    if not rule.trigger_id:
        raise TriggerError("empty trigger id")
    if rule.pattern.is_empty():
        raise TriggerError(f"trigger {rule.trigger_id}: pattern needs at least one filter")
    extra = namespaces(rule.condition) - CONDITION_NAMESPACES
    if extra:
        raise TriggerError(
            f"trigger {rule.trigger_id}: condition may only reference object/context, not {sorted(extra)}"
        )
    if rule.action.choices() is not None:
        raise TriggerError(f"trigger {rule.trigger_id}: choice(...) is only available to agent scripts")


@dataclass
class PropagationPolicy:
    max_cascade_depth: int = 16
    dedup_window: int = 10
    dedup_key: tuple[str, ...] = DEDUP_FIELDS
    tick_budget: int = 1000

    def validate(self) -> None:
        for name in ("max_cascade_depth", "dedup_window", "tick_budget"):
            if getattr(self, name) < 1:
                raise TriggerError(f"{name} must be positive")
        if not self.dedup_key or not set(self.dedup_key) <= set(DEDUP_FIELDS):
            raise TriggerError(f"dedup_key must be a non-empty subset of {DEDUP_FIELDS}")


class Reason(str, enum.Enum):
    FIRED = "fired"
    CONDITION_FALSE = "condition_false"
    DEDUPED = "deduped"
    DEPTH_EXCEEDED = "depth_exceeded"
    BUDGET_EXHAUSTED = "budget_exhausted"


@dataclass(frozen=True)
class FiringDecision:
    trigger_id: str
    event_id: int
    fired: bool
    reason: Reason
    tick: int = 0


def event_context(event: EventRecord, tick: int, store: Store) -> dict[str, object]:
    """Context bindings visible to trigger and agent conditions."""
    ctx: dict[str, object] = {
        "logical_time": tick,
        "tags": event.tags,
        "event.id": event.event_id,
        "event.kind": event.kind.value,
        "event.entity": event.entity_id,
    }
    if event.cause_behavior_id is not None:
        ctx["event.cause"] = event.cause_behavior_id
    for path, (old, new) in event.delta.items():
        ctx[f"delta.{path}"] = new
        if old is not None:
            ctx[f"delta_old.{path}"] = old
    obj = store.get_object(event.entity_id)
    if event.kind is EventKind.OBJECT_CHANGED and obj is not None:
        for model in store.models():
            path = str(model.parameters["path"])
            if path not in obj.state:
                continue
            try:
                out = store.evaluate_model(model.model_id, store.series(obj.id, path))
            except StoreError:
                continue
            ctx[f"model.{model.model_id}.fired"] = out.fired
            ctx[f"model.{model.model_id}.projected"] = out.projected_value
    return ctx


def placeholder_object(entity_id: str) -> ObjectRecord:
    return ObjectRecord(id=entity_id, cls="Unknown")


class TriggerEngine:
    def __init__(self, store: Store, policy: Optional[PropagationPolicy] = None):
        self.store = store
        self.policy = policy or PropagationPolicy()
        self.policy.validate()
        self._subs: dict[str, Subscription] = {}
        self._queues: dict[str, deque[EventRecord]] = {}
        self._triggers: dict[str, TriggerRule] = {}
        self._pending: list[BehaviorRequest] = []
        self._dedup: dict[tuple, int] = {}
        self._spent: dict[int, int] = {}
        self.decisions: list[FiringDecision] = []

    # -- publish/subscribe --------------------------------------------------

    def subscribe(self, sub: Subscription) -> str:
        if self.store.get_subject(sub.subscriber) is None:
            raise TriggerError(f"unknown subscriber {sub.subscriber!r}")
        if sub.pattern.is_empty():
            raise TriggerError("subscription pattern needs at least one filter")
        self._subs[sub.subscription_id] = sub
        self._queues.setdefault(sub.subscription_id, deque())
        return sub.subscription_id

    def unsubscribe(self, subscription_id: str) -> None:
        self._subs.pop(subscription_id, None)
        self._queues.pop(subscription_id, None)

    def subscriptions(self) -> list[Subscription]:
        return [self._subs[k] for k in sorted(self._subs)]

    def publish(self, event: EventRecord) -> int:
        delivered = 0
        for sub_id in sorted(self._subs):
            if self._subs[sub_id].pattern.matches(event):
                self._queues[sub_id].append(event)
                delivered += 1
        return delivered

    def take_deliveries(self, subscriber: str) -> list[tuple[Subscription, EventRecord]]:
        """Pending deliveries for ``subscriber`` ordered by (event_id, subscription_id)."""
        out = []
        for sub_id in sorted(self._subs):
            sub = self._subs[sub_id]
            if sub.subscriber != subscriber:
                continue
            queue = self._queues[sub_id]
            while queue:
                out.append((sub, queue.popleft()))
        out.sort(key=lambda pair: (pair[1].event_id, pair[0].subscription_id))
        return out

    def pending_deliveries(self) -> int:
        return sum(len(q) for q in self._queues.values())

    # -- triggers -----------------------------------------------------------

    def register_trigger(self, rule: TriggerRule) -> str:
        check_trigger(rule)
        if self.store.get_subject(rule.action.actor) is None:
            raise TriggerError(f"trigger {rule.trigger_id}: unknown actor {rule.action.actor!r}")
        self._triggers[rule.trigger_id] = rule
        return rule.trigger_id

    def triggers(self) -> list[TriggerRule]:
        return [self._triggers[k] for k in sorted(self._triggers)]

    def match_triggers(self, event: EventRecord) -> list[TriggerRule]:
        matched = [t for t in self._triggers.values() if t.pattern.matches(event)]
        matched.sort(key=lambda t: (-t.priority, t.trigger_id))
        return matched

    def govern(self, origin: str, actor: str, object_id: str, event: EventRecord, tick: int,
               condition_holds: bool = True) -> tuple[FiringDecision, Optional[int]]:
        """Apply the propagation policy to one firing attempt and record the decision.

        Returns the decision and, when fired, the cascade depth of the new request.
        """
        policy = self.policy
        parts = {"trigger_id": origin, "actor": actor, "object_id": object_id}
        key = tuple(parts[f] for f in policy.dedup_key)
        parent = self.store.get_behavior(event.cause_behavior_id) if event.cause_behavior_id else None
        depth = parent.cascade_depth + 1 if parent is not None else 0
        if not condition_holds:
            reason = Reason.CONDITION_FALSE
        elif key in self._dedup and tick - self._dedup[key] < policy.dedup_window:
            reason = Reason.DEDUPED
        elif depth > policy.max_cascade_depth:
            reason = Reason.DEPTH_EXCEEDED
        elif self._spent.get(tick, 0) >= policy.tick_budget:
            reason = Reason.BUDGET_EXHAUSTED
        else:
            reason = Reason.FIRED
            self._dedup[key] = tick
            self._spent[tick] = self._spent.get(tick, 0) + 1
        decision = FiringDecision(origin, event.event_id, reason is Reason.FIRED, reason, tick)
        self.decisions.append(decision)
        return decision, depth if decision.fired else None

    def fire(self, trigger: TriggerRule, event: EventRecord, tick: int) -> tuple[FiringDecision, Optional[BehaviorRequest]]:
        action = trigger.action
        object_id = action.resolve_object(event)
        actor = self.store.get_subject(action.actor) or SubjectRecord(id=action.actor)
        obj = self.store.get_object(event.entity_id) or placeholder_object(event.entity_id)
        env = BindingEnv(actor, obj, OpBinding(action.operation, {}), event_context(event, tick, self.store))
        holds = evaluate(trigger.condition, env).value
        decision, depth = self.govern(trigger.trigger_id, action.actor, object_id, event, tick, holds)
        if not decision.fired:
            return decision, None
        request = BehaviorRequest(
            subject_id=action.actor,
            operation=action.operation,
            object_id=object_id,
            args=action.fill(action.args, event),
            effects=action.fill(action.effects, event),
            expect=action.fill(action.expect, event),
            caused_by=event.cause_behavior_id if depth else None,
            cascade_depth=depth or 0,
            tags=event.tags,
            origin=trigger.trigger_id,
            priority=trigger.priority,
            event_id=event.event_id,
        )
        self._pending.append(request)
        return decision, request

    def process(self, event: EventRecord, tick: int) -> list[FiringDecision]:
        """Match and fire every trigger for ``event``."""
        return [self.fire(t, event, tick)[0] for t in self.match_triggers(event)]

    def drain_pending(self, tick: int) -> list[BehaviorRequest]:
        out = sorted(self._pending, key=lambda r: (-r.priority, r.origin, r.event_id or 0))
        self._pending = []
        return out

    def has_pending(self) -> bool:
        return bool(self._pending)


# ---------------------------------------------------------------------------
# Text form
# ---------------------------------------------------------------------------

def format_trigger(rule: TriggerRule) -> str:
    parts = [f"trigger {rule.trigger_id} priority {rule.priority} on {rule.pattern.to_text()}"]
    if rule.condition != TRUE:
        parts.append(f"when {to_text(rule.condition)}")
    parts.append(rule.action.format_tail())
    if rule.description:
        parts.append(f"desc {quote(rule.description)}")
    return " ".join(parts)


def parse_condition(tok: Optional[Token]) -> Expr:
    if tok is None:
        return TRUE
    try:
        return parse_predicate(tok.text)
    except ValueError as exc:
        raise tok.error(f"bad condition: {exc}") from None


def parse_trigger(toks: list[Token]) -> TriggerRule:
    head = toks[0]
    if len(toks) < 2:
        raise head.error("trigger needs an id")
    c = split_clauses(toks[2:], ("priority", "on", "when", "do", "args", "sets", "expect", "desc"))
    if "on" not in c or "do" not in c:
        raise head.error("trigger needs 'on <pattern>' and 'do <actor> <operation> <object>'")
    prio = one(c, "priority", head, required=False)
    desc = one(c, "desc", head, required=False)
    rule = TriggerRule(
        trigger_id=toks[1].text,
        pattern=parse_pattern(c["on"], head),
        action=parse_action(c["do"], c, head),
        condition=parse_condition(one(c, "when", head, required=False)),
        priority=parse_int(prio, "priority") if prio else 0,
        description=parse_string(desc) if desc else "",
    )
    try:
        check_trigger(rule)
    except TriggerError as exc:
        raise head.error(str(exc)) from None
    return rule


__all__ = [
    "ActionTemplate",
    "BehaviorRequest",
    "EventPattern",
    "EventRef",
    "FiringDecision",
    "PropagationPolicy",
    "Reason",
    "Subscription",
    "TriggerEngine",
    "TriggerError",
    "TriggerRule",
    "event_context",
    "format_trigger",
    "parse_trigger",
]

"""Validity decisions for requested behaviors, plus the built-in coordination rules.

A behavior ``subject:operation(object)`` is allowed when the affordance gate
passes (the object affords the operation and the subject is capable of it)
and every applicable rule holds on all three of its constraints: ``p1`` over
the subject, ``p2`` over the object and ``p3`` over the operation and context.
Rules only ever conjoin, so adding one can never turn a deny into an allow.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Optional, Sequence

from .literals import Literal, is_ident, is_name
from .predicate import (
    TRUE,
    BindingEnv,
    Expr,
    OpBinding,
    atom_entity,
    atoms,
    blame,
    evaluate,
    parse_predicate,
    to_text,
)
from .records import BehaviorRecord, ObjectRecord, Outcome, SubjectRecord
from .textfmt import Token, one, parse_int, parse_string, quote, split_clauses

PARTS = ("p1", "p2", "p3")
PART_NAMESPACES = {
    "p1": frozenset({"subject"}),
    "p2": frozenset({"object"}),
    "p3": frozenset({"op", "context"}),
}
WILDCARD = "*"


class RuleError(ValueError):
    pass


class UnresolvedReference(LookupError):
    pass


@dataclass
class ValidityRule:
    rule_id: str
    operation: str = WILDCARD
    object_class: str = WILDCARD
    p1: Expr = TRUE
    p2: Expr = TRUE
    p3: Expr = TRUE
    description: str = ""

    def part(self, name: str) -> Expr:
        return getattr(self, name)

    def matches(self, operation: str, object_class: str) -> bool:
        return self.operation in (WILDCARD, operation) and self.object_class in (WILDCARD, object_class)


def namespace_violations(rule: ValidityRule) -> list[str]:
    problems = []
    for part in PARTS:
        allowed = PART_NAMESPACES[part]
        for atom in atoms(rule.part(part)):
            entity = atom_entity(atom)
            if entity not in allowed:
                problems.append(
                    f"rule {rule.rule_id}: {part} may only reference {'/'.join(sorted(allowed))}, "
                    f"but {to_text(atom)} references {entity}"
                )
    return problems


def check_rule(rule: ValidityRule) -> None:
    if not rule.rule_id or not is_ident(rule.rule_id):
        raise RuleError(f"bad rule id {rule.rule_id!r}")
    for value, what in ((rule.operation, "operation"), (rule.object_class, "object class")):
        if value != WILDCARD and not is_name(value):
            raise RuleError(f"rule {rule.rule_id}: bad {what} pattern {value!r}")
    problems = namespace_violations(rule)
    if problems:
        raise RuleError("; ".join(problems))


class RuleSet:
    """Validity rules indexed by their (operation, object class) scope."""

    def __init__(self, rules: Iterable[ValidityRule] = ()):
        self._rules: dict[str, ValidityRule] = {}
        self._index: dict[tuple[str, str], set[str]] = {}
        for rule in rules:
            self.register(rule)

    def register(self, rule: ValidityRule) -> str:
        check_rule(rule)
        old = self._rules.get(rule.rule_id)
        if old is not None:
            self._index[(old.operation, old.object_class)].discard(old.rule_id)
        self._rules[rule.rule_id] = rule
        self._index.setdefault((rule.operation, rule.object_class), set()).add(rule.rule_id)
        return rule.rule_id

    def applicable(self, operation: str, object_class: str) -> list[ValidityRule]:
        ids: set[str] = set()
        for key in (
            (operation, object_class),
            (operation, WILDCARD),
            (WILDCARD, object_class),
            (WILDCARD, WILDCARD),
        ):
            ids |= self._index.get(key, set())
        return [self._rules[i] for i in sorted(ids)]

    def get(self, rule_id: str) -> Optional[ValidityRule]:
        return self._rules.get(rule_id)

    def __iter__(self) -> Iterator[ValidityRule]:
        return iter(self._rules[i] for i in sorted(self._rules))

    def __len__(self) -> int:
        return len(self._rules)


def register_rule(rules: RuleSet, rule: ValidityRule) -> str:
    return rules.register(rule)


# ---------------------------------------------------------------------------
# Verdicts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RuleResult:
    rule_id: str
    p1: bool
    p2: bool
    p3: bool

    @property
    def holds(self) -> bool:
        return self.p1 and self.p2 and self.p3


@dataclass(frozen=True)
class Failure:
    """Where a deny came from. ``rule_id`` is None for the affordance gate."""

    rule_id: Optional[str]
    part: str  # "gate", "P1", "P2" or "P3"
    atoms: tuple[str, ...] = ()


@dataclass(frozen=True)
class Verdict:
    allow: bool
    evaluated: tuple[RuleResult, ...] = ()
    first_failure: Optional[Failure] = None
    gate_passed: bool = True

    def summary(self) -> str:
        if self.allow:
            return "allow"
        f = self.first_failure
        if f is None:
            return "deny"
        if f.rule_id is None:
            return f"deny:{f.part}"
        return f"deny:{f.part}:{f.rule_id}"

    @classmethod
    def from_summary(cls, text: str) -> "Verdict":
        """Partial verdict rebuilt from an exported summary."""
        if text == "allow":
            return cls(True)
        parts = text.split(":")
        if parts[0] != "deny":
            raise ValueError(f"bad verdict summary {text!r}")
        if len(parts) == 1:
            return cls(False)
        if len(parts) == 2:
            return cls(False, (), Failure(None, parts[1]), gate_passed=parts[1] != "gate")
        return cls(False, (), Failure(parts[2], parts[1]))

    def explain(self) -> list[str]:
        lines = [f"verdict: {'ALLOW' if self.allow else 'DENY'}"]
        lines.append(f"gate: {'pass' if self.gate_passed else 'fail'}")
        for r in self.evaluated:
            lines.append(f"rule {r.rule_id}: P1={_tf(r.p1)} P2={_tf(r.p2)} P3={_tf(r.p3)}")
        if self.first_failure is not None:
            f = self.first_failure
            where = "gate" if f.rule_id is None else f"rule {f.rule_id} {f.part}"
            lines.append(f"first failure: {where}")
            for atom in f.atoms:
                lines.append(f"  failing atom: {atom}")
        return lines


def _tf(value: bool) -> str:
    return "true" if value else "false"


@dataclass
class ValidityRequest:
    subject_id: str
    operation: str
    object_id: str
    args: Mapping[str, Literal] = field(default_factory=dict)
    context: Mapping[str, object] = field(default_factory=dict)


def gate_failures(subject: SubjectRecord, obj: ObjectRecord, operation: str) -> list[str]:
    missing = []
    if operation not in obj.affordances:
        missing.append(f"(affords object {operation})")
    if operation not in subject.capabilities:
        missing.append(f"(has_capability subject {operation})")
    return missing


def decide(
    subject: SubjectRecord,
    obj: ObjectRecord,
    operation: str,
    args: Mapping[str, Literal],
    context: Mapping[str, object],
    rules: RuleSet,
) -> Verdict:
    gate = gate_failures(subject, obj, operation)
    env = BindingEnv(subject, obj, OpBinding(operation, dict(args)), context)
    results = []
    failure: Optional[Failure] = None
    for rule in rules.applicable(operation, obj.cls):
        values = [evaluate(rule.part(p), env).value for p in PARTS]
        results.append(RuleResult(rule.rule_id, *values))
        if failure is None and not all(values):
            idx = values.index(False)
            culprits = blame(rule.part(PARTS[idx]), env, want=False)
            failure = Failure(rule.rule_id, PARTS[idx].upper(), tuple(to_text(c) for c in culprits))
    if gate:
        failure = Failure(None, "gate", tuple(gate))
    allow = not gate and all(r.holds for r in results)
    return Verdict(allow, tuple(results), None if allow else failure, gate_passed=not gate)


def check_validity(request: ValidityRequest, rules: RuleSet, store) -> Verdict:
    """Decide ``request`` against ``rules`` using subject and object records from ``store``."""
    subject = store.get_subject(request.subject_id)
    obj = store.get_object(request.object_id)
    missing = []
    if subject is None:
        missing.append(f"subject {request.subject_id!r}")
    if obj is None:
        missing.append(f"object {request.object_id!r}")
    if missing:
        raise UnresolvedReference("unresolved " + " and ".join(missing))
    return decide(subject, obj, request.operation, request.args, request.context, rules)


# ---------------------------------------------------------------------------
# Mutual exclusion
# ---------------------------------------------------------------------------

class MutexGuard:
    """Write-lock ledger: one write per object per time slot.

    A slot is ``tick // granularity``; granularity 1 means one tick.
    """

    def __init__(self, granularity: int = 1):
        if granularity < 1:
            raise ValueError("mutex granularity must be >= 1")
        self.granularity = granularity
        self._held: dict[tuple[str, int], int] = {}
        self._lock = threading.Lock()

    def acquire(self, object_id: str, tick: int, behavior_id: int) -> bool:
        key = (object_id, tick // self.granularity)
        with self._lock:
            holder = self._held.setdefault(key, behavior_id)
        return holder == behavior_id

    def holder(self, object_id: str, tick: int) -> Optional[int]:
        return self._held.get((object_id, tick // self.granularity))


def acquire_write_mutex(guard: MutexGuard, object_id: str, tick: int, behavior_id: int) -> bool:
    return guard.acquire(object_id, tick, behavior_id)


# ---------------------------------------------------------------------------
# Negotiation timeout
# ---------------------------------------------------------------------------

RESPONDER_ARG = "responder"
REPLY_ARG = "reply_to"


@dataclass(frozen=True)
class NegotiationRule:
    """Requests with ``operation`` must be answered by their responder within ``deadline`` ticks."""

    rule_id: str
    operation: str
    deadline: int
    fallback: str


@dataclass(frozen=True)
class ReassignmentDirective:
    request_id: int
    responder: str
    fallback: str
    fire_tick: int
    object_id: str
    rule_id: str = ""


def is_response(record: BehaviorRecord, request: BehaviorRecord, responder: str) -> bool:
    if record.subject_id != responder or record.outcome is not Outcome.APPLIED:
        return False
    return record.caused_by == request.behavior_id or record.args.get(REPLY_ARG) == request.behavior_id


def deadline_tick(request: BehaviorRecord, deadline_ticks: int) -> int:
    # a zero deadline still waits for the next tick boundary
    return request.logical_time + max(deadline_ticks, 1)


def negotiation_timeout_check(
    request: BehaviorRecord,
    log: Sequence[BehaviorRecord],
    deadline_ticks: int,
    fallback_subject: str,
    now: Optional[int] = None,
    rule_id: str = "",
) -> Optional[ReassignmentDirective]:
    """Reassignment directive if the responder missed the deadline, else None.

    A response is an applied behavior by the responder that is caused by the
    request or carries ``reply_to=<request id>``, executed before the
    deadline tick. With ``now`` given, nothing is returned before the deadline.
    """
    responder = request.args.get(RESPONDER_ARG)
    if not isinstance(responder, str) or request.behavior_id is None:
        raise ValueError("not a logged request: needs a behavior_id and a responder argument")
    due = deadline_tick(request, deadline_ticks)
    if now is not None and now < due:
        return None
    for record in log:
        if record.logical_time < due and is_response(record, request, responder):
            return None
    return ReassignmentDirective(
        request.behavior_id, responder, fallback_subject, due, request.object_id, rule_id
    )


# ---------------------------------------------------------------------------
# Text form
# ---------------------------------------------------------------------------

def format_rule(rule: ValidityRule) -> str:
    text = (
        f"rule {rule.rule_id} scope {rule.operation} {rule.object_class} "
        f"p1 {to_text(rule.p1)} p2 {to_text(rule.p2)} p3 {to_text(rule.p3)}"
    )
    if rule.description:
        text += f" desc {quote(rule.description)}"
    return text


def _expr(tok: Optional[Token]) -> Expr:
    if tok is None:
        return TRUE
    try:
        return parse_predicate(tok.text)
    except ValueError as exc:
        raise tok.error(f"bad predicate: {exc}") from None


def parse_rule(toks: list[Token]) -> ValidityRule:
    head = toks[0]
    if len(toks) < 2:
        raise head.error("rule needs an id")
    clauses = split_clauses(toks[2:], ("scope", "p1", "p2", "p3", "desc"))
    scope = clauses.get("scope")
    if scope is None or len(scope) != 2:
        raise head.error("rule needs 'scope <operation|*> <class|*>'")
    desc = one(clauses, "desc", head, required=False)
    rule = ValidityRule(
        rule_id=toks[1].text,
        operation=scope[0].text,
        object_class=scope[1].text,
        p1=_expr(one(clauses, "p1", head, required=False)),
        p2=_expr(one(clauses, "p2", head, required=False)),
        p3=_expr(one(clauses, "p3", head, required=False)),
        description=parse_string(desc) if desc else "",
    )
    try:
        check_rule(rule)
    except RuleError as exc:
        raise head.error(str(exc)) from None
    return rule


def format_negotiation(rule: NegotiationRule) -> str:
    return f"negotiate {rule.rule_id} on {rule.operation} deadline {rule.deadline} fallback {rule.fallback}"


def parse_negotiation(toks: list[Token]) -> NegotiationRule:
    head = toks[0]
    if len(toks) < 2:
        raise head.error("negotiate needs an id")
    clauses = split_clauses(toks[2:], ("on", "deadline", "fallback"))
    deadline = parse_int(one(clauses, "deadline", head), "deadline")
    if deadline < 0:
        raise head.error("deadline must be >= 0")
    op = one(clauses, "on", head).text
    if not is_name(op):
        raise head.error(f"bad operation {op!r}")
    return NegotiationRule(toks[1].text, op, deadline, one(clauses, "fallback", head).text)


__all__ = [
    "Failure",
    "MutexGuard",
    "NegotiationRule",
    "ReassignmentDirective",
    "RuleError",
    "RuleResult",
    "RuleSet",
    "UnresolvedReference",
    "ValidityRequest",
    "ValidityRule",
    "Verdict",
    "acquire_write_mutex",
    "check_validity",
    "decide",
    "negotiation_timeout_check",
    "register_rule",
]

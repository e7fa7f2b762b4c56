"""Scenario files: initial BIB contents, agent scripts and scheduled external events.

Format (``bun-scenario v1``)::

    bun-scenario v1
    name traffic
    seed 42
    set max_cascade_depth 16        # propagation policy and mutex overrides
    set time_unit "1 tick = 1 second"

    SUBJECTS
    subject vehicle1 roles driver caps reroute attrs region="A"
    OBJECTS
    object route1 class Route affords reroute tags regionA state mode="normal"
    MODELS
    model hot threshold path temperature bound 80 direction >
    RULES
    rule r1 scope reroute Route p1 (has_role subject driver) p2 (and) p3 (and)
    negotiate handoff on request deadline 5 fallback agentC
    TRIGGERS
    trigger t1 priority 5 on kind=object_changed entity=sensor1 when (...) do gateway log incident_log sets status="accident"
    AGENTS
    agent vehicle1
      on kind=object_changed entity=incident_log tags=regionA do reroute route1 sets mode="detour"
      every 2 from 1 until 9 when (...) do reroute route1
      at 3 do reroute choice(route1,route2)
      fail at 5
    EVENTS
    at 1 object_changed sensor1 accident=true tags regionA
    at 2 external_signal weather storm=true

Every section is optional. ``$event.entity`` and ``$event.id`` may stand in
for the target object or an argument value in reactive templates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

from .literals import Literal, parse_literal, type_name
from .policy import NegotiationRule, ValidityRule, parse_negotiation, parse_rule
from .predicate import TRUE, Expr, validate_predicate
from .records import EventKind, ForecastModel, ObjectRecord, SubjectRecord
from .store import Store, parse_model, parse_object, parse_subject
from .textfmt import (
    FormatError,
    LogicalLine,
    Token,
    logical_lines,
    one,
    parse_assignments,
    parse_int,
    parse_name_list,
    parse_string,
    split_clauses,
    tokenize,
)
from .triggers import (
    EVENT_ENTITY,
    ActionTemplate,
    EventPattern,
    PropagationPolicy,
    TriggerError,
    TriggerRule,
    parse_action,
    parse_condition,
    parse_pattern,
    parse_trigger,
)

HEADER = "bun-scenario"
SUPPORTED_VERSIONS = ("v1",)
SECTIONS = ("SUBJECTS", "OBJECTS", "MODELS", "RULES", "TRIGGERS", "AGENTS", "EVENTS")


class ScenarioError(FormatError):
    def __init__(self, message: str, line: int = 0, column: int = 0, problems: Optional[list[str]] = None):
        super().__init__(message, line, column)
        self.problems = problems or []


@dataclass
class ReactiveClause:
    pattern: EventPattern
    template: ActionTemplate
    condition: Expr = TRUE


@dataclass
class PeriodicClause:
    every: int
    template: ActionTemplate
    start: int = 0
    until: Optional[int] = None
    condition: Expr = TRUE

    def due(self, tick: int) -> bool:
        if tick < self.start or (self.until is not None and tick > self.until):
            return False
        return (tick - self.start) % self.every == 0

    def remaining(self, tick: int) -> bool:
        """True if the clause fires at ``tick`` or later."""
        if self.until is None:
            return True
        first = max(tick, self.start)
        offset = (first - self.start) % self.every
        if offset:
            first += self.every - offset
        return first <= self.until


@dataclass
class AgentScript:
    subject_id: str
    reactive: list[ReactiveClause] = field(default_factory=list)
    periodic: list[PeriodicClause] = field(default_factory=list)
    fail_at: Optional[int] = None


@dataclass
class ScheduledEvent:
    tick: int
    kind: EventKind
    entity_id: str
    payload: dict[str, Literal] = field(default_factory=dict)
    tags: frozenset[str] = frozenset()


@dataclass
class Scenario:
    name: str = "unnamed"
    version: str = "v1"
    seed: int = 0
    policy: PropagationPolicy = field(default_factory=PropagationPolicy)
    mutex_granularity: int = 1
    settings: dict[str, Literal] = field(default_factory=dict)
    subjects: list[SubjectRecord] = field(default_factory=list)
    objects: list[ObjectRecord] = field(default_factory=list)
    models: list[ForecastModel] = field(default_factory=list)
    rules: list[ValidityRule] = field(default_factory=list)
    negotiations: list[NegotiationRule] = field(default_factory=list)
    triggers: list[TriggerRule] = field(default_factory=list)
    agents: list[AgentScript] = field(default_factory=list)
    events: list[ScheduledEvent] = field(default_factory=list)

    def build_store(self) -> Store:
        store = Store()
        for entity in [*self.subjects, *self.objects, *self.models]:
            store.put_entity(entity)
        for rule in self.rules:
            store.register_rule(rule)
        for neg in self.negotiations:
            store.register_negotiation(neg)
        return store


def _apply_setting(sc: Scenario, key: Token, value: Token) -> None:
    name = key.text
    if name in ("max_cascade_depth", "dedup_window", "tick_budget"):
        setattr(sc.policy, name, parse_int(value, name))
    elif name == "dedup_key":
        sc.policy.dedup_key = tuple(p for p in parse_string(value).split(",") if p)
    elif name == "mutex_granularity":
        sc.mutex_granularity = parse_int(value, name)
    else:
        sc.settings[name] = parse_literal(value.text, bare_strings=True)


def _parse_agent_clause(toks: list[Token], agent: AgentScript) -> None:
    head = toks[0]
    word = head.text
    if word == "fail":
        if len(toks) != 3 or toks[1].text != "at":
            raise head.error("expected 'fail at <tick>'")
        if agent.fail_at is not None:
            raise head.error(f"agent {agent.subject_id} already has a failure tick")
        agent.fail_at = parse_int(toks[2], "failure tick")
        return
    keys = ("when", "do", "args", "sets", "expect")
    if word == "on":
        split = next((i for i, t in enumerate(toks) if t.text in ("when", "do")), len(toks))
        pattern = parse_pattern(toks[1:split], head)
        c = split_clauses(toks[split:], keys)
        if "do" not in c:
            raise head.error("reactive clause needs 'do <operation> <object>'")
        template = parse_action(c["do"], c, head, actor=agent.subject_id)
        cond = parse_condition(one(c, "when", head, required=False))
        agent.reactive.append(ReactiveClause(pattern, template, cond))
        return
    if word in ("every", "at"):
        c = split_clauses(toks, ("every", "at", "from", "until", *keys))
        if "do" not in c:
            raise head.error(f"{word} clause needs 'do <operation> <object>'")
        template = parse_action(c["do"], c, head, actor=agent.subject_id)
        cond = parse_condition(one(c, "when", head, required=False))
        if word == "at":
            if "from" in c or "until" in c:
                raise head.error("'at' clauses take a single tick")
            tick = parse_int(one(c, "at", head), "tick")
            clause = PeriodicClause(1, template, tick, tick, cond)
        else:
            start = one(c, "from", head, required=False)
            until = one(c, "until", head, required=False)
            clause = PeriodicClause(
                parse_int(one(c, "every", head), "period"),
                template,
                parse_int(start, "start tick") if start else 0,
                parse_int(until, "end tick") if until else None,
                cond,
            )
            if clause.every < 1:
                raise head.error("period must be >= 1")
        if clause.start < 0:
            raise head.error("ticks must be non-negative")
        agent.periodic.append(clause)
        return
    raise head.error(f"unknown agent clause {word!r}")


def _parse_event(toks: list[Token]) -> ScheduledEvent:
    head = toks[0]
    if head.text != "at" or len(toks) < 4:
        raise head.error("expected 'at <tick> object_changed|external_signal <entity> key=value... [tags a,b]'")
    tick = parse_int(toks[1], "tick")
    if tick < 0:
        raise toks[1].error("ticks must be non-negative")
    try:
        kind = EventKind(toks[2].text)
    except ValueError:
        raise toks[2].error(f"unknown event kind {toks[2].text!r}") from None
    if kind is EventKind.BEHAVIOR_RECORDED:
        raise toks[2].error("behavior_recorded events cannot be scheduled")
    rest = toks[4:]
    tags: frozenset[str] = frozenset()
    if any(t.text == "tags" for t in rest):
        idx = next(i for i, t in enumerate(rest) if t.text == "tags")
        if idx != len(rest) - 2:
            raise rest[idx].error("'tags a,b' must end the event line")
        tags = parse_name_list(rest[idx + 1])
        rest = rest[:idx]
    payload = parse_assignments(rest)
    if kind is EventKind.OBJECT_CHANGED and not payload:
        raise head.error("object_changed events need at least one key=value")
    return ScheduledEvent(tick, kind, toks[3].text, payload, tags)


def _statements(lines: list[LogicalLine]) -> list[list[Token]]:
    """Token lists per statement.

    A line indented deeper than the statement it follows continues it. In
    AGENTS, clause lines are indented under their ``agent`` line, so only
    lines indented deeper than a clause continue it.
    """
    out: list[list[Token]] = []
    section = None
    last_indent = 0
    for line in lines:
        toks = tokenize(line)
        if len(toks) == 1 and toks[0].text in SECTIONS:
            section = toks[0].text
            out.append(toks)
            last_indent = line.indent
            continue
        opener = out and out[-1][0].text not in SECTIONS and out[-1][0].text != "agent"
        if section is not None and opener and line.indent > last_indent:
            out[-1].extend(toks)
        else:
            out.append(toks)
            last_indent = line.indent
    return out


def parse_scenario(text: str) -> Scenario:
    """Parse without cross-reference checks."""
    lines = logical_lines(text)
    if not lines:
        raise ScenarioError(f"empty scenario: expected '{HEADER} v1' header", 1, 1)
    first = tokenize(lines[0])
    if len(first) != 2 or first[0].text != HEADER:
        raise ScenarioError(f"first line must be '{HEADER} <version>'", lines[0].lineno, 1)
    sc = Scenario(version=first[1].text)
    if sc.version not in SUPPORTED_VERSIONS:
        raise ScenarioError(f"unsupported scenario version {sc.version!r}", lines[0].lineno, first[1].col)
    section: Optional[str] = None
    agent: Optional[AgentScript] = None
    for toks in _statements(lines[1:]):
        head = toks[0]
        if len(toks) == 1 and head.text in SECTIONS:
            section = head.text
            agent = None
            continue
        try:
            if section is None:
                if head.text == "name" and len(toks) == 2:
                    sc.name = parse_string(toks[1])
                elif head.text == "seed" and len(toks) == 2:
                    sc.seed = parse_int(toks[1], "seed")
                elif head.text == "set" and len(toks) == 3:
                    _apply_setting(sc, toks[1], toks[2])
                else:
                    raise head.error(f"unexpected header line starting {head.text!r}")
            elif section == "SUBJECTS" and head.text == "subject":
                sc.subjects.append(parse_subject(toks))
            elif section == "OBJECTS" and head.text == "object":
                sc.objects.append(parse_object(toks))
            elif section == "MODELS" and head.text == "model":
                sc.models.append(parse_model(toks))
            elif section == "RULES" and head.text == "rule":
                sc.rules.append(parse_rule(toks))
            elif section == "RULES" and head.text == "negotiate":
                sc.negotiations.append(parse_negotiation(toks))
            elif section == "TRIGGERS" and head.text == "trigger":
                sc.triggers.append(parse_trigger(toks))
            elif section == "AGENTS" and head.text == "agent":
                if len(toks) != 2:
                    raise head.error("expected 'agent <subject id>'")
                agent = AgentScript(toks[1].text)
                sc.agents.append(agent)
            elif section == "AGENTS" and agent is not None:
                _parse_agent_clause(toks, agent)
            elif section == "EVENTS":
                sc.events.append(_parse_event(toks))
            else:
                raise head.error(f"unexpected {head.text!r} in section {section}")
        except FormatError as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise ScenarioError(exc.message, exc.line, exc.column) from None
        except TriggerError as exc:
            raise ScenarioError(str(exc), head.line, head.col) from None
    try:
        sc.policy.validate()
    except TriggerError as exc:
        raise ScenarioError(str(exc)) from None
    if sc.mutex_granularity < 1:
        raise ScenarioError("mutex_granularity must be >= 1")
    return sc


def reference_problems(sc: Scenario) -> list[str]:
    """Every unresolved or duplicated id, in a stable order."""
    problems: list[str] = []
    subjects = [s.id for s in sc.subjects]
    objects = [o.id for o in sc.objects]
    models = [m.model_id for m in sc.models]
    for kind, ids in (("subject", subjects), ("object", objects), ("model", models)):
        seen = set()
        for i in ids:
            if i in seen:
                problems.append(f"duplicate {kind} id {i!r}")
            seen.add(i)
    for a, b in (("subject", "object"), ("subject", "model"), ("object", "model")):
        pool = {"subject": subjects, "object": objects, "model": models}
        for clash in sorted(set(pool[a]) & set(pool[b])):
            problems.append(f"id {clash!r} names both a {a} and a {b}")
    subj, objs = set(subjects), set(objects)

    def need_subject(sid: str, where: str) -> None:
        if sid not in subj:
            problems.append(f"{where}: undefined subject {sid!r}")

    def need_objects(template: ActionTemplate, where: str) -> None:
        for oid in template.literal_objects():
            if oid not in objs:
                problems.append(f"{where}: undefined object {oid!r}")

    def need_pattern(pattern: EventPattern, where: str) -> None:
        if pattern.kind is EventKind.OBJECT_CHANGED and pattern.entity_id is not None and pattern.entity_id not in objs:
            problems.append(f"{where}: pattern names undefined object {pattern.entity_id!r}")

    for neg in sc.negotiations:
        need_subject(neg.fallback, f"negotiate {neg.rule_id}")
    seen_triggers = set()
    for trig in sc.triggers:
        where = f"trigger {trig.trigger_id}"
        if trig.trigger_id in seen_triggers:
            problems.append(f"duplicate trigger id {trig.trigger_id!r}")
        seen_triggers.add(trig.trigger_id)
        need_subject(trig.action.actor, where)
        need_objects(trig.action, where)
        need_pattern(trig.pattern, where)
    seen_agents = set()
    for agent in sc.agents:
        where = f"agent {agent.subject_id}"
        if agent.subject_id in seen_agents:
            problems.append(f"duplicate agent {agent.subject_id!r}")
        seen_agents.add(agent.subject_id)
        need_subject(agent.subject_id, where)
        for clause in agent.reactive:
            need_objects(clause.template, where)
            need_pattern(clause.pattern, where)
        for clause in agent.periodic:
            if clause.template.object_id == EVENT_ENTITY:
                problems.append(f"{where}: periodic clauses have no triggering event for {EVENT_ENTITY}")
            need_objects(clause.template, where)
    for ev in sc.events:
        if ev.kind is EventKind.OBJECT_CHANGED and ev.entity_id not in objs:
            problems.append(f"event at tick {ev.tick}: undefined object {ev.entity_id!r}")
    return problems


def load_scenario(text: str) -> Scenario:
    sc = parse_scenario(text)
    problems = reference_problems(sc)
    if problems:
        raise ScenarioError("unresolved references: " + "; ".join(problems), problems=problems)
    return sc


def load_scenario_file(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return load_scenario(fh.read())


def bundled_names() -> list[str]:
    root = resources.files("bun") / "scenarios"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".bun"))


def bundled_text(name: str) -> str:
    return (resources.files("bun") / "scenarios" / f"{name}.bun").read_text(encoding="utf-8")


def load_bundled(name: str) -> Scenario:
    return load_scenario(bundled_text(name))


# ---------------------------------------------------------------------------
# Attribute catalog for static predicate checks
# ---------------------------------------------------------------------------

def _note(catalog: dict[str, str], path: str, value: Literal) -> None:
    catalog.setdefault(path, type_name(value))


def attribute_catalog(sc: Scenario) -> dict[str, str]:
    catalog: dict[str, str] = {
        "subject.id": "string",
        "subject.roles": "set",
        "subject.capabilities": "set",
        "subject.goals": "set",
        "object.id": "string",
        "object.class": "string",
        "object.affordances": "set",
        "object.tags": "set",
        "op.name": "string",
        "context.logical_time": "integer",
        "context.tags": "set",
        "context.event.*": "*",
        "context.delta.*": "*",
        "context.delta_old.*": "*",
        "context.model.*": "*",
    }
    for s in sc.subjects:
        for k, v in s.attributes.items():
            _note(catalog, f"subject.attributes.{k}", v)
    for o in sc.objects:
        for k, v in o.attributes.items():
            _note(catalog, f"object.attributes.{k}", v)
        for k, v in o.state.items():
            _note(catalog, f"object.state.{k}", v)
    templates = [t.action for t in sc.triggers]
    for agent in sc.agents:
        templates += [c.template for c in agent.reactive] + [c.template for c in agent.periodic]
    for tpl in templates:
        for k, v in tpl.effects.items():
            if not hasattr(v, "name"):
                _note(catalog, f"object.state.{k}", v)
        for k, v in tpl.args.items():
            catalog.setdefault(f"op.args.{k}", "*" if hasattr(v, "name") else type_name(v))
    for ev in sc.events:
        if ev.kind is EventKind.OBJECT_CHANGED:
            for k, v in ev.payload.items():
                _note(catalog, f"object.state.{k}", v)
    return catalog


def scenario_warnings(sc: Scenario) -> list[str]:
    catalog = attribute_catalog(sc)
    out = []
    for rule in sc.rules:
        for part in ("p1", "p2", "p3"):
            out += [f"rule {rule.rule_id} {part}: {w}" for w in validate_predicate(rule.part(part), catalog)]
    for trig in sc.triggers:
        out += [f"trigger {trig.trigger_id}: {w}" for w in validate_predicate(trig.condition, catalog)]
    for agent in sc.agents:
        for clause in [*agent.reactive, *agent.periodic]:
            out += [f"agent {agent.subject_id}: {w}" for w in validate_predicate(clause.condition, catalog)]
    return out

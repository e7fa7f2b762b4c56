"""The behavioral information base: entities, rules, the behavior log and the change feed.

Mutations go through a single writer; reads may come from any thread and
always see a consistent prefix of the log and feed. Registering entities is
not a behavior and emits no events; state changes and behaviors do.
"""

from __future__ import annotations

import copy
import json
import threading
from dataclasses import dataclass
from decimal import Decimal, localcontext
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence, Union

from .literals import Literal, check_literal, format_literal, from_json, to_json
from .policy import (
    NegotiationRule,
    RuleSet,
    ValidityRule,
    Verdict,
    format_negotiation,
    format_rule,
    parse_negotiation,
    parse_rule,
)
from .predicate import compare
from .records import (
    BehaviorRecord,
    Delta,
    EventKind,
    EventRecord,
    ForecastModel,
    ModelKind,
    ObjectRecord,
    Outcome,
    RecordError,
    SubjectRecord,
)
from .textfmt import (
    FormatError,
    Token,
    format_assignments,
    format_name_list,
    logical_lines,
    one,
    parse_assignments,
    parse_int,
    parse_name_list,
    split_clauses,
    tokenize,
)

SNAPSHOT_HEADER = "bun-snapshot v1"
SNAPSHOT_SECTIONS = ("SUBJECTS", "OBJECTS", "MODELS", "RULES", "LOG")

Entity = Union[SubjectRecord, ObjectRecord, ForecastModel]


class StoreError(ValueError):
    pass


class UnknownEntity(StoreError, LookupError):
    pass


@dataclass(frozen=True)
class ModelOutput:
    fired: bool
    projected_value: Decimal


@dataclass
class BehaviorFilter:
    subject_id: Optional[str] = None
    object_id: Optional[str] = None
    operation: Optional[str] = None
    outcome: Optional[Outcome] = None
    time_from: Optional[int] = None
    time_to: Optional[int] = None  # inclusive

    FIELDS = ("subject_id", "object_id", "operation", "outcome", "time_from", "time_to")

    def matches(self, rec: BehaviorRecord) -> bool:
        if self.subject_id is not None and rec.subject_id != self.subject_id:
            return False
        if self.object_id is not None and rec.object_id != self.object_id:
            return False
        if self.operation is not None and rec.operation != self.operation:
            return False
        if self.outcome is not None and rec.outcome is not Outcome(self.outcome):
            return False
        if self.time_from is not None and rec.logical_time < self.time_from:
            return False
        if self.time_to is not None and rec.logical_time > self.time_to:
            return False
        return True


class Store:
    def __init__(self) -> None:
        self._subjects: dict[str, SubjectRecord] = {}
        self._objects: dict[str, ObjectRecord] = {}
        self._models: dict[str, ForecastModel] = {}
        self._initial_states: dict[str, dict[str, Literal]] = {}
        self.rules = RuleSet()
        self.negotiations: dict[str, NegotiationRule] = {}
        self._log: list[BehaviorRecord] = []
        self._feed: list[EventRecord] = []
        self._lock = threading.RLock()

    # -- entities ---------------------------------------------------------

    def put_entity(self, record: Entity) -> str:
        try:
            record.validate()
        except RecordError as exc:
            raise StoreError(str(exc)) from None
        record = copy.deepcopy(record)
        key = record.model_id if isinstance(record, ForecastModel) else record.id
        with self._lock:
            for table, kind in (
                (self._subjects, SubjectRecord),
                (self._objects, ObjectRecord),
                (self._models, ForecastModel),
            ):
                if key in table and not isinstance(record, kind):
                    raise StoreError(
                        f"id {key!r} already names a {kind.__name__}, cannot store a {type(record).__name__}"
                    )
            if isinstance(record, SubjectRecord):
                self._subjects[key] = record
            elif isinstance(record, ObjectRecord):
                self._objects[key] = record
                self._initial_states[key] = dict(record.state)
            else:
                self._models[key] = record
        return key

    def get_subject(self, subject_id: str) -> Optional[SubjectRecord]:
        return self._subjects.get(subject_id)

    def get_object(self, object_id: str) -> Optional[ObjectRecord]:
        return self._objects.get(object_id)

    def get_model(self, model_id: str) -> Optional[ForecastModel]:
        return self._models.get(model_id)

    def subjects(self) -> list[SubjectRecord]:
        return [self._subjects[k] for k in sorted(self._subjects)]

    def objects(self) -> list[ObjectRecord]:
        return [self._objects[k] for k in sorted(self._objects)]

    def models(self) -> list[ForecastModel]:
        return [self._models[k] for k in sorted(self._models)]

    def initial_state(self, object_id: str) -> dict[str, Literal]:
        return dict(self._initial_states[object_id])

    def register_rule(self, rule: ValidityRule) -> str:
        with self._lock:
            return self.rules.register(rule)

    def register_negotiation(self, rule: NegotiationRule) -> str:
        with self._lock:
            self.negotiations[rule.rule_id] = rule
        return rule.rule_id

    # -- change feed ------------------------------------------------------

    def _emit(self, kind: EventKind, entity_id: str, delta: Delta, tags: Iterable[str],
              time: int, cause: Optional[int]) -> EventRecord:
        event = EventRecord(
            event_id=len(self._feed) + 1,
            kind=kind,
            entity_id=entity_id,
            delta=delta,
            tags=frozenset(tags),
            logical_time=time,
            cause_behavior_id=cause,
        )
        self._feed.append(event)
        return event

    def update_object_state(
        self,
        object_id: str,
        delta: Mapping[str, Literal],
        cause: Optional[int] = None,
        time: int = 0,
        extra_tags: Iterable[str] = (),
    ) -> EventRecord:
        if not delta:
            raise StoreError(f"empty state delta for {object_id!r}")
        for key, value in delta.items():
            try:
                check_literal(value)
            except ValueError as exc:
                raise StoreError(f"{object_id}.{key}: {exc}") from None
        with self._lock:
            obj = self._objects.get(object_id)
            if obj is None:
                raise UnknownEntity(f"unknown object {object_id!r}")
            changes: Delta = {}
            for key in sorted(delta):
                changes[key] = (obj.state.get(key), delta[key])
                obj.state[key] = delta[key]
            return self._emit(EventKind.OBJECT_CHANGED, object_id, changes,
                              obj.tags | frozenset(extra_tags), time, cause)

    def emit_signal(
        self,
        entity_id: str,
        payload: Mapping[str, Literal],
        tags: Iterable[str] = (),
        time: int = 0,
        cause: Optional[int] = None,
    ) -> EventRecord:
        """Record an external signal. Signals carry data but change no state."""
        delta: Delta = {k: (None, check_literal(payload[k])) for k in sorted(payload)}
        with self._lock:
            return self._emit(EventKind.EXTERNAL_SIGNAL, entity_id, delta, tags, time, cause)

    def change_feed_since(self, event_id: int) -> list[EventRecord]:
        if event_id < 0:
            raise StoreError("event_id must be >= 0")
        with self._lock:
            return list(self._feed[event_id:])

    @property
    def last_event_id(self) -> int:
        return len(self._feed)

    # -- behavior log -----------------------------------------------------

    @property
    def next_behavior_id(self) -> int:
        return len(self._log) + 1

    def append_behavior(self, record: BehaviorRecord) -> int:
        with self._lock:
            expected = self.next_behavior_id
            if record.behavior_id not in (None, expected):
                raise StoreError(f"behavior_id {record.behavior_id} out of sequence (next is {expected})")
            problems = []
            obj = self._objects.get(record.object_id)
            if record.subject_id not in self._subjects:
                problems.append(f"subject {record.subject_id!r}")
            if obj is None:
                problems.append(f"object {record.object_id!r}")
            if problems:
                raise UnknownEntity("dangling reference to " + " and ".join(problems))
            if record.verdict is None:
                raise StoreError("behavior record has no verdict")
            if record.outcome is Outcome.APPLIED and not record.verdict.allow:
                raise StoreError("applied behavior with a denying verdict")
            if record.caused_by is None:
                if record.cascade_depth != 0:
                    raise StoreError("root behavior must have cascade_depth 0")
            else:
                if not 1 <= record.caused_by < expected:
                    raise StoreError(f"caused_by {record.caused_by} does not name an earlier behavior")
                parent = self._log[record.caused_by - 1]
                if record.cascade_depth != parent.cascade_depth + 1:
                    raise StoreError(
                        f"cascade_depth {record.cascade_depth} != parent depth {parent.cascade_depth} + 1"
                    )
            if not record.object_class:
                record.object_class = obj.cls
            record.behavior_id = expected
            self._log.append(record)
            tags = set(obj.tags)
            ctx_tags = record.context.get("tags", ())
            if isinstance(ctx_tags, (set, frozenset, list, tuple)):
                tags |= set(ctx_tags)
            self._emit(EventKind.BEHAVIOR_RECORDED, record.object_id, {}, tags,
                       record.logical_time, record.behavior_id)
            return record.behavior_id

    def get_behavior(self, behavior_id: int) -> Optional[BehaviorRecord]:
        if 1 <= behavior_id <= len(self._log):
            return self._log[behavior_id - 1]
        return None

    @property
    def log(self) -> list[BehaviorRecord]:
        with self._lock:
            return list(self._log)

    def query_behaviors(self, flt: Optional[BehaviorFilter] = None, **fields) -> list[BehaviorRecord]:
        if flt is None:
            unknown = set(fields) - set(BehaviorFilter.FIELDS)
            if unknown:
                raise TypeError(f"unknown filter field(s): {sorted(unknown)}")
            flt = BehaviorFilter(**fields)
        with self._lock:
            return [r for r in self._log if flt.matches(r)]

    # -- models -----------------------------------------------------------

    def evaluate_model(self, model_id: str, series: Sequence[tuple[int, Literal]]) -> ModelOutput:
        model = self._models.get(model_id)
        if model is None:
            raise UnknownEntity(f"unknown model {model_id!r}")
        return evaluate_model(model, series)

    def series(self, object_id: str, path: str) -> list[tuple[int, Literal]]:
        """Observed values of ``state.<path>``, one per tick (last write wins).

        The registered initial value, if any, counts as the reading at tick 0.
        """
        points: dict[int, Literal] = {}
        with self._lock:
            initial = self._initial_states.get(object_id, {})
            if path in initial:
                points[0] = initial[path]
            for ev in self._feed:
                if ev.kind is EventKind.OBJECT_CHANGED and ev.entity_id == object_id and path in ev.delta:
                    points[ev.logical_time] = ev.delta[path][1]
        return sorted(points.items())

    # -- export -----------------------------------------------------------

    def export_log(self) -> str:
        return "".join(behavior_to_line(r) + "\n" for r in self.log)

    def export_feed(self) -> str:
        return "".join(event_to_line(e) + "\n" for e in self.change_feed_since(0))

    def export_snapshot(self) -> str:
        lines = [SNAPSHOT_HEADER, "SUBJECTS"]
        lines += [format_subject(s) for s in self.subjects()]
        lines.append("OBJECTS")
        lines += [format_object(o) for o in self.objects()]
        lines.append("MODELS")
        lines += [format_model(m) for m in self.models()]
        lines.append("RULES")
        lines += [format_rule(r) for r in self.rules]
        lines += [format_negotiation(self.negotiations[k]) for k in sorted(self.negotiations)]
        lines.append("LOG")
        lines += [behavior_to_line(r) for r in self.log]
        return "\n".join(lines) + "\n"

    @classmethod
    def import_snapshot(cls, text: str) -> "Store":
        store = cls()
        lines = text.splitlines()
        if not lines or lines[0].strip() != SNAPSHOT_HEADER:
            raise FormatError(f"snapshot must start with {SNAPSHOT_HEADER!r}", 1, 1)
        section = None
        log_lines: list[tuple[int, str]] = []
        body = []
        for lineno, raw in enumerate(lines[1:], start=2):
            if raw.strip() in SNAPSHOT_SECTIONS:
                section = raw.strip()
                continue
            if not raw.strip():
                continue
            if section is None:
                raise FormatError(f"content before first section: {raw!r}", lineno, 1)
            if section == "LOG":
                log_lines.append((lineno, raw))
            else:
                body.append((section, lineno, raw))
        for section, lineno, raw in body:
            line = logical_lines(raw)[0]
            line.lineno = lineno
            toks = tokenize(line)
            head = toks[0].text
            if section == "SUBJECTS" and head == "subject":
                store.put_entity(parse_subject(toks))
            elif section == "OBJECTS" and head == "object":
                store.put_entity(parse_object(toks))
            elif section == "MODELS" and head == "model":
                store.put_entity(parse_model(toks))
            elif section == "RULES" and head == "rule":
                store.register_rule(parse_rule(toks))
            elif section == "RULES" and head == "negotiate":
                store.register_negotiation(parse_negotiation(toks))
            else:
                raise toks[0].error(f"unexpected {head!r} in {section}")
        for lineno, raw in log_lines:
            try:
                record = behavior_from_line(raw)
            except (ValueError, KeyError) as exc:
                raise FormatError(f"bad log record: {exc}", lineno, 1) from None
            store._log.append(record)
        return store


def replay_states(
    initial: Mapping[str, Mapping[str, Literal]], events: Iterable[EventRecord]
) -> dict[str, dict[str, Literal]]:
    """Fold object_changed deltas over initial object states."""
    states = {k: dict(v) for k, v in initial.items()}
    for ev in events:
        if ev.kind is EventKind.OBJECT_CHANGED:
            target = states.setdefault(ev.entity_id, {})
            for path, (_, new) in ev.delta.items():
                target[path] = new
    return states


# ---------------------------------------------------------------------------
# Forecast models
# ---------------------------------------------------------------------------

def _numeric(value: Literal) -> Fraction:
    if isinstance(value, bool) or not isinstance(value, (int, Decimal)):
        raise StoreError(f"series value {value!r} is not numeric")
    return Fraction(value)


def _to_decimal(value: Fraction) -> Decimal:
    with localcontext() as ctx:
        ctx.prec = 34
        return Decimal(value.numerator) / Decimal(value.denominator)


def evaluate_model(model: ForecastModel, series: Sequence[tuple[int, Literal]]) -> ModelOutput:
    params = model.parameters
    bound = params["bound"]
    direction = str(params["direction"])
    if not series:
        raise StoreError(f"model {model.model_id}: empty series")
    ticks = [t for t, _ in series]
    if any(b <= a for a, b in zip(ticks, ticks[1:])):
        raise StoreError(f"model {model.model_id}: series ticks must be strictly increasing")
    if model.kind is ModelKind.THRESHOLD:
        latest = _to_decimal(_numeric(series[-1][1]))
        return ModelOutput(compare(latest, direction, bound), latest)
    window = int(params["window"])
    if len(series) < window:
        raise StoreError(f"model {model.model_id}: need {window} points, got {len(series)}")
    pts = [(Fraction(t), _numeric(v)) for t, v in series[-window:]]
    mean_x = sum(x for x, _ in pts) / window
    mean_y = sum(y for _, y in pts) / window
    sxx = sum((x - mean_x) ** 2 for x, _ in pts)
    sxy = sum((x - mean_x) * (y - mean_y) for x, y in pts)
    slope = sxy / sxx
    projected = _to_decimal(mean_y + slope * (pts[-1][0] + 1 - mean_x))
    return ModelOutput(compare(projected, direction, bound), projected)


# ---------------------------------------------------------------------------
# Entity lines
# ---------------------------------------------------------------------------

def format_subject(s: SubjectRecord) -> str:
    parts = ["subject", s.id]
    if s.roles:
        parts += ["roles", format_name_list(s.roles)]
    if s.capabilities:
        parts += ["caps", format_name_list(s.capabilities)]
    if s.goals:
        parts += ["goals", ",".join(s.goals)]
    if s.attributes:
        parts += ["attrs", format_assignments(s.attributes)]
    return " ".join(parts)


def parse_subject(toks: list[Token]) -> SubjectRecord:
    head = toks[0]
    if len(toks) < 2:
        raise head.error("subject needs an id")
    c = split_clauses(toks[2:], ("roles", "caps", "goals", "attrs"))
    goals_tok = one(c, "goals", head, required=False)
    record = SubjectRecord(
        id=toks[1].text,
        roles=parse_name_list(one(c, "roles", head, required=False)),
        capabilities=parse_name_list(one(c, "caps", head, required=False)),
        attributes=parse_assignments(c.get("attrs")),
        goals=tuple(g for g in goals_tok.text.split(",") if g) if goals_tok else (),
    )
    _validate(record, head)
    return record


def format_object(o: ObjectRecord) -> str:
    parts = ["object", o.id, "class", o.cls]
    if o.affordances:
        parts += ["affords", format_name_list(o.affordances)]
    if o.tags:
        parts += ["tags", format_name_list(o.tags)]
    if o.attributes:
        parts += ["attrs", format_assignments(o.attributes)]
    if o.state:
        parts += ["state", format_assignments(o.state)]
    return " ".join(parts)


def parse_object(toks: list[Token]) -> ObjectRecord:
    head = toks[0]
    if len(toks) < 2:
        raise head.error("object needs an id")
    c = split_clauses(toks[2:], ("class", "affords", "tags", "attrs", "state"))
    record = ObjectRecord(
        id=toks[1].text,
        cls=one(c, "class", head).text,
        affordances=parse_name_list(one(c, "affords", head, required=False)),
        tags=parse_name_list(one(c, "tags", head, required=False)),
        attributes=parse_assignments(c.get("attrs")),
        state=parse_assignments(c.get("state")),
    )
    _validate(record, head)
    return record


_MODEL_KINDS = {"threshold": ModelKind.THRESHOLD, "linear": ModelKind.LINEAR}


def format_model(m: ForecastModel) -> str:
    kind = "threshold" if m.kind is ModelKind.THRESHOLD else "linear"
    p = m.parameters
    parts = ["model", m.model_id, kind, "path", str(p["path"])]
    if m.kind is ModelKind.LINEAR:
        parts += ["window", str(p["window"])]
    parts += ["bound", format_literal(p["bound"]), "direction", str(p["direction"])]
    return " ".join(parts)


def parse_model(toks: list[Token]) -> ForecastModel:
    head = toks[0]
    if len(toks) < 3 or toks[2].text not in _MODEL_KINDS:
        raise head.error("model needs '<id> threshold|linear ...'")
    kind = _MODEL_KINDS[toks[2].text]
    c = split_clauses(toks[3:], ("path", "window", "bound", "direction"))
    params: dict[str, Literal] = {
        "path": one(c, "path", head).text,
        "direction": one(c, "direction", head).text,
    }
    bound_tok = one(c, "bound", head)
    params.update(parse_assignments([Token("bound=" + bound_tok.text, bound_tok.line, bound_tok.col)],
                                    bare_strings=False))
    if kind is ModelKind.LINEAR:
        params["window"] = parse_int(one(c, "window", head), "window")
    record = ForecastModel(toks[1].text, kind, params)
    _validate(record, head)
    return record


def _validate(record: Entity, anchor: Token) -> None:
    try:
        record.validate()
    except RecordError as exc:
        raise anchor.error(str(exc)) from None


# ---------------------------------------------------------------------------
# Line-delimited records
# ---------------------------------------------------------------------------

def _delta_json(delta: Delta) -> dict:
    return {k: [None if old is None else to_json(old), to_json(new)] for k, (old, new) in sorted(delta.items())}


def _delta_from_json(data: dict) -> Delta:
    return {k: (None if old is None else from_json(old), from_json(new)) for k, (old, new) in data.items()}


def _context_json(context: Mapping[str, object]) -> dict:
    out = {}
    for key in sorted(context):
        value = context[key]
        if isinstance(value, (set, frozenset, list, tuple)):
            out[key] = sorted(value)
        else:
            out[key] = to_json(value)  # type: ignore[arg-type]
    return out


def _context_from_json(data: dict) -> dict[str, object]:
    return {k: frozenset(v) if isinstance(v, list) else from_json(v) for k, v in data.items()}


def _dumps(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def behavior_to_line(r: BehaviorRecord) -> str:
    return _dumps({
        "behavior_id": r.behavior_id,
        "logical_time": r.logical_time,
        "subject_id": r.subject_id,
        "operation": r.operation,
        "object_id": r.object_id,
        "outcome": r.outcome.value,
        "cascade_depth": r.cascade_depth,
        "caused_by": r.caused_by,
        "verdict": r.verdict.summary(),
        "state_delta": _delta_json(r.state_delta),
        "reason": r.reason,
        "object_class": r.object_class,
        "args": {k: to_json(r.args[k]) for k in sorted(r.args)},
        "context": _context_json(r.context),
    })


def behavior_from_line(line: str) -> BehaviorRecord:
    d = json.loads(line)
    return BehaviorRecord(
        behavior_id=d["behavior_id"],
        logical_time=d["logical_time"],
        subject_id=d["subject_id"],
        operation=d["operation"],
        object_id=d["object_id"],
        outcome=Outcome(d["outcome"]),
        cascade_depth=d["cascade_depth"],
        caused_by=d["caused_by"],
        verdict=Verdict.from_summary(d["verdict"]),
        state_delta=_delta_from_json(d["state_delta"]),
        reason=d.get("reason"),
        object_class=d.get("object_class", ""),
        args={k: from_json(v) for k, v in d.get("args", {}).items()},
        context=_context_from_json(d.get("context", {})),
    )


def event_to_line(e: EventRecord) -> str:
    return _dumps({
        "event_id": e.event_id,
        "logical_time": e.logical_time,
        "kind": e.kind.value,
        "entity_id": e.entity_id,
        "delta": _delta_json(e.delta),
        "tags": sorted(e.tags),
        "cause_behavior_id": e.cause_behavior_id,
    })


def event_from_line(line: str) -> EventRecord:
    d = json.loads(line)
    return EventRecord(
        event_id=d["event_id"],
        kind=EventKind(d["kind"]),
        entity_id=d["entity_id"],
        delta=_delta_from_json(d["delta"]),
        tags=frozenset(d["tags"]),
        logical_time=d["logical_time"],
        cause_behavior_id=d["cause_behavior_id"],
    )


def read_lines(text: str, parse) -> list:
    return [parse(line) for line in text.splitlines() if line.strip()]

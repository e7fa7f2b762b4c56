"""Discrete-time simulation harness.

One step at tick ``t`` runs these phases in order:

0. external inputs: scheduled scenario events, agent failure signals,
   negotiation reassignment directives that fall due, then injected events;
1. every feed event not yet seen is published to subscriptions and matched
   against trigger rules (trigger conditions are evaluated here);
2. agents act in subject-id order: reactive clauses for their deliveries,
   then periodic clauses due at ``t``;
3. agent requests, then trigger requests (by priority), are executed:
   validity check, write mutex, compare-and-set ``expect``, state update.

Effects of tick ``t`` land in the feed and are observed at ``t + 1``.
Identical scenario and seed give byte-identical exports.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Optional

from .literals import Literal, same_literal
from .policy import (
    RESPONDER_ARG,
    MutexGuard,
    NegotiationRule,
    ReassignmentDirective,
    ValidityRequest,
    check_validity,
    deadline_tick,
    negotiation_timeout_check,
)
from .predicate import BindingEnv, OpBinding, evaluate
from .records import BehaviorRecord, EventKind, EventRecord, Outcome
from .scenario import AgentScript, Scenario, ScheduledEvent
from .store import Store
from .triggers import (
    BehaviorRequest,
    FiringDecision,
    Reason,
    Subscription,
    TriggerEngine,
    event_context,
)

DIRECTIVE_TAG = "reassign"
FAILURE_STATUS = "failed"


class SimError(ValueError):
    pass


@dataclass
class TickCount:
    requested: int = 0
    applied: int = 0
    denied: int = 0
    failed: int = 0

    def add(self, outcome: Outcome) -> None:
        setattr(self, outcome.value, getattr(self, outcome.value) + 1)

    @property
    def balanced(self) -> bool:
        return self.requested == self.applied + self.denied + self.failed


@dataclass
class RunResult:
    scenario: str
    seed: int
    final_tick: int
    quiescent: bool
    log: list[BehaviorRecord]
    feed: list[EventRecord]
    decisions: list[FiringDecision]
    directives: list[ReassignmentDirective]
    per_agent: dict[str, TickCount]
    per_tick: dict[int, TickCount]

    @property
    def exit_code(self) -> int:
        return 0 if self.quiescent else 2


class Simulation:
    def __init__(self, scenario: Scenario, seed: Optional[int] = None):
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.rng = random.Random(self.seed)
        self.store: Store = scenario.build_store()
        self.engine = TriggerEngine(self.store, scenario.policy)
        for trig in scenario.triggers:
            self.engine.register_trigger(trig)
        self.agents: dict[str, AgentScript] = {a.subject_id: a for a in scenario.agents}
        self._clauses = {}
        for agent in scenario.agents:
            for i, clause in enumerate(agent.reactive, start=1):
                sub_id = f"{agent.subject_id}/on{i}"
                self.engine.subscribe(Subscription(sub_id, agent.subject_id, clause.pattern))
                self._clauses[sub_id] = clause
        self.mutex = MutexGuard(scenario.mutex_granularity)
        self.tick = 0
        self.cursor = 0
        self.failed: set[str] = set()
        self._scheduled = sorted(enumerate(scenario.events), key=lambda p: (p[1].tick, p[0]))
        self._injected: list[ScheduledEvent] = []
        self._open: dict[int, NegotiationRule] = {}
        self.directives: list[ReassignmentDirective] = []
        self.per_agent: dict[str, TickCount] = {s.id: TickCount() for s in self.store.subjects()}
        self.per_tick: dict[int, TickCount] = {}

    # -- external inputs ----------------------------------------------------

    def inject_external_event(self, event: ScheduledEvent) -> None:
        """Queue an event for the next step, after that tick's scheduled events."""
        if event.kind is EventKind.BEHAVIOR_RECORDED:
            raise SimError("behavior_recorded events cannot be injected")
        if event.kind is EventKind.OBJECT_CHANGED:
            if self.store.get_object(event.entity_id) is None:
                raise SimError(f"unknown object {event.entity_id!r}")
            if not event.payload:
                raise SimError("object_changed events need a non-empty payload")
        self._injected.append(event)

    def _apply_external(self, ev: ScheduledEvent) -> None:
        if ev.kind is EventKind.OBJECT_CHANGED:
            self.store.update_object_state(ev.entity_id, ev.payload, None, self.tick, ev.tags)
        else:
            self.store.emit_signal(ev.entity_id, ev.payload, ev.tags, self.tick)

    def _external_phase(self) -> None:
        t = self.tick
        while self._scheduled and self._scheduled[0][1].tick <= t:
            self._apply_external(self._scheduled.pop(0)[1])
        for agent in sorted(self.agents.values(), key=lambda a: a.subject_id):
            if agent.fail_at == t and agent.subject_id not in self.failed:
                self.failed.add(agent.subject_id)
                self.store.emit_signal(agent.subject_id, {"status": FAILURE_STATUS}, (), t)
        for request_id in sorted(self._open):
            rule = self._open[request_id]
            request = self.store.get_behavior(request_id)
            if t < deadline_tick(request, rule.deadline):
                continue
            del self._open[request_id]
            directive = negotiation_timeout_check(
                request, self.store.log, rule.deadline, rule.fallback, now=t, rule_id=rule.rule_id
            )
            if directive is None:
                continue
            self.directives.append(directive)
            obj = self.store.get_object(directive.object_id)
            payload = {
                "directive": DIRECTIVE_TAG,
                "request_id": directive.request_id,
                "responder": directive.responder,
                "fallback": directive.fallback,
                "rule": directive.rule_id,
            }
            self.store.emit_signal(directive.object_id, payload, obj.tags | {DIRECTIVE_TAG}, t, request_id)
        injected, self._injected = self._injected, []
        for ev in injected:
            self._apply_external(ev)

    # -- request construction ----------------------------------------------

    def _agent_requests(self) -> list[BehaviorRequest]:
        t = self.tick
        out: list[BehaviorRequest] = []
        for agent_id in sorted(self.agents):
            agent = self.agents[agent_id]
            deliveries = self.engine.take_deliveries(agent_id)
            if agent_id in self.failed:
                continue
            subject = self.store.get_subject(agent_id)
            for sub, event in deliveries:
                clause = self._clauses[sub.subscription_id]
                tpl = clause.template
                target = tpl.resolve_object(event, self.rng)
                obj = self.store.get_object(target)
                holds = obj is not None and evaluate(
                    clause.condition,
                    BindingEnv(subject, obj, OpBinding(tpl.operation, tpl.fill(tpl.args, event)),
                               event_context(event, t, self.store)),
                ).value
                decision, depth = self.engine.govern(sub.subscription_id, agent_id, target, event, t, holds)
                if decision.fired:
                    out.append(BehaviorRequest(
                        agent_id, tpl.operation, target,
                        tpl.fill(tpl.args, event), tpl.fill(tpl.effects, event), tpl.fill(tpl.expect, event),
                        caused_by=event.cause_behavior_id if depth else None,
                        cascade_depth=depth or 0,
                        tags=event.tags,
                        origin=sub.subscription_id,
                        event_id=event.event_id,
                    ))
            for i, clause in enumerate(agent.periodic, start=1):
                if not clause.due(t):
                    continue
                tpl = clause.template
                target = tpl.resolve_object(None, self.rng)
                obj = self.store.get_object(target)
                ctx = {"logical_time": t, "tags": frozenset()}
                env = BindingEnv(subject, obj, OpBinding(tpl.operation, tpl.fill(tpl.args, None)), ctx)
                if evaluate(clause.condition, env).value:
                    out.append(BehaviorRequest(
                        agent_id, tpl.operation, target,
                        tpl.fill(tpl.args, None), tpl.fill(tpl.effects, None), tpl.fill(tpl.expect, None),
                        origin=f"{agent_id}/every{i}",
                    ))
        return out

    # -- execution ------------------------------------------------------------

    def _execute(self, req: BehaviorRequest) -> BehaviorRecord:
        t = self.tick
        context = {"logical_time": t, "tags": req.tags}
        verdict = check_validity(
            ValidityRequest(req.subject_id, req.operation, req.object_id, req.args, context),
            self.store.rules,
            self.store,
        )
        obj = self.store.get_object(req.object_id)
        outcome, reason = Outcome.APPLIED, None
        if req.subject_id in self.failed:
            outcome, reason = Outcome.FAILED, "subject_failed"
        elif not verdict.allow:
            outcome = Outcome.DENIED
            reason = "gate" if not verdict.gate_passed else "policy"
        elif req.effects and not self.mutex.acquire(req.object_id, t, self.store.next_behavior_id):
            outcome, reason = Outcome.DENIED, "mutex"
        elif any(not _same(obj.state.get(k), v) for k, v in req.expect.items()):
            outcome, reason = Outcome.FAILED, "expect"
        delta = {}
        if outcome is Outcome.APPLIED:
            delta = {k: (obj.state.get(k), req.effects[k]) for k in sorted(req.effects)}
        record = BehaviorRecord(
            subject_id=req.subject_id,
            operation=req.operation,
            object_id=req.object_id,
            verdict=verdict,
            outcome=outcome,
            logical_time=t,
            args=dict(req.args),
            context=context,
            state_delta=delta,
            caused_by=req.caused_by,
            cascade_depth=req.cascade_depth,
            reason=reason,
        )
        bid = self.store.append_behavior(record)
        if delta:
            self.store.update_object_state(req.object_id, req.effects, bid, t)
        if outcome is Outcome.APPLIED and isinstance(req.args.get(RESPONDER_ARG), str):
            for rule in sorted(self.store.negotiations.values(), key=lambda r: r.rule_id):
                if rule.operation == req.operation:
                    self._open[bid] = rule
                    break
        count = self.per_tick.setdefault(t, TickCount())
        count.requested += 1
        count.add(outcome)
        agent = self.per_agent.setdefault(req.subject_id, TickCount())
        agent.requested += 1
        agent.add(outcome)
        return record

    # -- stepping -------------------------------------------------------------

    def step(self) -> None:
        self._external_phase()
        for event in self.store.change_feed_since(self.cursor):
            self.engine.publish(event)
            self.engine.process(event, self.tick)
        self.cursor = self.store.last_event_id
        requests = self._agent_requests()
        requests += self.engine.drain_pending(self.tick)
        for req in requests:
            self._execute(req)
        self.tick += 1

    def is_quiescent(self) -> bool:
        t = self.tick
        if self.cursor < self.store.last_event_id or self._scheduled or self._injected or self._open:
            return False
        if self.engine.has_pending():
            return False
        for agent in self.agents.values():
            if agent.subject_id in self.failed:
                continue
            if agent.fail_at is not None and agent.fail_at >= t:
                return False
            if any(c.remaining(t) for c in agent.periodic):
                return False
        return True

    def run(self, max_ticks: int = 1000) -> RunResult:
        if max_ticks < 0:
            raise SimError("max_ticks must be >= 0")
        steps = 0
        while not self.is_quiescent() and steps < max_ticks:
            self.step()
            steps += 1
        return self.result()

    def result(self) -> RunResult:
        return RunResult(
            scenario=self.scenario.name,
            seed=self.seed,
            final_tick=self.tick,
            quiescent=self.is_quiescent(),
            log=self.store.log,
            feed=self.store.change_feed_since(0),
            decisions=list(self.engine.decisions),
            directives=list(self.directives),
            per_agent=dict(sorted(self.per_agent.items())),
            per_tick=dict(sorted(self.per_tick.items())),
        )


def _same(current: Optional[Literal], expected: Literal) -> bool:
    return current is not None and same_literal(current, expected)


def run(scenario: Scenario, max_ticks: int = 1000, seed: Optional[int] = None) -> tuple[Simulation, RunResult]:
    sim = Simulation(scenario, seed)
    return sim, sim.run(max_ticks)


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def decision_to_line(d: FiringDecision) -> str:
    return json.dumps(
        {"tick": d.tick, "trigger_id": d.trigger_id, "event_id": d.event_id, "fired": d.fired, "reason": d.reason.value},
        separators=(",", ":"),
    )


def decision_from_line(line: str) -> FiringDecision:
    data = json.loads(line)
    return FiringDecision(data["trigger_id"], data["event_id"], data["fired"], Reason(data["reason"]), data["tick"])


def export_decisions(decisions: list[FiringDecision]) -> str:
    return "".join(decision_to_line(d) + "\n" for d in decisions)


def summary_lines(result: RunResult) -> list[str]:
    outcomes = TickCount()
    for rec in result.log:
        outcomes.requested += 1
        outcomes.add(rec.outcome)
    reasons: dict[str, int] = {}
    for d in result.decisions:
        reasons[d.reason.value] = reasons.get(d.reason.value, 0) + 1
    lines = [
        f"scenario {result.scenario}",
        f"seed {result.seed}",
        f"final_tick {result.final_tick}",
        f"quiescent {'true' if result.quiescent else 'false'}",
        f"behaviors {outcomes.requested} applied {outcomes.applied} denied {outcomes.denied} failed {outcomes.failed}",
        f"events {len(result.feed)}",
        "decisions " + " ".join(f"{k}={reasons[k]}" for k in sorted(reasons)) if reasons else "decisions none",
        f"directives {len(result.directives)}",
    ]
    for agent, c in result.per_agent.items():
        lines.append(f"agent {agent} requested {c.requested} applied {c.applied} denied {c.denied} failed {c.failed}")
    return lines


__all__ = [
    "RunResult",
    "SimError",
    "Simulation",
    "TickCount",
    "decision_from_line",
    "export_decisions",
    "run",
    "summary_lines",
]

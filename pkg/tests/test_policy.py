from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gen
import oracles
from bun.policy import (
    MutexGuard,
    RuleError,
    RuleSet,
    UnresolvedReference,
    ValidityRequest,
    ValidityRule,
    Verdict,
    acquire_write_mutex,
    check_validity,
    decide,
    format_rule,
    negotiation_timeout_check,
    parse_rule,
)
from bun.predicate import TRUE, BindingEnv, OpBinding, evaluate, parse_predicate
from bun.records import BehaviorRecord, ObjectRecord, Outcome, SubjectRecord
from bun.store import Store
from bun.textfmt import LogicalLine, tokenize

P = parse_predicate


def report_store() -> Store:
    store = Store()
    store.put_entity(SubjectRecord("alice", roles=frozenset({"publisher"}), capabilities=frozenset({"release"})))
    store.put_entity(SubjectRecord("bob", roles=frozenset({"intern"}), capabilities=frozenset({"release"})))
    store.put_entity(ObjectRecord("doc1", "FinancialReport",
                                  attributes={"Sensitivity": "Confidential"}, state={"Status": "Approved"},
                                  affordances=frozenset({"release"})))
    store.register_rule(ValidityRule(
        "embargo", "release", "FinancialReport",
        p1=P("(has_role subject publisher)"),
        p2=P('(= object.state.Status "Approved")'),
        p3=P("(>= context.logical_time 100)"),
    ))
    return store


def ask(store, subject, time, op="release", obj="doc1"):
    req = ValidityRequest(subject, op, obj, {}, {"logical_time": time, "tags": frozenset()})
    return check_validity(req, store.rules, store)


def test_release_before_embargo_is_denied_on_p3():
    v = ask(report_store(), "alice", 50)
    assert not v.allow
    assert v.first_failure.rule_id == "embargo" and v.first_failure.part == "P3"
    assert v.first_failure.atoms == ("(>= context.logical_time 100)",)
    assert v.summary() == "deny:P3:embargo"


def test_release_after_embargo_is_allowed():
    v = ask(report_store(), "alice", 100)
    assert v.allow and v.summary() == "allow"
    assert [(r.rule_id, r.p1, r.p2, r.p3) for r in v.evaluated] == [("embargo", True, True, True)]


def test_missing_role_fails_p1():
    v = ask(report_store(), "bob", 200)
    assert v.first_failure.part == "P1"


def test_gate_denies_unafforded_operation_without_rules():
    store = Store()
    store.put_entity(SubjectRecord("s", capabilities=frozenset({"read", "write"})))
    store.put_entity(ObjectRecord("o", affordances=frozenset({"read"})))
    v = check_validity(ValidityRequest("s", "write", "o"), store.rules, store)
    assert not v.allow and not v.gate_passed and v.summary() == "deny:gate"
    assert check_validity(ValidityRequest("s", "read", "o"), store.rules, store).allow


def test_subject_without_capabilities_never_passes_the_gate():
    store = Store()
    store.put_entity(SubjectRecord("s"))
    store.put_entity(ObjectRecord("o", affordances=frozenset({"read"})))
    assert not check_validity(ValidityRequest("s", "read", "o"), store.rules, store).allow


def test_unresolved_ids_raise():
    with pytest.raises(UnresolvedReference):
        ask(report_store(), "mallory", 0)


def test_vacuous_rule_permits_everything_in_scope():
    rules = RuleSet([ValidityRule("open", "*", "*")])
    s = SubjectRecord("s", capabilities=frozenset({"x"}))
    o = ObjectRecord("o", affordances=frozenset({"x"}))
    assert decide(s, o, "x", {}, {}, rules).allow


def test_namespace_violation_is_rejected_naming_the_atom():
    with pytest.raises(RuleError) as info:
        RuleSet([ValidityRule("bad", p2=P('(in subject.roles "admin")'))])
    assert '(in subject.roles "admin")' in str(info.value)
    with pytest.raises(RuleError):
        RuleSet([ValidityRule("bad", p3=P("(has_tag object x)"))])


def test_register_replaces_same_id_and_rescopes():
    rules = RuleSet([ValidityRule("r", "a", "*")])
    rules.register(ValidityRule("r", "b", "*"))
    assert len(rules) == 1
    assert rules.applicable("a", "C") == []
    assert [r.rule_id for r in rules.applicable("b", "C")] == ["r"]


def test_rule_text_round_trip():
    rule = ValidityRule("embargo", "release", "FinancialReport", P("(has_role subject publisher)"), TRUE,
                        P("(>= context.logical_time 100)"), "publisher only")
    text = format_rule(rule)
    back = parse_rule(tokenize(LogicalLine(1, text, 0)))
    assert back == rule


def test_verdict_summary_round_trip():
    for text in ("allow", "deny:gate", "deny:P2:r1"):
        assert Verdict.from_summary(text).summary() == text


@settings(max_examples=400, deadline=None)
@given(st.integers(0, 2**32))
def test_decide_matches_unindexed_oracle(seed):
    rng = random.Random(seed)
    rules = gen.ruleset(rng)
    s, o, op = gen.subject(rng), gen.obj(rng), rng.choice(gen.OPS)
    args = {"k": gen.value(rng)}
    ctx = gen.context(rng)
    verdict = decide(s, o, op, args, ctx, RuleSet(rules))
    allow, results = oracles.brute_force_decide(s, o, op, args, ctx, rules)
    assert verdict.allow == allow
    assert {r.rule_id: (r.p1, r.p2, r.p3) for r in verdict.evaluated} == results


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32))
def test_adding_a_rule_never_turns_deny_into_allow(seed):
    rng = random.Random(seed)
    rules = gen.ruleset(rng, 4)
    s, o, op, ctx = gen.subject(rng), gen.obj(rng), rng.choice(gen.OPS), gen.context(rng)
    before = decide(s, o, op, {}, ctx, RuleSet(rules)).allow
    after = decide(s, o, op, {}, ctx, RuleSet(rules + [gen.rule(rng, "zz")])).allow
    assert not (after and not before)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32))
def test_first_failure_atoms_are_false_in_isolation(seed):
    rng = random.Random(seed)
    rules = gen.ruleset(rng)
    s, o, op, ctx = gen.subject(rng), gen.obj(rng), rng.choice(gen.OPS), gen.context(rng)
    v = decide(s, o, op, {}, ctx, RuleSet(rules))
    if v.allow or not v.gate_passed:
        return
    f = v.first_failure
    assert f is not None and f.rule_id is not None
    env = BindingEnv(s, o, OpBinding(op, {}), ctx)
    for text in f.atoms:
        assert evaluate(P(text), env).value is False


# -- mutex ------------------------------------------------------------------

def test_mutex_first_claimant_wins():
    guard = MutexGuard()
    assert acquire_write_mutex(guard, "X", 7, 1)
    assert not acquire_write_mutex(guard, "X", 7, 2)
    assert acquire_write_mutex(guard, "X", 8, 3)
    assert acquire_write_mutex(guard, "Y", 7, 4)
    assert guard.holder("X", 7) == 1


@pytest.mark.parametrize("n", range(2, 11))
def test_mutex_grants_exactly_one_of_n(n):
    guard = MutexGuard()
    granted = [guard.acquire("obj", 3, b) for b in range(1, n + 1)]
    assert granted == [True] + [False] * (n - 1)


def test_mutex_granularity_groups_ticks():
    guard = MutexGuard(granularity=5)
    assert guard.acquire("X", 5, 1)
    assert not guard.acquire("X", 9, 2)
    assert guard.acquire("X", 10, 3)


# -- negotiation timeout -----------------------------------------------------

def _request(time=10):
    return BehaviorRecord("a", "request", "job", Verdict(True), Outcome.APPLIED, time,
                          args={"responder": "b"}, behavior_id=1)


def _reply(time, **kw):
    return BehaviorRecord("b", "accept", "job", Verdict(True), Outcome.APPLIED, time, behavior_id=2, **kw)


def test_response_within_deadline_means_no_directive():
    req = _request()
    log = [req, _reply(13, args={"reply_to": 1})]
    assert negotiation_timeout_check(req, log, 5, "c") is None


def test_response_by_causation_counts():
    req = _request()
    log = [req, _reply(12, caused_by=1, cascade_depth=1)]
    assert negotiation_timeout_check(req, log, 5, "c") is None


def test_no_response_yields_to_fallback_at_deadline():
    req = _request()
    directive = negotiation_timeout_check(req, [req], 5, "c")
    assert directive.fallback == "c" and directive.responder == "b"
    assert directive.fire_tick == 15


def test_late_response_does_not_count():
    req = _request()
    assert negotiation_timeout_check(req, [req, _reply(15, args={"reply_to": 1})], 5, "c") is not None


def test_nothing_before_the_deadline_tick():
    req = _request()
    assert negotiation_timeout_check(req, [req], 5, "c", now=14) is None
    assert negotiation_timeout_check(req, [req], 5, "c", now=15).fire_tick == 15


def test_zero_deadline_fires_at_next_tick():
    req = _request()
    assert negotiation_timeout_check(req, [req], 0, "c").fire_tick == 11

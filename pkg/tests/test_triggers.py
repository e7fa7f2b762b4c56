from __future__ import annotations

import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bun.policy import Verdict
from bun.records import BehaviorRecord, EventKind, ForecastModel, ModelKind, ObjectRecord, Outcome, SubjectRecord
from bun.store import Store
from bun.textfmt import LogicalLine, tokenize
from bun.triggers import (
    EventPattern,
    PropagationPolicy,
    Reason,
    Subscription,
    TriggerEngine,
    TriggerError,
    format_trigger,
    parse_trigger,
)


def trig(text: str):
    return parse_trigger(tokenize(LogicalLine(1, text, 0)))


def road_store() -> Store:
    s = Store()
    for sid in ("gateway", "control", "v1", "v2", "v3"):
        s.put_entity(SubjectRecord(sid, capabilities=frozenset({"reroute", "activate", "log", "alert"})))
    s.put_entity(ObjectRecord("incident_log", "Log", state={"status": "clear"}, tags=frozenset({"regionA"})))
    s.put_entity(ObjectRecord("route1", "Route", tags=frozenset({"regionA"})))
    s.put_entity(ObjectRecord("signs", "Signage", tags=frozenset({"regionA"})))
    s.put_entity(ObjectRecord("other", "Log", state={"status": "clear"}, tags=frozenset({"regionB"})))
    return s


ACCIDENT_TRIGGERS = [
    'trigger vehicle_reroute_trigger priority 5 on kind=object_changed tags=regionA '
    'when (= context.delta.status "accident") do v1 reroute route1 sets mode="detour"',
    'trigger control_sign_trigger priority 5 on kind=object_changed tags=regionA '
    'when (= context.delta.status "accident") do control activate signs sets mode="warning"',
    'trigger alert_dispatch priority 9 on entity=incident_log do gateway alert incident_log',
]


def accident(store: Store, time: int = 1, obj: str = "incident_log"):
    bid = store.append_behavior(BehaviorRecord("gateway", "log", obj, Verdict(True), Outcome.APPLIED, time))
    return store.update_object_state(obj, {"status": "accident"}, cause=bid, time=time)


# -- subscriptions ---------------------------------------------------------------

def test_entity_subscription_delivers_once():
    s = road_store()
    eng = TriggerEngine(s)
    eng.subscribe(Subscription("s1", "v1", EventPattern(entity_id="route1")))
    assert eng.publish(s.update_object_state("route1", {"mode": "x"})) == 1
    assert eng.publish(s.update_object_state("signs", {"mode": "x"})) == 0
    got = eng.take_deliveries("v1")
    assert [(sub.subscription_id, ev.entity_id) for sub, ev in got] == [("s1", "route1")]
    assert eng.take_deliveries("v1") == []


def test_tag_scope_is_subset_match():
    s = road_store()
    eng = TriggerEngine(s)
    eng.subscribe(Subscription("a", "v1", EventPattern(tags=frozenset({"regionA"}))))
    eng.subscribe(Subscription("ab", "v2", EventPattern(tags=frozenset({"regionA", "urgent"}))))
    assert eng.publish(s.update_object_state("other", {"status": "x"})) == 0
    ev = s.update_object_state("incident_log", {"status": "x"})
    assert eng.publish(ev) == 1
    ev2 = s.update_object_state("incident_log", {"status": "y"}, extra_tags=["urgent"])
    assert eng.publish(ev2) == 2


def test_overlapping_subscriptions_each_deliver():
    s = road_store()
    eng = TriggerEngine(s)
    eng.subscribe(Subscription("x1", "v1", EventPattern(entity_id="incident_log")))
    eng.subscribe(Subscription("x2", "v1", EventPattern(tags=frozenset({"regionA"}))))
    assert eng.publish(s.update_object_state("incident_log", {"status": "x"})) == 2
    assert len(eng.take_deliveries("v1")) == 2


def test_subscribe_checks_subscriber_and_pattern():
    eng = TriggerEngine(road_store())
    with pytest.raises(TriggerError):
        eng.subscribe(Subscription("z", "ghost", EventPattern(entity_id="route1")))
    with pytest.raises(TriggerError):
        eng.subscribe(Subscription("z", "v1", EventPattern()))


def test_path_prefix_filter():
    p = EventPattern(path_prefix="load")
    s = road_store()
    assert p.matches(s.update_object_state("route1", {"load": 1}))
    assert p.matches(s.update_object_state("route1", {"load.peak": 1}))
    assert not p.matches(s.update_object_state("route1", {"loader": 1}))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["route1", "signs", "other", "incident_log"]),
                          st.booleans()), max_size=25))
def test_per_subscription_delivery_is_ordered_and_lossless(ops):
    s = road_store()
    eng = TriggerEngine(s)
    eng.subscribe(Subscription("a", "v1", EventPattern(tags=frozenset({"regionA"}))))
    eng.subscribe(Subscription("b", "v1", EventPattern(kind=EventKind.EXTERNAL_SIGNAL)))
    for obj, signal in ops:
        ev = s.emit_signal(obj, {"p": 1}, tags=s.get_object(obj).tags) if signal \
            else s.update_object_state(obj, {"p": 1})
        eng.publish(ev)
    got = eng.take_deliveries("v1")
    for sub_id in ("a", "b"):
        ids = [ev.event_id for sub, ev in got if sub.subscription_id == sub_id]
        expected = [ev.event_id for ev in s.change_feed_since(0) if eng._subs[sub_id].pattern.matches(ev)]
        assert ids == expected


# -- matching and firing ------------------------------------------------------

def test_accident_matches_both_coordinating_triggers():
    s = road_store()
    eng = TriggerEngine(s)
    for t in ACCIDENT_TRIGGERS:
        eng.register_trigger(trig(t))
    ev = accident(s)
    ids = [t.trigger_id for t in eng.match_triggers(ev)]
    assert ids == ["alert_dispatch", "control_sign_trigger", "vehicle_reroute_trigger"]


def test_nothing_matches_unrelated_event():
    s = road_store()
    eng = TriggerEngine(s)
    for t in ACCIDENT_TRIGGERS[:2]:
        eng.register_trigger(trig(t))
    assert eng.match_triggers(s.update_object_state("other", {"status": "x"})) == []


def test_drain_order_is_independent_of_registration_order():
    orders = set()
    for perm in itertools.permutations(ACCIDENT_TRIGGERS):
        s = road_store()
        eng = TriggerEngine(s)
        for t in perm:
            eng.register_trigger(trig(t))
        ev = accident(s)
        eng.process(ev, 1)
        drained = eng.drain_pending(1)
        orders.add(tuple(r.origin for r in drained))
        assert all(r.caused_by == 1 and r.cascade_depth == 1 for r in drained)
        assert eng.drain_pending(1) == []
    assert orders == {("alert_dispatch", "control_sign_trigger", "vehicle_reroute_trigger")}


def test_condition_false_is_recorded():
    s = road_store()
    eng = TriggerEngine(s)
    eng.register_trigger(trig(ACCIDENT_TRIGGERS[0]))
    ev = s.update_object_state("incident_log", {"status": "clear"})
    [d] = eng.process(ev, 1)
    assert d.reason is Reason.CONDITION_FALSE and not d.fired
    assert not eng.has_pending()


def test_uncaused_event_gives_root_request():
    s = road_store()
    eng = TriggerEngine(s)
    eng.register_trigger(trig(ACCIDENT_TRIGGERS[1]))
    eng.process(s.update_object_state("incident_log", {"status": "accident"}), 2)
    [req] = eng.drain_pending(2)
    assert req.caused_by is None and req.cascade_depth == 0
    assert req.effects == {"mode": "warning"} and req.subject_id == "control"


def test_threshold_model_feeds_trigger_condition():
    s = Store()
    s.put_entity(SubjectRecord("grid", capabilities=frozenset({"reduce_load"})))
    s.put_entity(ObjectRecord("tx1", "Transformer", state={"temperature": 70}))
    s.put_entity(ForecastModel("hot", ModelKind.THRESHOLD,
                               {"path": "temperature", "bound": 80, "direction": ">"}))
    eng = TriggerEngine(s)
    eng.register_trigger(trig("trigger cool on entity=tx1 path=temperature "
                              "when (= context.model.hot.fired true) do grid reduce_load $event.entity"))
    assert eng.process(s.update_object_state("tx1", {"temperature": 75}, time=1), 1)[0].reason \
        is Reason.CONDITION_FALSE
    assert eng.process(s.update_object_state("tx1", {"temperature": 85}, time=2), 2)[0].fired
    [req] = eng.drain_pending(2)
    assert (req.operation, req.object_id) == ("reduce_load", "tx1")


# -- governance -----------------------------------------------------------------

def test_duplicate_within_window_is_deduped():
    s = road_store()
    eng = TriggerEngine(s, PropagationPolicy(dedup_window=10))
    eng.register_trigger(trig(ACCIDENT_TRIGGERS[2]))
    reasons = []
    for tick in (1, 5, 10, 11, 20, 21):
        reasons.append(eng.process(s.update_object_state("incident_log", {"status": "x"}, time=tick), tick)[0].reason)
    assert reasons == [Reason.FIRED, Reason.DEDUPED, Reason.DEDUPED, Reason.FIRED, Reason.DEDUPED, Reason.FIRED]


def test_dedup_key_subset():
    s = road_store()
    eng = TriggerEngine(s, PropagationPolicy(dedup_key=("actor",)))
    eng.register_trigger(trig("trigger t1 on entity=route1 do v1 alert signs"))
    eng.register_trigger(trig("trigger t2 on entity=route1 do v1 alert incident_log"))
    decisions = eng.process(s.update_object_state("route1", {"x": 1}), 1)
    assert [d.reason for d in decisions] == [Reason.FIRED, Reason.DEDUPED]


def test_depth_cap_is_recorded():
    s = road_store()
    eng = TriggerEngine(s, PropagationPolicy(max_cascade_depth=2))
    eng.register_trigger(trig("trigger t on entity=route1 do v1 alert route1"))
    parent = None
    for depth in range(3):
        parent = s.append_behavior(BehaviorRecord("v1", "alert", "route1", Verdict(True), Outcome.APPLIED, depth,
                                                  caused_by=parent, cascade_depth=depth))
    ev = s.update_object_state("route1", {"x": 1}, cause=parent)
    [d] = eng.process(ev, 3)
    assert d.reason is Reason.DEPTH_EXCEEDED and eng.decisions == [d]


def test_budget_exhaustion_is_recorded():
    s = road_store()
    eng = TriggerEngine(s, PropagationPolicy(tick_budget=2))
    for i in range(4):
        eng.register_trigger(trig(f"trigger t{i} on entity=route1 do v{1 + i % 3} alert route1"))
    decisions = eng.process(s.update_object_state("route1", {"x": 1}), 1)
    assert [d.reason for d in decisions] == [Reason.FIRED] * 2 + [Reason.BUDGET_EXHAUSTED] * 2
    assert len(eng.drain_pending(1)) == 2
    assert eng.process(s.update_object_state("route1", {"x": 2}), 2)[0].reason is Reason.DEDUPED


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32))
def test_at_most_one_fire_per_key_per_window(seed):
    rng = random.Random(seed)
    s = road_store()
    window = rng.randint(1, 6)
    eng = TriggerEngine(s, PropagationPolicy(dedup_window=window))
    for i in range(3):
        eng.register_trigger(trig(f"trigger t{i} on tags=regionA do v{i + 1} alert $event.entity"))
    tick = 0
    for _ in range(40):
        tick += rng.randint(0, 2)
        eng.process(s.update_object_state(rng.choice(["route1", "signs"]), {"x": tick}, time=tick), tick)
    fired: dict[tuple, list[int]] = {}
    for d in eng.decisions:
        if d.fired:
            obj = s.change_feed_since(d.event_id - 1)[0].entity_id
            fired.setdefault((d.trigger_id, obj), []).append(d.tick)
    for ticks in fired.values():
        assert all(b - a >= window for a, b in zip(ticks, ticks[1:]))


def test_policy_validation():
    with pytest.raises(TriggerError):
        PropagationPolicy(dedup_window=0).validate()
    with pytest.raises(TriggerError):
        PropagationPolicy(dedup_key=("colour",)).validate()


def test_trigger_conditions_cannot_see_subjects():
    with pytest.raises(Exception, match="object/context"):
        trig("trigger t on entity=x when (has_role subject admin) do a b c")


def test_trigger_text_round_trip():
    for text in ACCIDENT_TRIGGERS:
        rule = trig(text)
        assert trig(format_trigger(rule)) == rule

"""Offline analysis of run artifacts.

* n-gram next-action prediction over per-subject behavior sequences, where an
  action key is ``(operation, object class)``;
* anomaly scanning: applied behaviors re-checked against the reconstructed
  store state at their execution point, plus transitions that a baseline
  model finds improbable;
* cascade statistics over ``caused_by`` provenance.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .policy import RuleSet, decide
from .records import BehaviorRecord, EventKind, EventRecord, ObjectRecord, Outcome
from .store import Store
from .triggers import FiringDecision

ActionKey = tuple[str, str]
START: ActionKey = ("^", "^")
DEFAULT_THETA = 0.05

ENVELOPE_VIOLATION = "envelope_violation"
NEVER_SEEN = "never_seen_transition"


class AnalysisError(ValueError):
    pass


class ArtifactMismatch(AnalysisError):
    """Log, feed and snapshot do not come from the same run."""


def action_key(record: BehaviorRecord) -> ActionKey:
    return (record.operation, record.object_class)


def format_key(key: ActionKey) -> str:
    return f"{key[0]}:{key[1]}"


def parse_key(text: str) -> ActionKey:
    op, sep, cls = text.partition(":")
    if not sep or not op or not cls:
        raise AnalysisError(f"action key must look like operation:Class, got {text!r}")
    return (op, cls)


def sequences(log: Iterable[BehaviorRecord], outcomes: Optional[Sequence[Outcome]] = (Outcome.APPLIED,)
              ) -> dict[str, list[BehaviorRecord]]:
    """Per-subject records in behavior_id order. ``outcomes=None`` keeps every record."""
    out: dict[str, list[BehaviorRecord]] = {}
    for rec in sorted(log, key=lambda r: r.behavior_id or 0):
        if outcomes is None or rec.outcome in outcomes:
            out.setdefault(rec.subject_id, []).append(rec)
    return dict(sorted(out.items()))


# ---------------------------------------------------------------------------
# n-gram model
# ---------------------------------------------------------------------------

@dataclass
class NGramModel:
    n: int
    counts: dict[tuple[ActionKey, ...], Counter] = field(default_factory=dict)

    @property
    def keys(self) -> list[ActionKey]:
        seen: set[ActionKey] = set()
        for counter in self.counts.values():
            seen.update(counter)
        return sorted(seen)

    def total(self, context: tuple[ActionKey, ...]) -> int:
        return sum(self.counts.get(context, Counter()).values())

    def context_of(self, history: Sequence[ActionKey]) -> tuple[ActionKey, ...]:
        if self.n == 1:
            return ()
        padded = [START] * (self.n - 1) + list(history)
        return tuple(padded[len(padded) - (self.n - 1):])

    def distribution(self, context: tuple[ActionKey, ...]) -> dict[ActionKey, float]:
        counter = self.counts.get(context)
        if not counter:
            keys = self.keys
            return {k: 1.0 / len(keys) for k in keys}
        total = sum(counter.values())
        return {k: counter[k] / total for k in sorted(counter)}

    def probability(self, history: Sequence[ActionKey], key: ActionKey) -> float:
        return self.distribution(self.context_of(history)).get(key, 0.0)


def fit_ngram(log: Iterable[BehaviorRecord], n: int,
              outcomes: Optional[Sequence[Outcome]] = (Outcome.APPLIED,)) -> NGramModel:
    """Count every length-``n`` window of each subject's action sequence.

    Windows that start before the first action are padded with START, so a
    sequence of length L contributes exactly L windows.
    """
    if n < 1:
        raise AnalysisError("n must be >= 1")
    seqs = sequences(log, outcomes)
    if not seqs:
        raise AnalysisError("cannot fit a model on an empty log")
    model = NGramModel(n)
    for records in seqs.values():
        keys = [action_key(r) for r in records]
        for i, key in enumerate(keys):
            ctx = model.context_of(keys[:i])
            model.counts.setdefault(ctx, Counter())[key] += 1
    return model


def predict_next(model: NGramModel, history: Sequence[ActionKey]) -> list[tuple[ActionKey, float]]:
    """Ranked next-action distribution, most likely first, ties by key."""
    dist = model.distribution(model.context_of(history))
    return sorted(dist.items(), key=lambda kv: (-kv[1], kv[0]))


# ---------------------------------------------------------------------------
# Anomaly scan
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Anomaly:
    behavior_id: int
    kind: str
    score: float
    detail: str = ""


@dataclass
class AnomalyReport:
    anomalies: list[Anomaly]
    scanned: int

    def count(self, kind: str) -> int:
        return sum(1 for a in self.anomalies if a.kind == kind)

    @property
    def summary(self) -> dict[str, int]:
        return {ENVELOPE_VIOLATION: self.count(ENVELOPE_VIOLATION), NEVER_SEEN: self.count(NEVER_SEEN)}

    def lines(self) -> list[str]:
        return [
            json.dumps({"behavior_id": a.behavior_id, "kind": a.kind, "score": a.score, "detail": a.detail},
                       separators=(",", ":"))
            for a in self.anomalies
        ]

    def summary_lines(self) -> list[str]:
        s = self.summary
        return [f"scanned {self.scanned}", f"{ENVELOPE_VIOLATION} {s[ENVELOPE_VIOLATION]}", f"{NEVER_SEEN} {s[NEVER_SEEN]}"]


def _recorded_events(log: Sequence[BehaviorRecord], feed: Sequence[EventRecord]) -> dict[int, EventRecord]:
    """Map behavior id to its behavior_recorded event, checking the artifacts agree."""
    by_id = {r.behavior_id: r for r in log}
    if len(by_id) != len(log) or None in by_id:
        raise ArtifactMismatch("log has missing or repeated behavior ids")
    ids = [e.event_id for e in feed]
    if ids != list(range(1, len(feed) + 1)):
        raise ArtifactMismatch("event feed ids are not a gap-free sequence from 1")
    recorded: dict[int, EventRecord] = {}
    for ev in feed:
        if ev.kind is not EventKind.BEHAVIOR_RECORDED:
            continue
        rec = by_id.get(ev.cause_behavior_id)
        if rec is None:
            raise ArtifactMismatch(f"event {ev.event_id} records behavior {ev.cause_behavior_id}, absent from the log")
        if rec.object_id != ev.entity_id or rec.logical_time != ev.logical_time:
            raise ArtifactMismatch(f"event {ev.event_id} disagrees with behavior {rec.behavior_id}")
        if rec.behavior_id in recorded:
            raise ArtifactMismatch(f"behavior {rec.behavior_id} recorded twice in the feed")
        recorded[rec.behavior_id] = ev
    missing = sorted(set(by_id) - set(recorded))
    if missing:
        raise ArtifactMismatch(f"behaviors {missing[:5]} have no behavior_recorded event")
    return recorded


def anomaly_scan(
    log: Sequence[BehaviorRecord],
    initial: Store,
    feed: Sequence[EventRecord],
    baseline: Optional[NGramModel] = None,
    theta: float = DEFAULT_THETA,
    rules: Optional[RuleSet] = None,
) -> AnomalyReport:
    """Flag applied behaviors outside the policy envelope and improbable transitions.

    ``initial`` supplies subjects, objects (with their initial state) and,
    unless ``rules`` is given, the rule set. Object state at each behavior is
    rebuilt from the feed: every object_changed event before the behavior's
    own behavior_recorded event.
    """
    if not 0 <= theta <= 1:
        raise AnalysisError("theta must lie in [0, 1]")
    rules = initial.rules if rules is None else rules
    log = sorted(log, key=lambda r: r.behavior_id or 0)
    recorded = _recorded_events(log, feed)
    for ev in feed:
        if ev.kind is EventKind.OBJECT_CHANGED and initial.get_object(ev.entity_id) is None:
            raise ArtifactMismatch(f"event {ev.event_id} changes unknown object {ev.entity_id!r}")
    for rec in log:
        if initial.get_subject(rec.subject_id) is None or initial.get_object(rec.object_id) is None:
            raise ArtifactMismatch(f"behavior {rec.behavior_id} names an entity missing from the snapshot")

    anomalies: list[Anomaly] = []
    states = {o.id: dict(initial.initial_state(o.id)) for o in initial.objects()}
    changes = iter(e for e in feed if e.kind is EventKind.OBJECT_CHANGED)
    pending = next(changes, None)
    for rec in log:
        if rec.outcome is not Outcome.APPLIED:
            continue
        cutoff = recorded[rec.behavior_id].event_id
        while pending is not None and pending.event_id < cutoff:
            for key, (_, new) in pending.delta.items():
                states[pending.entity_id][key] = new
            pending = next(changes, None)
        base = initial.get_object(rec.object_id)
        obj = ObjectRecord(base.id, base.cls, base.attributes, dict(states[rec.object_id]), base.affordances, base.tags)
        verdict = decide(initial.get_subject(rec.subject_id), obj, rec.operation, rec.args, rec.context, rules)
        if not verdict.allow:
            anomalies.append(Anomaly(rec.behavior_id, ENVELOPE_VIOLATION, 1.0, verdict.summary()))

    if baseline is not None:
        for records in sequences(log).values():
            history: list[ActionKey] = []
            for rec in records:
                key = action_key(rec)
                p = baseline.probability(history, key)
                if p < theta:
                    ctx = " ".join(format_key(k) for k in baseline.context_of(history))
                    anomalies.append(Anomaly(rec.behavior_id, NEVER_SEEN, 1.0 - p,
                                             f"{ctx} -> {format_key(key)} p={p:.6g}"))
                history.append(key)
    anomalies.sort(key=lambda a: (a.behavior_id, a.kind))
    return AnomalyReport(anomalies, len(log))


# ---------------------------------------------------------------------------
# Cascade statistics
# ---------------------------------------------------------------------------

@dataclass
class CascadeStats:
    depth_histogram: dict[int, int]
    fan_out: dict[int, int]
    roots: dict[int, int]  # behavior id -> root id
    max_fan_out: dict[int, int]  # root id -> largest fan-out in its tree
    chain_length: dict[int, int]  # root id -> deepest depth in its tree
    trigger_tallies: dict[str, dict[str, int]]

    @property
    def mean_chain_length(self) -> float:
        if not self.chain_length:
            return 0.0
        return sum(self.chain_length.values()) / len(self.chain_length)

    def lines(self) -> list[str]:
        out = ["depth " + " ".join(f"{d}:{c}" for d, c in self.depth_histogram.items())]
        for root in self.chain_length:
            out.append(f"root {root} chain_length {self.chain_length[root]} max_fan_out {self.max_fan_out[root]}")
        out.append(f"mean_chain_length {self.mean_chain_length:.6g}")
        for trig, tally in self.trigger_tallies.items():
            out.append(f"trigger {trig} " + " ".join(f"{k}={v}" for k, v in tally.items()))
        return out


def cascade_stats(log: Sequence[BehaviorRecord], decisions: Sequence[FiringDecision] = ()) -> CascadeStats:
    log = sorted(log, key=lambda r: r.behavior_id or 0)
    by_id = {r.behavior_id: r for r in log}
    hist: Counter = Counter(r.cascade_depth for r in log)
    fan_out = {r.behavior_id: 0 for r in log}
    roots: dict[int, int] = {}
    for rec in log:
        parent = rec.caused_by
        if parent is not None:
            if parent not in by_id:
                raise ArtifactMismatch(f"behavior {rec.behavior_id} caused by unknown {parent}")
            fan_out[parent] += 1
            roots[rec.behavior_id] = roots[parent]
        else:
            roots[rec.behavior_id] = rec.behavior_id
    max_fan: dict[int, int] = {}
    chain: dict[int, int] = {}
    for rec in log:
        root = roots[rec.behavior_id]
        max_fan[root] = max(max_fan.get(root, 0), fan_out[rec.behavior_id])
        chain[root] = max(chain.get(root, 0), rec.cascade_depth)
    tallies: dict[str, Counter] = {}
    for d in decisions:
        tallies.setdefault(d.trigger_id, Counter())[d.reason.value] += 1
    return CascadeStats(
        depth_histogram=dict(sorted(hist.items())),
        fan_out=fan_out,
        roots=roots,
        max_fan_out=max_fan,
        chain_length=chain,
        trigger_tallies={k: dict(sorted(v.items())) for k, v in sorted(tallies.items())},
    )


def prediction_lines(ranked: Sequence[tuple[ActionKey, float]]) -> list[str]:
    return [json.dumps({"action": format_key(k), "p": p}, separators=(",", ":")) for k, p in ranked]


def history_of(log: Iterable[BehaviorRecord], subject_id: str) -> list[ActionKey]:
    return [action_key(r) for r in sequences(log).get(subject_id, [])]


__all__ = [
    "Anomaly",
    "AnomalyReport",
    "AnalysisError",
    "ArtifactMismatch",
    "CascadeStats",
    "NGramModel",
    "START",
    "action_key",
    "anomaly_scan",
    "cascade_stats",
    "fit_ngram",
    "history_of",
    "predict_next",
]


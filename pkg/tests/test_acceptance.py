"""The nine acceptance criteria, one test each.

Every test prints a single ``PASS`` or ``FAIL`` line (shown even under
pytest's output capture) before asserting. Run directly with
``python tests/test_acceptance.py`` for just the verdict lines.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
import random
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import gen  # noqa: E402
import oracles  # noqa: E402
from bun.analyzer import ENVELOPE_VIOLATION, START, anomaly_scan, fit_ngram, predict_next  # noqa: E402
from bun.policy import RuleSet, Verdict, decide  # noqa: E402
from bun.predicate import parse_predicate, same_expr, to_text  # noqa: E402
from bun.records import BehaviorRecord, Outcome  # noqa: E402
from bun.scenario import bundled_names, load_bundled  # noqa: E402
from bun.sim import export_decisions, run  # noqa: E402
from bun.store import behavior_to_line, event_to_line  # noqa: E402
from bun.triggers import Reason  # noqa: E402

_emit = print


@pytest.fixture(autouse=True)
def _show(capsys):
    global _emit

    def emit(line: str) -> None:
        with capsys.disabled():
            print(line)

    _emit = emit
    yield
    _emit = print


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    _emit(f"{'PASS' if ok else 'FAIL'} [{number}] {title}: {detail}")
    assert ok, detail


def test_1_validity_oracle_equivalence():
    rng = random.Random(20240601)
    pairs, mismatches = 10_000, 0
    start = time.perf_counter()
    for _ in range(pairs):
        rules = gen.ruleset(rng, 5)
        s, o, op = gen.subject(rng), gen.obj(rng), rng.choice(gen.OPS)
        args = {"k": gen.value(rng)}
        ctx = gen.context(rng)
        v = decide(s, o, op, args, ctx, RuleSet(rules))
        allow, per_rule = oracles.brute_force_decide(s, o, op, args, ctx, rules)
        if v.allow != allow or {r.rule_id: (r.p1, r.p2, r.p3) for r in v.evaluated} != per_rule:
            mismatches += 1
    elapsed = time.perf_counter() - start
    verdict(1, "validity oracle", mismatches == 0 and elapsed < 10,
            f"{pairs} pairs, {mismatches} mismatches, {elapsed:.2f}s")


def _exports(name: str) -> tuple[str, str, str]:
    _, res = run(load_bundled(name))
    return ("".join(behavior_to_line(r) + "\n" for r in res.log),
            "".join(event_to_line(e) + "\n" for e in res.feed),
            export_decisions(res.decisions))


def test_2_determinism():
    names = ["traffic", "transformer", "document_embargo", "ping_pong", "failover"]
    start = time.perf_counter()
    differing = [n for n in names if _exports(n) != _exports(n)]
    elapsed = time.perf_counter() - start
    verdict(2, "determinism", not differing and elapsed < 5,
            f"{len(names)} scenarios twice, differing={differing}, {elapsed:.2f}s")


def test_3_traffic_fidelity():
    sc = load_bundled("traffic")
    _, res = run(sc)
    root = next(r for r in res.log if r.operation == "log" and r.object_id == "incident_log")
    depth1 = [r for r in res.log if r.cascade_depth == 1]
    in_scope = {s.id for s in sc.subjects if s.attributes.get("region") == "A"}
    out_scope = {s.id for s in sc.subjects if s.attributes.get("region") == "B"}
    ok = (
        len(in_scope) == 5
        and len(depth1) == 6
        and all(r.caused_by == root.behavior_id for r in depth1)
        and {r.subject_id for r in depth1} == in_scope | {"control"}
        and not any(r.subject_id in out_scope for r in res.log)
    )
    verdict(3, "traffic fidelity", ok,
            f"{len(depth1)} depth-1 behaviors caused by #{root.behavior_id}, "
            f"{sum(r.subject_id in out_scope for r in res.log)} out-of-scope")


def test_4_oscillation_governance():
    _, pp = run(load_bundled("ping_pong"))
    exceeded = [d for d in pp.decisions if d.reason is Reason.DEPTH_EXCEEDED]
    chain = max(r.cascade_depth for r in pp.log)
    sc = load_bundled("dedup")
    _, dd = run(sc)
    window = sc.policy.dedup_window
    fired_ticks = [d.tick for d in dd.decisions if d.fired]
    first, last = min(d.tick for d in dd.decisions), max(d.tick for d in dd.decisions)
    # windows open at the first decision, which is when the dedup clock starts
    per_window = [sum(1 for t in fired_ticks if w <= t < w + window) for w in range(first, last + 1, window)]
    ok = (pp.quiescent and len(exceeded) == 1 and chain == 4
          and load_bundled("ping_pong").policy.max_cascade_depth == 4
          and window == 10 and all(n == 1 for n in per_window)
          and any(d.reason is Reason.DEDUPED for d in dd.decisions))
    verdict(4, "oscillation governance", ok,
            f"ping-pong depth_exceeded={len(exceeded)} chain={chain}; "
            f"fired per {window}-tick window from tick {first}: {per_window}")


def test_5_envelope_soundness():
    clean = {}
    for name in bundled_names():
        _, res = run(load_bundled(name))
        clean[name] = anomaly_scan(res.log, load_bundled(name).build_store(), res.feed).count(ENVELOPE_VIOLATION)
    _, res = run(load_bundled("document_embargo"))
    target = next(r for r in res.log if r.subject_id == "bob")
    doctored = [dataclasses.replace(r, outcome=Outcome.APPLIED, verdict=Verdict(True), reason=None)
                if r.behavior_id == target.behavior_id else r for r in res.log]
    report = anomaly_scan(doctored, load_bundled("document_embargo").build_store(), res.feed)
    hits = [(a.behavior_id, a.score) for a in report.anomalies if a.kind == ENVELOPE_VIOLATION]
    ok = all(v == 0 for v in clean.values()) and hits == [(target.behavior_id, 1.0)]
    verdict(5, "envelope soundness", ok,
            f"clean violations={sum(clean.values())} over {len(clean)} runs; injected -> {hits}")


def test_6_mutex():
    _, res = run(load_bundled("mutex"))
    ticks = sorted({r.logical_time for r in res.log})
    shapes = []
    for t in ticks:
        recs = [r for r in res.log if r.logical_time == t]
        shapes.append((len(recs), sum(r.outcome is Outcome.APPLIED for r in recs),
                       sum(r.outcome is Outcome.DENIED and r.reason == "mutex" for r in recs)))
    ok = bool(ticks) and all(s == (10, 1, 9) for s in shapes)
    verdict(6, "mutex", ok, f"{len(ticks)} contested ticks, (requests, applied, mutex-denied)={set(shapes)}")


def _log(seqs: list[str]) -> list[BehaviorRecord]:
    out = []
    for sid, seq in enumerate(seqs):
        for i, op in enumerate(seq):
            out.append(BehaviorRecord(f"s{sid}", op, "o", Verdict(True), Outcome.APPLIED, i,
                                      object_class="K", behavior_id=len(out) + 1))
    return out


def _small_logs(rng: random.Random, fuzzed: int):
    """Every single-subject log over A,B,C up to length 7, then fuzzed multi-subject logs up to 20."""
    for length in range(1, 8):
        for combo in itertools.product("ABC", repeat=length):
            yield "ABC", ["".join(combo)]
    for _ in range(fuzzed):
        total = rng.randint(1, 20)
        alphabet = "ABCDE"[: rng.randint(1, 5)]
        cuts = sorted(rng.sample(range(1, total), min(rng.randint(0, 2), total - 1))) if total > 1 else []
        flat = "".join(rng.choice(alphabet) for _ in range(total))
        yield alphabet, [flat[a:b] for a, b in zip([0] + cuts, cuts + [total])]


def test_7_predictor_oracle():
    worst, bad_sums, logs = 0.0, 0, 0
    for alphabet, seqs in _small_logs(random.Random(7), 1000):
        logs += 1
        model = fit_ngram(_log(seqs), 2)
        oracle = oracles.bigram_probabilities([[(c, "K") for c in s] for s in seqs])
        for prev in [START] + [(c, "K") for c in alphabet]:
            dist = dict(predict_next(model, [] if prev == START else [prev]))
            if not math.isclose(sum(dist.values()), 1.0, abs_tol=1e-9) or min(dist.values()) < 0:
                bad_sums += 1
            if prev in oracle:
                expected = {k: float(v) for k, v in oracle[prev].items()}
                if set(dist) != set(expected):
                    worst = math.inf
                    continue
                worst = max([worst] + [abs(dist[k] - expected[k]) for k in expected])
    ok = worst <= 1e-9 and bad_sums == 0
    verdict(7, "predictor oracle", ok,
            f"{logs} logs (exhaustive to length 7 + 1000 fuzzed), "
            f"max |error|={worst:.2e}, bad distributions={bad_sums}")


def test_8_negotiation_timeout():
    sc = load_bundled("negotiation")
    _, res = run(sc)
    [rule] = sc.negotiations
    request = next(r for r in res.log if r.behavior_id in {d.request_id for d in res.directives})
    [d] = res.directives
    fallback_done = [r for r in res.log if r.subject_id == d.fallback and r.outcome is Outcome.APPLIED
                     and r.logical_time >= d.fire_tick]
    ok = (rule.deadline == 5 and d.fire_tick == request.logical_time + 5 and bool(fallback_done)
          and not any(r.subject_id == d.responder for r in res.log))
    verdict(8, "negotiation timeout", ok,
            f"request at {request.logical_time}, directive at {d.fire_tick}, "
            f"fallback {d.fallback} acted at {[r.logical_time for r in fallback_done]}")


def test_9_predicate_round_trip():
    rng = random.Random(9)
    n, failures = 10_000, 0
    for _ in range(n):
        e = gen.expr(rng, list(gen.PATHS), 8, weird=True)
        text = to_text(e)
        back = parse_predicate(text)
        if to_text(back) != text or not same_expr(back, e):
            failures += 1
    verdict(9, "predicate round trip", failures == 0, f"{n} ASTs, {failures} not fixed points")


if __name__ == "__main__":
    failed = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            try:
                fn()
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)

"""Command-line entry point.

Exit codes: 0 success (quiescent run, allow verdict), 1 usage/load/artifact
error, 2 run stopped at the tick limit, 3 deny verdict. Machine output goes
to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import sys
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .analyzer import (
    DEFAULT_THETA,
    AnalysisError,
    anomaly_scan,
    fit_ngram,
    format_key,
    history_of,
    parse_key,
    predict_next,
    prediction_lines,
)
from .artifacts import BEHAVIORS, FINAL, load_run, render_run, run_id, write_run
from .literals import LiteralError, parse_literal
from .policy import UnresolvedReference, ValidityRequest, check_validity
from .scenario import ScenarioError, bundled_names, bundled_text, load_scenario
from .sim import Simulation, decision_to_line, summary_lines
from .store import Store, behavior_to_line, event_to_line

EXIT_OK, EXIT_ERROR, EXIT_LIMIT, EXIT_DENY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 by default; 2 means "tick limit" here
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _read_scenario(path: str) -> tuple[str, str]:
    """Scenario text and a display name; falls back to the bundled copy by file name."""
    p = Path(path)
    if p.is_file():
        return p.read_text(encoding="utf-8"), str(p)
    name = p.name[:-4] if p.name.endswith(".bun") else p.name
    if name in bundled_names():
        return bundled_text(name), f"<bundled {name}>"
    raise FileNotFoundError(f"{path}: no such scenario file")


def _out(lines: Sequence[str]) -> None:
    for line in lines:
        sys.stdout.write(line + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    text, _ = _read_scenario(args.scenario)
    scenario = load_scenario(text)
    seed = scenario.seed if args.seed is None else args.seed
    sim = Simulation(scenario, seed)
    initial = sim.store.export_snapshot()
    result = sim.run(args.max_ticks)
    rid = run_id(text, seed, args.max_ticks)
    files = render_run(sim, result, initial, rid)
    out = Path(args.out) if args.out else Path("runs") / f"{scenario.name}-{seed}"
    write_run(out, files)
    if args.format == "summary":
        _out([f"run_id {rid}", f"out {out}", *summary_lines(result)])
    else:
        sys.stdout.write(files[BEHAVIORS])
    if not result.quiescent:
        print(f"stopped at tick limit {args.max_ticks} before quiescence", file=sys.stderr)
    return result.exit_code


def _assignments(items: Sequence[str]) -> dict:
    out = {}
    for item in items or ():
        key, eq, raw = item.partition("=")
        if not eq or not key:
            raise UsageError(f"expected key=value, got {item!r}")
        try:
            out[key] = parse_literal(raw, bare_strings=True)
        except LiteralError as exc:
            raise UsageError(f"{item}: {exc}") from None
    return out


def cmd_check(args) -> int:
    text, _ = _read_scenario(args.scenario)
    store = load_scenario(text).build_store()
    tags = frozenset(t for t in (args.tags or "").split(",") if t)
    request = ValidityRequest(args.subject, args.op, args.object, _assignments(args.arg),
                              {"logical_time": args.time, "tags": tags})
    verdict = check_validity(request, store.rules, store)
    if args.format == "summary":
        _out(verdict.explain())
    else:
        _out([verdict.summary(), *verdict.explain()[1:]])
    return EXIT_OK if verdict.allow else EXIT_DENY


WHERE_FIELDS = (
    "behavior_id", "logical_time", "subject_id", "operation", "object_id", "object_class",
    "outcome", "cascade_depth", "caused_by", "reason", "verdict",
)


def _field_text(rec, name: str) -> str:
    value = getattr(rec, name)
    if name == "verdict":
        return value.summary()
    if name == "outcome":
        return value.value
    return "" if value is None else str(value)


def cmd_inspect(args) -> int:
    run = load_run(Path(args.run))
    where = []
    for item in args.where or ():
        key, eq, value = item.partition("=")
        if not eq or key not in WHERE_FIELDS:
            raise UsageError(f"unknown filter field {key!r} (known: {', '.join(WHERE_FIELDS)})")
        where.append((key, value))
    shortcuts = {"subject_id": args.subject, "object_id": args.object, "operation": args.operation,
                 "outcome": args.outcome}
    where += [(k, v) for k, v in shortcuts.items() if v is not None]
    rows = [
        r for r in run.log
        if all(_field_text(r, k) == v for k, v in where)
        and (args.time_from is None or r.logical_time >= args.time_from)
        and (args.time_to is None or r.logical_time <= args.time_to)
    ]
    if args.format == "summary":
        _out([
            f"{r.behavior_id} t={r.logical_time} {r.subject_id}:{r.operation}({r.object_id}) "
            f"{r.outcome.value} {r.verdict.summary()} depth={r.cascade_depth}"
            + (f" caused_by={r.caused_by}" if r.caused_by is not None else "")
            + (f" reason={r.reason}" if r.reason else "")
            for r in rows
        ])
        _out([f"matched {len(rows)} of {len(run.log)}"])
    else:
        _out([behavior_to_line(r) for r in rows])
    return EXIT_OK


def cmd_predict(args) -> int:
    run = load_run(Path(args.run))
    model = fit_ngram(run.log, args.n)
    if args.history is not None:
        history = [parse_key(k) for k in args.history.split(",") if k]
    else:
        if args.subject is None:
            raise UsageError("predict needs --subject or --history")
        history = history_of(run.log, args.subject)
    ranked = predict_next(model, history)
    if args.format == "summary":
        ctx = " ".join(format_key(k) for k in model.context_of(history)) or "(none)"
        _out([f"context {ctx}", *(f"{format_key(k)} {p:.6f}" for k, p in ranked)])
    else:
        _out(prediction_lines(ranked))
    return EXIT_OK


def cmd_scan(args) -> int:
    target = args.test or args.run
    if target is None:
        raise UsageError("scan needs a run directory (positional or --test)")
    test = load_run(Path(target))
    baseline = None
    if args.baseline is not None:
        base = load_run(Path(args.baseline))
        baseline = fit_ngram(base.log, args.n)
    report = anomaly_scan(test.log, test.initial, test.feed, baseline, float(args.theta))
    _out(report.summary_lines() if args.format == "summary" else report.lines())
    if args.format == "summary":
        _out([f"{a.behavior_id} {a.kind} {a.score:.6f} {a.detail}" for a in report.anomalies])
    return EXIT_OK


def cmd_export(args) -> int:
    src = Path(args.source)
    if (src / "manifest.json").is_file():
        run = load_run(src)
        if args.what == "log":
            sys.stdout.write("".join(behavior_to_line(r) + "\n" for r in run.log))
        elif args.what == "feed":
            sys.stdout.write("".join(event_to_line(e) + "\n" for e in run.feed))
        elif args.what == "decisions":
            sys.stdout.write("".join(decision_to_line(d) + "\n" for d in run.decisions))
        elif args.what == "final":
            sys.stdout.write(Store.import_snapshot(run.texts[FINAL]).export_snapshot())
        else:
            sys.stdout.write(run.initial.export_snapshot())
        return EXIT_OK
    if args.what not in ("snapshot",):
        raise UsageError(f"--what {args.what} needs a run directory")
    text, _ = _read_scenario(args.source)
    sys.stdout.write(load_scenario(text).build_store().export_snapshot())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _theta(text: str) -> Decimal:
    try:
        value = Decimal(text)
    except InvalidOperation:
        raise argparse.ArgumentTypeError(f"not a decimal: {text!r}") from None
    if not 0 <= value <= 1:
        raise argparse.ArgumentTypeError("theta must lie in [0, 1]")
    return value


def _order(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("n must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bun", description="Run and analyze subject-operation-object behavior scenarios.")
    p.add_argument("--version", action="version", version=f"bun {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    fmt = dict(choices=("lines", "summary"), default="lines")

    r = sub.add_parser("run", help="simulate a scenario and write run artifacts")
    r.add_argument("scenario")
    r.add_argument("--seed", type=int)
    r.add_argument("--max-ticks", type=int, default=1000)
    r.add_argument("--out")
    r.add_argument("--format", **fmt)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("check", help="decide one behavior against a scenario's initial state")
    c.add_argument("scenario")
    c.add_argument("--subject", required=True)
    c.add_argument("--op", required=True)
    c.add_argument("--object", required=True)
    c.add_argument("--time", type=int, default=0, help="logical time of the request")
    c.add_argument("--tags", help="comma-separated context tags")
    c.add_argument("--arg", action="append", help="operation argument key=value (repeatable)")
    c.add_argument("--format", **fmt)
    c.set_defaults(func=cmd_check)

    i = sub.add_parser("inspect", help="filter a run's behavior log")
    i.add_argument("run")
    i.add_argument("--subject")
    i.add_argument("--object")
    i.add_argument("--operation")
    i.add_argument("--outcome", choices=("applied", "denied", "failed"))
    i.add_argument("--from", dest="time_from", type=int)
    i.add_argument("--to", dest="time_to", type=int)
    i.add_argument("--where", action="append", help="field=value (repeatable)")
    i.add_argument("--format", **fmt)
    i.set_defaults(func=cmd_inspect)

    pr = sub.add_parser("predict", help="rank a subject's likely next actions")
    pr.add_argument("run")
    pr.add_argument("--subject")
    pr.add_argument("--history", help="comma-separated operation:Class keys, overrides --subject")
    pr.add_argument("--n", type=_order, default=2)
    pr.add_argument("--format", **fmt)
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("scan", help="report envelope violations and improbable transitions")
    s.add_argument("run", nargs="?")
    s.add_argument("--test")
    s.add_argument("--baseline")
    s.add_argument("--theta", type=_theta, default=Decimal(str(DEFAULT_THETA)))
    s.add_argument("--n", type=_order, default=2)
    s.add_argument("--format", **fmt)
    s.set_defaults(func=cmd_scan)

    e = sub.add_parser("export", help="re-emit a snapshot, log, feed or decisions canonically")
    e.add_argument("source", help="run directory or scenario file")
    e.add_argument("--what", choices=("snapshot", "final", "log", "feed", "decisions"), default="snapshot")
    e.set_defaults(func=cmd_export)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"bun: error: {exc}", file=sys.stderr)
    except ScenarioError as exc:
        print(f"bun: scenario error: {exc}", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {problem}", file=sys.stderr)
    except (UnresolvedReference, AnalysisError, OSError, ValueError) as exc:
        print(f"bun: error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

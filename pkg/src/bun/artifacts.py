"""Run directories: the files a simulation run leaves on disk.

``manifest.json`` names the run id and the sha256 of every artifact, so a
directory whose files were swapped or edited is detected on load.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .analyzer import ArtifactMismatch, cascade_stats
from .records import BehaviorRecord, EventRecord
from .sim import RunResult, Simulation, decision_from_line, export_decisions, summary_lines
from .store import Store, behavior_from_line, event_from_line, read_lines
from .textfmt import FormatError
from .triggers import FiringDecision

MANIFEST = "manifest.json"
BEHAVIORS = "behaviors.log"
EVENTS = "events.log"
DECISIONS = "decisions.log"
INITIAL = "initial.snapshot"
FINAL = "final.snapshot"
SUMMARY = "summary.txt"
ARTIFACTS = (BEHAVIORS, EVENTS, DECISIONS, INITIAL, FINAL, SUMMARY)


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def run_id(scenario_text: str, seed: int, max_ticks: int) -> str:
    return _sha(f"{seed}\n{max_ticks}\n{scenario_text}")[:16]


def render_run(sim: Simulation, result: RunResult, initial_snapshot: str, rid: str) -> dict[str, str]:
    stats = cascade_stats(result.log, result.decisions)
    summary = [f"run_id {rid}", *summary_lines(result), *stats.lines()]
    files = {
        BEHAVIORS: sim.store.export_log(),
        EVENTS: sim.store.export_feed(),
        DECISIONS: export_decisions(result.decisions),
        INITIAL: initial_snapshot,
        FINAL: sim.store.export_snapshot(),
        SUMMARY: "\n".join(summary) + "\n",
    }
    manifest = {"run_id": rid, "files": {name: _sha(files[name]) for name in ARTIFACTS}}
    files[MANIFEST] = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    return files


def write_run(out: Path, files: dict[str, str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text, encoding="utf-8")


@dataclass
class RunArtifacts:
    run_id: str
    log: list[BehaviorRecord]
    feed: list[EventRecord]
    decisions: list[FiringDecision]
    initial: Store
    texts: dict[str, str]


def load_run(path: Path) -> RunArtifacts:
    path = Path(path)
    manifest_path = path / MANIFEST
    if not manifest_path.is_file():
        raise FileNotFoundError(f"{path}: no {MANIFEST}; not a run directory")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        rid = manifest["run_id"]
        hashes = manifest["files"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ArtifactMismatch(f"{manifest_path}: unreadable manifest ({exc})") from None
    texts = {}
    for name in ARTIFACTS:
        file = path / name
        if not file.is_file():
            raise ArtifactMismatch(f"{file}: missing artifact of run {rid}")
        texts[name] = file.read_text(encoding="utf-8")
        if hashes.get(name) != _sha(texts[name]):
            raise ArtifactMismatch(f"{file}: does not belong to run {rid} (hash mismatch)")
    try:
        return RunArtifacts(
            run_id=rid,
            log=read_lines(texts[BEHAVIORS], behavior_from_line),
            feed=read_lines(texts[EVENTS], event_from_line),
            decisions=read_lines(texts[DECISIONS], decision_from_line),
            initial=Store.import_snapshot(texts[INITIAL]),
            texts=texts,
        )
    except (FormatError, ValueError, KeyError) as exc:
        raise ArtifactMismatch(f"{path}: malformed artifact ({exc})") from None

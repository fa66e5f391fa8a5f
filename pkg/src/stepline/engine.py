"""Staleness detection, minimal planning and parallel task execution.

Staleness is content-based: SHA-256 digests of the task's script, its
declared input files, the referenced parameter values and the resolved
command line.  Timestamps never enter the decision, so touching a file
without changing bytes re-runs nothing.

Concurrency contract: the graph and plan are immutable during execution;
at most ``jobs`` child processes run at once; every StateStore mutation
happens in the controller thread (single writer) and is persisted
atomically after each completed step, so a crash never loses the steps
that already finished.
"""

from __future__ import annotations

import json
import logging
import os
import subprocess
import time
from collections import deque
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

from .depgraph import DependencyGraph, descendants, topo_order
from .errors import StateStoreError, UnknownInstanceError
from .fsutil import atomic_write_text, sha256_bytes, sha256_file
from .manifest import TaskInstance

log = logging.getLogger("stepline")

STATE_DIR = ".stepline"
STATE_FILE = "state.json"

UP_TO_DATE = "up_to_date"
NEVER_RUN = "never_run"
STALE = "stale"
MISSING_RAW_INPUT = "missing_raw_input"

SCRIPT_CHANGED = "script_changed"
INPUT_CHANGED = "input_changed"
PARAM_CHANGED = "param_changed"
COMMAND_CHANGED = "command_changed"
TARGET_MISSING = "target_missing"


def state_path(root: Path) -> Path:
    return Path(root) / STATE_DIR / STATE_FILE


def now_rfc3339() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds").replace("+00:00", "Z")


@dataclass(frozen=True)
class Fingerprint:
    """Content digests that decide whether an instance is up to date."""

    script: str | None  # digest of the command's script file, if any
    inputs: dict  # dep path -> hex digest (None while a file is missing)
    params: str  # digest of canonically serialized referenced params
    command: str  # digest of the resolved command string

    def to_record(self) -> dict:
        return {"script": self.script, "inputs": dict(self.inputs), "params": self.params, "command": self.command}

    @classmethod
    def from_record(cls, data: dict) -> "Fingerprint":
        return cls(
            script=data.get("script"),
            inputs=dict(data.get("inputs", {})),
            params=data.get("params", ""),
            command=data.get("command", ""),
        )


@dataclass(frozen=True)
class Reason:
    kind: str
    path: str | None = None

    def __str__(self) -> str:
        return f"{self.kind}({self.path})" if self.path else self.kind


@dataclass(frozen=True)
class InstanceStatus:
    state: str  # UP_TO_DATE | NEVER_RUN | STALE | MISSING_RAW_INPUT
    reasons: tuple = ()
    missing_path: str | None = None

    @property
    def is_up_to_date(self) -> bool:
        return self.state == UP_TO_DATE


@dataclass
class StateRecord:
    fingerprint: Fingerprint
    targets: tuple
    completed_at: str


class StateStore:
    """Per-instance fingerprints persisted as ``.stepline/state.json``.

    Written via temp-file-then-rename, so the file on disk is always a
    complete JSON document.  Absence of a record means never run.
    """

    def __init__(self, path: Path, records: dict | None = None):
        self.path = Path(path)
        self.records: dict = records or {}

    @classmethod
    def load(cls, path: Path) -> "StateStore":
        path = Path(path)
        if not path.exists():
            return cls(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise StateStoreError(f"cannot read state store {path}: {exc}") from exc
        records = {}
        for instance_id, entry in raw.items():
            records[instance_id] = StateRecord(
                fingerprint=Fingerprint.from_record(entry),
                targets=tuple(entry.get("targets", ())),
                completed_at=entry.get("completed_at", ""),
            )
        return cls(path, records)

    def save(self) -> None:
        payload = {}
        for instance_id, rec in sorted(self.records.items()):
            entry = rec.fingerprint.to_record()
            entry["targets"] = list(rec.targets)
            entry["completed_at"] = rec.completed_at
            payload[instance_id] = entry
        atomic_write_text(self.path, json.dumps(payload, indent=1, sort_keys=True) + "\n")

    def get(self, instance_id: str):
        return self.records.get(instance_id)

    def set(self, instance_id: str, record: StateRecord) -> None:
        self.records[instance_id] = record

    def remove(self, instance_id: str) -> None:
        self.records.pop(instance_id, None)


# --------------------------------------------------------------------------
# fingerprints


def find_script(command: str, root: Path) -> str | None:
    """First whitespace-delimited command token naming a file under root.

    This is the one-script-per-task heuristic: ``python scripts/03_x.py s1``
    resolves to ``scripts/03_x.py``.  Tokens with unresolved placeholders
    are skipped.
    """
    for token in command.split():
        if "{" in token:
            continue
        candidate = Path(root) / token
        if candidate.is_file():
            return token
    return None


def canonical_param_digest(params: dict, refs) -> str:
    """Digest of the referenced parameter values, order-independent."""
    subset = {name: params[name] for name in sorted(set(refs))}
    return sha256_bytes(json.dumps(subset, sort_keys=True, separators=(",", ":")).encode("utf-8"))


def fingerprint(instance: TaskInstance, params: dict, root: Path) -> Fingerprint:
    """Fingerprint with every dep present on disk; raises OSError otherwise."""
    fp = _fingerprint_tolerant(instance, params, root)
    for path, digest in fp.inputs.items():
        if digest is None:
            raise FileNotFoundError(f"{instance.instance_id}: missing input file {path!r}")
    return fp


def _fingerprint_tolerant(instance: TaskInstance, params: dict, root: Path) -> Fingerprint:
    root = Path(root)
    script = find_script(instance.resolved_command, root)
    script_digest = sha256_file(root / script) if script else None
    inputs = {}
    for dep in instance.expanded_deps:
        path = root / dep
        inputs[dep] = sha256_file(path) if path.is_file() else None
    return Fingerprint(
        script=script_digest,
        inputs=inputs,
        params=canonical_param_digest(params, instance.task.param_refs),
        command=sha256_bytes(instance.resolved_command.encode("utf-8")),
    )


# --------------------------------------------------------------------------
# status and planning


def status(
    instance: TaskInstance,
    params: dict,
    store: StateStore,
    root: Path,
    raw_inputs=frozenset(),
) -> InstanceStatus:
    """Compare the instance against its recorded fingerprint.

    Up to date means: a record exists, its fingerprint matches the current
    content, and every declared target exists.  All applicable staleness
    reasons are accumulated, not just the first.
    """
    root = Path(root)
    for dep in instance.expanded_deps:
        if dep in raw_inputs and not (root / dep).exists():
            return InstanceStatus(MISSING_RAW_INPUT, missing_path=dep)
    record = store.get(instance.instance_id)
    if record is None:
        return InstanceStatus(NEVER_RUN)

    current = _fingerprint_tolerant(instance, params, root)
    old = record.fingerprint
    reasons = []
    if current.script != old.script:
        reasons.append(Reason(SCRIPT_CHANGED, find_script(instance.resolved_command, root)))
    seen = list(dict.fromkeys(list(current.inputs) + sorted(set(old.inputs) - set(current.inputs))))
    for path in seen:
        if current.inputs.get(path) != old.inputs.get(path):
            reasons.append(Reason(INPUT_CHANGED, path))
    if current.params != old.params:
        reasons.append(Reason(PARAM_CHANGED))
    if current.command != old.command:
        reasons.append(Reason(COMMAND_CHANGED))
    for target in instance.expanded_targets:
        if not (root / target).exists():
            reasons.append(Reason(TARGET_MISSING, target))
    if reasons:
        return InstanceStatus(STALE, reasons=tuple(reasons))
    return InstanceStatus(UP_TO_DATE)


@dataclass(frozen=True)
class ExecutionPlan:
    steps: tuple  # (instance_id, resolved_command) in execution order
    skipped: tuple  # (instance_id, InstanceStatus) for up-to-date instances
    scheduled: frozenset
    statuses: dict
    blocked_policy: str = "halt-descendants"


def plan(
    graph: DependencyGraph,
    instances: list[TaskInstance],
    params: dict,
    store: StateStore,
    root: Path,
    selection=None,
) -> ExecutionPlan:
    """Schedule the minimal set: stale instances plus everything downstream.

    An instance is scheduled iff it lies in the selection closure (the
    selected instances plus their descendants; everything by default) and
    is not up to date or has a scheduled ancestor inside the closure.
    """
    by_id = {inst.instance_id: inst for inst in instances}
    all_nodes = set(graph.nodes)
    if selection is None:
        closure = all_nodes
    else:
        sel = set(selection)
        unknown = sel - all_nodes
        if unknown:
            raise UnknownInstanceError(f"unknown instances: {', '.join(sorted(unknown))}")
        closure = sel | descendants(graph, sel)

    statuses = {sid: status(by_id[sid], params, store, root, graph.raw_inputs) for sid in closure}
    scheduled = {sid for sid in closure if statuses[sid].state != UP_TO_DATE}
    queue = deque(scheduled)
    while queue:
        sid = queue.popleft()
        for child in graph.children(sid):
            if child in closure and child not in scheduled:
                scheduled.add(child)
                queue.append(child)

    order = topo_order(graph)
    steps = tuple((sid, by_id[sid].resolved_command) for sid in order if sid in scheduled)
    skipped = tuple((sid, statuses[sid]) for sid in order if sid in closure and sid not in scheduled)
    return ExecutionPlan(steps=steps, skipped=skipped, scheduled=frozenset(scheduled), statuses=statuses)


# --------------------------------------------------------------------------
# execution


@dataclass(frozen=True)
class StepResult:
    instance_id: str
    exit_code: int
    wall_seconds: float
    started_at: float  # monotonic clock
    finished_at: float
    error: str | None = None
    output_tail: str = ""


@dataclass(frozen=True)
class RunSummary:
    executed: tuple  # StepResult, in plan order
    skipped: int
    failed: tuple  # instance ids, in plan order
    blocked: tuple  # instance ids (descendants of failures), in plan order

    @property
    def ok(self) -> bool:
        return not self.failed and not self.blocked


def _run_step(instance: TaskInstance, root: Path) -> StepResult:
    """Run one command in a worker thread.  Never raises."""
    started = time.monotonic()
    missing = [d for d in instance.expanded_deps if not (Path(root) / d).exists()]
    if missing:
        finished = time.monotonic()
        return StepResult(
            instance.instance_id, 1, finished - started, started, finished,
            error=f"missing input file: {missing[0]}",
        )
    env = dict(os.environ)
    if instance.recording is not None:
        env["STEPLINE_RECORDING"] = instance.recording
    try:
        proc = subprocess.run(
            instance.resolved_command,
            shell=True,
            cwd=str(root),
            env=env,
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
        )
    except OSError as exc:
        finished = time.monotonic()
        return StepResult(
            instance.instance_id, 127, finished - started, started, finished,
            error=f"cannot start command: {exc}",
        )
    finished = time.monotonic()
    tail = proc.stdout.decode("utf-8", errors="replace")[-2000:] if proc.stdout else ""
    return StepResult(instance.instance_id, proc.returncode, finished - started, started, finished, output_tail=tail)


def execute(
    plan: ExecutionPlan,
    graph: DependencyGraph,
    instances: list[TaskInstance],
    params: dict,
    store: StateStore,
    root: Path,
    jobs: int = 1,
    echo=None,
) -> RunSummary:
    """Run the plan with at most ``jobs`` concurrent child processes.

    A step starts only after all its graph parents completed successfully.
    On failure its descendants are blocked; independent branches continue.
    After success every declared target must exist, else the step fails
    with a target-not-produced error.
    """
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    root = Path(root)
    by_id = {inst.instance_id: inst for inst in instances}
    order = [sid for sid, _ in plan.steps]
    pos = {sid: idx for idx, sid in enumerate(order)}
    scheduled = set(order)
    waiting = {sid: {p for p in graph.parents(sid) if p in scheduled} for sid in order}
    pending = set(order)
    results: dict = {}
    failed: list = []
    blocked: set = set()

    def note(text: str) -> None:
        if echo is not None:
            echo(text)

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        running: dict = {}
        while pending or running:
            ready = sorted((sid for sid in pending if not waiting[sid]), key=pos.__getitem__)
            for sid in ready:
                if len(running) >= jobs:
                    break
                pending.discard(sid)
                note(f"run  {sid}")
                running[pool.submit(_run_step, by_id[sid], root)] = sid
            if not running:
                break
            done, _ = wait(running, return_when=FIRST_COMPLETED)
            for future in done:
                sid = running.pop(future)
                result = future.result()
                instance = by_id[sid]
                if result.exit_code == 0 and result.error is None:
                    missing = [t for t in instance.expanded_targets if not (root / t).exists()]
                    if missing:
                        result = replace(result, exit_code=1, error=f"target not produced: {missing[0]}")
                    else:
                        try:
                            fp = fingerprint(instance, params, root)
                        except OSError as exc:
                            result = replace(result, exit_code=1, error=f"fingerprint failed: {exc}")
                        else:
                            store.set(sid, StateRecord(fp, instance.expanded_targets, now_rfc3339()))
                            store.save()  # atomic persist after every completed step
                if result.exit_code == 0 and result.error is None:
                    note(f"ok   {sid} ({result.wall_seconds:.2f}s)")
                    for child in graph.children(sid):
                        if child in waiting:
                            waiting[child].discard(sid)
                else:
                    note(f"FAIL {sid}: {result.error or f'exit {result.exit_code}'}")
                    failed.append(sid)
                    downstream = descendants(graph, {sid}) & pending
                    blocked.update(downstream)
                    pending.difference_update(downstream)
                results[sid] = result

    executed = tuple(results[sid] for sid in order if sid in results)
    return RunSummary(
        executed=executed,
        skipped=len(plan.skipped),
        failed=tuple(sid for sid in order if sid in failed),
        blocked=tuple(sid for sid in order if sid in blocked),
    )


def forget(store: StateStore, selection=None, known=()) -> list:
    """Remove state records so the next run re-executes the selection.

    ``selection=None`` clears everything.  Unknown ids are ignored with a
    warning.  The store is persisted atomically.
    """
    if selection is None:
        removed = sorted(store.records)
        store.records.clear()
    else:
        removed = []
        known_ids = set(known) | set(store.records)
        for sid in selection:
            if sid not in known_ids:
                log.warning("forget: unknown instance %r ignored", sid)
                continue
            if store.get(sid) is not None:
                store.remove(sid)
                removed.append(sid)
    store.save()
    return removed

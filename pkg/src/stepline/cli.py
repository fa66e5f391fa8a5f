"""The stepline command line: the single master entry point for a pipeline.

Commands:
  run     execute every stale task instance (and its descendants), skip the rest
  status  show per-instance up-to-date state without touching anything
  list    print task instances
  graph   export the dependency graph as Graphviz dot
  report  regenerate the per-recording HTML reports
  lint    check the manifest and script directory against the guidelines
  stats   per-script line counts (code/comment/blank) plus step aggregates
  forget  drop recorded state so instances re-run next time

Exit codes: 0 success or everything up to date, 1 a task failed,
2 manifest or usage error, 3 lint found an error-severity violation.
"""

from __future__ import annotations

import argparse
import contextlib
import fcntl
import json
import os
import socket
import sys
from dataclasses import dataclass
from pathlib import Path

from . import conformance, engine, report
from .depgraph import build_graph, export_graph
from .engine import StateStore, state_path
from .errors import LockHeldError, ManifestError, SteplineError
from .manifest import (
    PipelineSpec,
    instantiate_tasks,
    parse_manifest,
    parse_manifest_lenient,
    resolve_params,
)

LOCK_FILE = "lock"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stepline", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", default="pipeline.toml", help="pipeline manifest (default ./pipeline.toml)")
    selection = argparse.ArgumentParser(add_help=False)
    selection.add_argument("--task", action="append", default=[], help="restrict to this task (repeatable)")
    selection.add_argument("--recording", action="append", default=[], help="restrict to this recording (repeatable)")
    fmt = argparse.ArgumentParser(add_help=False)
    fmt.add_argument("--format", choices=("text", "json"), default="text")
    scripts = argparse.ArgumentParser(add_help=False)
    scripts.add_argument("--script-dir", default="scripts", help="script directory relative to the manifest")

    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", parents=[common, selection], help="run stale steps, skip up-to-date ones")
    p_run.add_argument("--jobs", type=int, default=None, help="max concurrent steps (default: n_jobs param or 1)")
    p_run.add_argument("--report-dir", default=None, help="report directory (default <manifest dir>/reports)")

    sub.add_parser("status", parents=[common, selection], help="show instance staleness")
    sub.add_parser("list", parents=[common, selection], help="list task instances")

    p_graph = sub.add_parser("graph", parents=[common], help="export dependency graph as dot")
    p_graph.add_argument("-o", "--output", default=None, help="write dot to this file instead of stdout")
    p_graph.add_argument("--instances", action="store_true", help="emit the instance-level graph")

    p_report = sub.add_parser("report", parents=[common, selection], help="regenerate HTML reports")
    p_report.add_argument("--report-dir", default=None, help="report directory (default <manifest dir>/reports)")

    sub.add_parser("lint", parents=[common, fmt, scripts], help="check guideline conformance")
    sub.add_parser("stats", parents=[common, fmt, scripts], help="line statistics for official scripts")
    sub.add_parser("forget", parents=[common, selection], help="drop recorded state for the selection")
    return parser


@dataclass
class _Loaded:
    root: Path
    spec: PipelineSpec
    params: dict
    instances: list
    issues: list


def _load(args, lenient: bool = False) -> _Loaded:
    manifest_path = Path(args.manifest)
    if not manifest_path.is_file():
        raise ManifestError(f"manifest not found: {manifest_path}")
    text = manifest_path.read_text(encoding="utf-8")
    if lenient:
        spec, issues = parse_manifest_lenient(text)
    else:
        spec, issues = parse_manifest(text), []
    hostname = os.environ.get("STEPLINE_HOSTNAME") or socket.gethostname()
    params = resolve_params(spec, hostname)
    instances = instantiate_tasks(spec, params)
    return _Loaded(
        root=manifest_path.resolve().parent,
        spec=spec,
        params=params,
        instances=instances,
        issues=issues,
    )


@contextlib.contextmanager
def _pipeline_lock(root: Path, exclusive: bool):
    """One invocation at a time per manifest directory (advisory flock).

    Read-only commands take a shared lock, and only when the lock file
    already exists, so they never create files.
    """
    lock_path = root / engine.STATE_DIR / LOCK_FILE
    if not exclusive and not lock_path.exists():
        yield
        return
    lock_path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(lock_path, os.O_RDWR | os.O_CREAT, 0o644)
    try:
        mode = fcntl.LOCK_EX if exclusive else fcntl.LOCK_SH
        try:
            fcntl.flock(fd, mode | fcntl.LOCK_NB)
        except OSError:
            raise LockHeldError(f"another stepline invocation is running in {root}") from None
        yield
    finally:
        os.close(fd)


def _selection(loaded: _Loaded, task_names, recording_ids):
    """Intersect --task and --recording flags into an instance-id set."""
    if not task_names and not recording_ids:
        return None
    known_tasks = {task.name for task in loaded.spec.tasks}
    for name in task_names:
        if name not in known_tasks:
            raise ManifestError(f"unknown task {name!r}")
    for rec in recording_ids:
        if rec not in loaded.spec.recordings:
            raise ManifestError(f"unknown recording {rec!r}")
    ids = set()
    for inst in loaded.instances:
        if task_names and inst.task.name not in task_names:
            continue
        if recording_ids and inst.recording not in recording_ids:
            continue
        ids.add(inst.instance_id)
    return ids


def _resolve_jobs(args, params) -> int:
    if args.jobs is not None:
        if args.jobs < 1:
            raise ManifestError("--jobs must be >= 1")
        return args.jobs
    n_jobs = params.get("n_jobs")
    if isinstance(n_jobs, int) and not isinstance(n_jobs, bool) and n_jobs >= 1:
        return n_jobs
    return 1


def _report_dir(args, root: Path) -> Path:
    return Path(args.report_dir) if args.report_dir else root / "reports"


# --------------------------------------------------------------------------
# command handlers


def _cmd_run(args) -> int:
    loaded = _load(args)
    root = loaded.root
    with _pipeline_lock(root, exclusive=True):
        store = StateStore.load(state_path(root))
        graph = build_graph(loaded.instances)
        selection = _selection(loaded, args.task, args.recording)
        plan = engine.plan(graph, loaded.instances, loaded.params, store, root, selection)
        jobs = _resolve_jobs(args, loaded.params)
        summary = engine.execute(
            plan, graph, loaded.instances, loaded.params, store, root,
            jobs=jobs, echo=lambda line: print(line, file=sys.stderr),
        )
        by_id = {inst.instance_id: inst for inst in loaded.instances}
        touched = {by_id[res.instance_id].recording for res in summary.executed}
        recordings = sorted(rec for rec in touched if rec is not None)
        if recordings or None in touched:
            report.write_reports(
                loaded.spec, recordings, _report_dir(args, root), root,
                include_aggregate=None in touched,
            )
    for res in summary.executed:
        if res.exit_code != 0 or res.error:
            detail = res.error or f"exit code {res.exit_code}"
            print(f"step {res.instance_id} failed: {detail}", file=sys.stderr)
            if res.output_tail.strip():
                print(res.output_tail.rstrip(), file=sys.stderr)
    line = f"{len(summary.executed) - len(summary.failed)} executed, {summary.skipped} up to date"
    if summary.failed:
        line = (
            f"{len(summary.executed) - len(summary.failed)} executed, {len(summary.failed)} failed, "
            f"{len(summary.blocked)} blocked, {summary.skipped} up to date"
        )
    print(line)
    return 1 if summary.failed else 0


def _cmd_status(args) -> int:
    loaded = _load(args)
    root = loaded.root
    with _pipeline_lock(root, exclusive=False):
        store = StateStore.load(state_path(root))
        graph = build_graph(loaded.instances)
        selection = _selection(loaded, args.task, args.recording)
        for inst in loaded.instances:
            if selection is not None and inst.instance_id not in selection:
                continue
            st = engine.status(inst, loaded.params, store, root, graph.raw_inputs)
            detail = ""
            if st.reasons:
                detail = "  (" + ", ".join(str(r) for r in st.reasons) + ")"
            elif st.missing_path:
                detail = f"  (missing: {st.missing_path})"
            print(f"{st.state:18} {inst.instance_id}{detail}")
    return 0


def _cmd_list(args) -> int:
    loaded = _load(args)
    selection = _selection(loaded, args.task, args.recording)
    for inst in loaded.instances:
        if selection is not None and inst.instance_id not in selection:
            continue
        print(inst.instance_id)
    return 0


def _cmd_graph(args) -> int:
    loaded = _load(args)
    with _pipeline_lock(loaded.root, exclusive=False):
        graph = build_graph(loaded.instances)
        text = export_graph(graph, loaded.spec, instances_level=args.instances)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_report(args) -> int:
    loaded = _load(args)
    root = loaded.root
    with _pipeline_lock(root, exclusive=True):
        recordings = args.recording if args.recording else list(loaded.spec.recordings)
        for rec in recordings:
            if rec not in loaded.spec.recordings:
                raise ManifestError(f"unknown recording {rec!r}")
        written = report.write_reports(
            loaded.spec, recordings, _report_dir(args, root), root,
            include_aggregate=not args.recording,
        )
    for path in written:
        print(path)
    return 0


def _cmd_lint(args) -> int:
    loaded = _load(args, lenient=True)
    script_dir = loaded.root / args.script_dir
    with _pipeline_lock(loaded.root, exclusive=False):
        findings = conformance.lint(loaded.spec, script_dir, loaded.root, parse_issues=loaded.issues)
    if args.format == "json":
        payload = [
            {"rule_id": f.rule_id, "severity": f.severity, "subject": f.subject, "message": f.message}
            for f in findings
        ]
        print(json.dumps(payload, indent=2))
    else:
        for finding in findings:
            print(finding)
    return 3 if any(f.severity == conformance.ERROR for f in findings) else 0


def _cmd_stats(args) -> int:
    loaded = _load(args)
    script_dir = loaded.root / args.script_dir
    if not script_dir.is_dir():
        raise ManifestError(f"script directory not found: {script_dir}")
    with _pipeline_lock(loaded.root, exclusive=False):
        classes = conformance.classify_scripts(script_dir, loaded.spec, loaded.root)
        official = [c.path for c in classes if c.kind in (conformance.CLASS_STEP, conformance.CLASS_FIGURE)]
        stats = conformance.summarize_scripts(official, root=loaded.root)
    if args.format == "json":
        payload = {
            "files": {
                path: {"code": c.code, "comment": c.comment, "blank": c.blank}
                for path, c in sorted(stats.per_file.items())
            },
            "mean_code": stats.mean_code,
            "std_code": stats.std_code,
            "total_files": stats.total_files,
            "skipped": list(stats.skipped),
        }
        print(json.dumps(payload, indent=2))
    else:
        width = max((len(p) for p in stats.per_file), default=4)
        print(f"{'file':<{width}}  code  comment  blank")
        for path, c in sorted(stats.per_file.items()):
            print(f"{path:<{width}}  {c.code:>4}  {c.comment:>7}  {c.blank:>5}")
        print(f"step files: mean code {stats.mean_code:.1f} (std. {stats.std_code:.1f}), {stats.total_files} files")
    return 0


def _cmd_forget(args) -> int:
    loaded = _load(args)
    root = loaded.root
    with _pipeline_lock(root, exclusive=True):
        store = StateStore.load(state_path(root))
        selection = _selection(loaded, args.task, args.recording)
        known = [inst.instance_id for inst in loaded.instances]
        removed = engine.forget(store, selection, known)
    print(f"forgot {len(removed)} instance records")
    return 0


_HANDLERS = {
    "run": _cmd_run,
    "status": _cmd_status,
    "list": _cmd_list,
    "graph": _cmd_graph,
    "report": _cmd_report,
    "lint": _cmd_lint,
    "stats": _cmd_stats,
    "forget": _cmd_forget,
}


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return _HANDLERS[args.command](args)
    except SteplineError as exc:
        print(f"stepline: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"stepline: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))

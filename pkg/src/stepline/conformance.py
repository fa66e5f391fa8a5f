"""Static pipeline-conformance checks, script classification and line stats.

Lint rules (findings sorted by rule id, then subject):

  L1  error    the same script file is referenced by more than one task
  L2  error    kind purity: aggregate task with a per-recording target, or
               a per-recording task consuming another recording's output
  L3  warning  a target no task consumes and not marked ``final = true``
  L4  error    a task with no targets
  L5  warning  a task with no report items and ``no_report`` unset
  L6  error    duplicate parameter/template/task definitions
  L7  warning  script files neither referenced by a task nor carrying an
               official prefix (``NN_`` or ``figure_``): cleanup candidates
  L8  warning  numbered script prefixes out of order along the manifest

Line statistics follow the classic breakdown: a physical line is blank if
whitespace-only, a comment if its first non-whitespace characters equal
the extension's comment prefix, otherwise code.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path

from .manifest import (
    AGGREGATE,
    ManifestIssue,
    PipelineSpec,
    TaskSpec,
    expand_group,
    instantiate_tasks,
    pattern_placeholders,
)

log = logging.getLogger("stepline")

ERROR = "error"
WARNING = "warning"

STEP_RE = re.compile(r"^\d\d_.+")
FIGURE_RE = re.compile(r"^figure_.+")

CLASS_STEP = "step"
CLASS_FIGURE = "figure"
CLASS_SUPPORT = "support"
CLASS_UNCLASSIFIED = "unclassified"

_RULE_SEVERITY = {
    "L1": ERROR,
    "L2": ERROR,
    "L3": WARNING,
    "L4": ERROR,
    "L5": WARNING,
    "L6": ERROR,
    "L7": WARNING,
    "L8": WARNING,
}


@dataclass(frozen=True)
class Finding:
    rule_id: str
    severity: str
    subject: str
    message: str

    def __str__(self) -> str:
        return f"{self.rule_id} {self.severity.upper()} {self.subject}: {self.message}"


@dataclass(frozen=True)
class ScriptClass:
    path: str  # relative to the manifest directory
    kind: str
    step_number: int | None = None


@dataclass(frozen=True)
class LineCounts:
    code: int
    comment: int
    blank: int


@dataclass(frozen=True)
class LineStats:
    per_file: dict  # path -> LineCounts
    mean_code: float  # over numbered step files only
    std_code: float  # population std over numbered step files
    total_files: int
    skipped: tuple = ()  # non-text files left out


def script_of(task: TaskSpec, root: Path) -> str | None:
    """The task's script: first command token naming a file under root."""
    for token in task.command.split():
        if "{" in token:
            continue
        if (Path(root) / token).is_file():
            return token
    return None


def _referenced_paths(spec: PipelineSpec, root: Path) -> set:
    """Everything the manifest points at: command tokens and path patterns."""
    refs: set = set()
    for task in spec.tasks:
        for token in task.command.split():
            if "{" not in token:
                refs.add(token)
        for entry in task.deps + task.targets + task.report:
            pattern = spec.templates[entry].pattern if entry in spec.templates else entry
            refs.add(pattern)
    return refs


def classify_scripts(script_dir: Path, spec: PipelineSpec, root: Path) -> list[ScriptClass]:
    """Classify every regular file in the script directory.

    Official prefixes win; manifest-referenced files without one are
    support files; the rest are unclassified.
    """
    script_dir = Path(script_dir)
    root = Path(root)
    referenced = _referenced_paths(spec, root)
    out: list[ScriptClass] = []
    for entry in sorted(script_dir.iterdir()):
        if not entry.is_file() or entry.name.startswith("."):
            continue
        rel = entry.relative_to(root).as_posix() if entry.is_relative_to(root) else entry.as_posix()
        name = entry.name
        if STEP_RE.match(name):
            out.append(ScriptClass(rel, CLASS_STEP, step_number=int(name[:2])))
        elif FIGURE_RE.match(name):
            out.append(ScriptClass(rel, CLASS_FIGURE))
        elif rel in referenced:
            out.append(ScriptClass(rel, CLASS_SUPPORT))
        else:
            out.append(ScriptClass(rel, CLASS_UNCLASSIFIED))
    return out


def lint(
    spec: PipelineSpec,
    script_dir: Path,
    root: Path,
    parse_issues=(),
) -> list[Finding]:
    """Check the manifest and script directory against the guidelines.

    ``parse_issues`` carries defects only visible in the raw manifest text
    (duplicate definitions), produced by the lenient parser.
    """
    root = Path(root)
    script_dir = Path(script_dir)
    findings: list[Finding] = []

    def add(rule: str, subject: str, message: str) -> None:
        findings.append(Finding(rule, _RULE_SEVERITY[rule], subject, message))

    # L6: re-surfaced duplicate definitions from the raw text
    for issue in parse_issues:
        if isinstance(issue, ManifestIssue) and issue.kind == "duplicate":
            add("L6", issue.subject, issue.message)

    # L1: one script per analysis step
    by_script: dict = {}
    for task in spec.tasks:
        script = script_of(task, root)
        if script is not None:
            by_script.setdefault(script, []).append(task.name)
    for script, names in sorted(by_script.items()):
        if len(names) > 1:
            add("L1", script, f"script referenced by {len(names)} tasks: {', '.join(names)}")

    # L2a: aggregate tasks must not write per-recording targets
    for task in spec.tasks:
        if task.kind != AGGREGATE:
            continue
        for entry in task.targets:
            pattern = spec.templates[entry].pattern if entry in spec.templates else entry
            if "recording" in pattern_placeholders(pattern):
                add("L2", task.name, f"aggregate task writes per-recording target {pattern!r}")
                break

    instances = instantiate_tasks(spec, dict(spec.base_params))
    producer_of: dict = {}
    for inst in instances:
        for target in inst.expanded_targets:
            producer_of.setdefault(target, inst)

    # L2b: a per-recording instance consuming another recording's output
    flagged: set = set()
    for inst in instances:
        if inst.recording is None or inst.task.name in flagged:
            continue
        for dep in inst.expanded_deps:
            producer = producer_of.get(dep)
            if producer is not None and producer.recording not in (None, inst.recording):
                add(
                    "L2",
                    inst.task.name,
                    f"per-recording task reads {dep!r} produced for recording {producer.recording!r}",
                )
                flagged.add(inst.task.name)
                break

    # L3: every non-final target should feed some task
    consumed: set = set()
    for inst in instances:
        consumed.update(inst.expanded_deps)
    expanded_by_pattern: dict = {}
    for inst in instances:
        for entry in inst.task.targets:
            pattern = spec.templates[entry].pattern if entry in spec.templates else entry
            paths = expand_group(spec, [pattern], inst.recording, f"task {inst.task.name!r} targets")
            expanded_by_pattern.setdefault((inst.task.name, pattern), []).extend(paths)
    for task in spec.tasks:
        if task.final:
            continue
        for entry in task.targets:
            pattern = spec.templates[entry].pattern if entry in spec.templates else entry
            paths = expanded_by_pattern.get((task.name, pattern), [])
            if paths and not any(path in consumed for path in paths):
                add("L3", pattern, f"target of task {task.name!r} is consumed by no task and not marked final")

    # L4: saved targets are mandatory
    for task in spec.tasks:
        if not task.targets:
            add("L4", task.name, "task declares no targets; every step must save its results")

    # L5: visual record
    for task in spec.tasks:
        if not task.report and not task.no_report:
            add("L5", task.name, "task has no report items and no_report is unset")

    # L7: unreferenced, unofficially named files
    referenced = _referenced_paths(spec, root)
    if script_dir.is_dir():
        for entry in sorted(script_dir.iterdir()):
            if not entry.is_file() or entry.name.startswith("."):
                continue
            rel = entry.relative_to(root).as_posix() if entry.is_relative_to(root) else entry.as_posix()
            if STEP_RE.match(entry.name) or FIGURE_RE.match(entry.name):
                continue
            if rel not in referenced:
                add("L7", rel, "not referenced by any task and not officially named; cleanup candidate")

    # L8: numbered scripts should appear in increasing order
    numbered = []
    for task in spec.tasks:
        script = script_of(task, root)
        if script is None:
            continue
        name = Path(script).name
        if STEP_RE.match(name):
            numbered.append((task.name, name, int(name[:2])))
    for (_, _, prev_num), (task_name, name, num) in zip(numbered, numbered[1:]):
        if num <= prev_num:
            add("L8", name, f"step number {num:02d} follows {prev_num:02d} (task {task_name!r})")

    findings.sort(key=lambda f: (f.rule_id, f.subject, f.message))
    return findings


# --------------------------------------------------------------------------
# line statistics

DEFAULT_COMMENT_PREFIXES = {"py": "#", "sh": "#", "r": "#", "jl": "#", "m": "%"}


def count_lines(text: str, comment_prefix: str) -> LineCounts:
    code = comment = blank = 0
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped:
            blank += 1
        elif stripped.startswith(comment_prefix):
            comment += 1
        else:
            code += 1
    return LineCounts(code=code, comment=comment, blank=blank)


def summarize_scripts(paths, comment_prefixes=None, root: Path | None = None) -> LineStats:
    """Per-file code/comment/blank counts plus step-file aggregate stats.

    Files containing NUL bytes are skipped with a warning.  The mean and
    population standard deviation cover the numbered step files only.
    """
    prefixes = dict(DEFAULT_COMMENT_PREFIXES)
    if comment_prefixes:
        prefixes.update(comment_prefixes)
    base = Path(root) if root is not None else None
    per_file: dict = {}
    skipped: list = []
    for path in paths:
        key = Path(path).as_posix()
        actual = (base / path) if base is not None else Path(path)
        data = actual.read_bytes()
        if b"\x00" in data:
            log.warning("skipping non-text file %s", key)
            skipped.append(key)
            continue
        ext = actual.suffix.lstrip(".").lower()
        text = data.decode("utf-8", errors="replace")
        per_file[key] = count_lines(text, prefixes.get(ext, "#"))

    step_codes = [counts.code for key, counts in per_file.items() if STEP_RE.match(Path(key).name)]
    if step_codes:
        n = len(step_codes)
        mean = sum(step_codes) / n
        mean_sq = sum(c * c for c in step_codes) / n
        std = math.sqrt(max(mean_sq - mean * mean, 0.0))
    else:
        mean = std = 0.0
    return LineStats(
        per_file=per_file,
        mean_code=mean,
        std_code=std,
        total_files=len(per_file),
        skipped=tuple(skipped),
    )

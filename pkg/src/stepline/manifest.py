"""Pipeline manifest: parsing, validation, templates and task instantiation.

The manifest is a single TOML file (``pipeline.toml``) that is the one
authoritative definition site for every parameter, filename template and
task in the pipeline:

    [pipeline]
    name = "faces"
    recordings = ["sub01", "sub02"]

    [params]
    bandpass_low = 1.0
    n_jobs = 2

    [host."bigbox".params]      # overrides applied when run on that host
    n_jobs = 16

    [templates]
    raw      = "data/{recording}_raw.fif"
    filtered = "out/{recording}_filtered.fif"

    [[task]]
    name    = "02_filter"
    kind    = "per_recording"           # or "aggregate"
    command = "python scripts/02_filter.py {recording}"
    deps    = ["raw"]                   # template aliases or literal patterns
    targets = ["filtered"]
    report  = ["figures/{recording}_filter.png"]
    params  = ["bandpass_low"]          # parameters this task reads

Placeholders are written ``{name}`` with an optional zero-pad width
``{name:0N}``.  ``{recording}`` is reserved: per-recording tasks expand it
once per recording; aggregate tasks expand a ``{recording}``-bearing dep
to the full recording list.  Commands may additionally use
``{param:NAME}``.  All paths are relative to the manifest directory and
are normalized at parse time.

Task tables also accept ``no_report = true`` (step intentionally has no
figures) and ``final = true`` (targets are end products nothing consumes).
"""

from __future__ import annotations

import itertools
import posixpath
import re
from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import (
    DuplicateDefinitionError,
    KindViolationError,
    ManifestSyntaxError,
    MissingBindingError,
    MissingTargetsError,
    UnknownAliasError,
    UnknownReferenceError,
)

PER_RECORDING = "per_recording"
AGGREGATE = "aggregate"

RECORDING_PLACEHOLDER = "recording"

TOKEN_RE = re.compile(r"[A-Za-z0-9_-]+\Z")
PLACEHOLDER_RE = re.compile(r"\{([A-Za-z0-9_-]+)(?::0([0-9]+))?\}")
COMMAND_PARAM_RE = re.compile(r"\{param:([A-Za-z0-9_-]+)\}")

_SCALAR_TYPES = (bool, int, float, str)


@dataclass(frozen=True)
class FileTemplate:
    """A named filename pattern, e.g. ``raw = "data/{recording}_raw.fif"``."""

    alias: str
    pattern: str

    def placeholders(self) -> list[str]:
        """Placeholder names in first-appearance order, deduplicated."""
        seen: list[str] = []
        for m in PLACEHOLDER_RE.finditer(self.pattern):
            if m.group(1) not in seen:
                seen.append(m.group(1))
        return seen


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str
    command: str
    deps: tuple[str, ...]
    targets: tuple[str, ...]
    report: tuple[str, ...]
    no_report: bool
    final: bool
    param_refs: tuple[str, ...]
    order_index: int


@dataclass(frozen=True)
class PipelineSpec:
    """Validated manifest.  Immutable after parse; safe to share."""

    name: str
    recordings: tuple[str, ...]
    base_params: dict
    host_params: dict
    templates: dict
    tasks: tuple[TaskSpec, ...]


@dataclass(frozen=True)
class TaskInstance:
    """A concrete runnable unit: one task, optionally bound to a recording."""

    task: TaskSpec
    recording: str | None
    instance_id: str
    expanded_deps: tuple[str, ...]
    expanded_targets: tuple[str, ...]
    expanded_report_items: tuple[str, ...]
    resolved_command: str
    recording_pos: int = 0

    @property
    def sort_key(self) -> tuple[int, int]:
        """Manifest position first, recording order second."""
        return (self.task.order_index, self.recording_pos)


@dataclass(frozen=True)
class ManifestIssue:
    """A tolerated defect found while parsing in lenient mode."""

    kind: str  # "duplicate" | "missing_targets" | "kind_violation"
    subject: str
    message: str


# --------------------------------------------------------------------------
# duplicate pre-scan
#
# Strict TOML parsers reject duplicate keys outright, so single-definition
# violations have to be spotted (and, for linting, stripped) before tomli
# sees the document.  The scan handles the manifest subset: one key per
# line, values possibly continuing over lines via open [ or { brackets or
# triple-quoted strings.

_HEADER_RE = re.compile(r"^\s*(\[\[|\[)\s*(.*?)\s*(\]\]|\])\s*(#.*)?$")
_KEY_RE = re.compile(r"""^\s*((?:[A-Za-z0-9_-]+|"[^"]*"|'[^']*')(?:\s*\.\s*(?:[A-Za-z0-9_-]+|"[^"]*"|'[^']*'))*)\s*=(.*)$""")


def _split_header_path(raw: str) -> str:
    parts: list[str] = []
    buf = ""
    quote = None
    for ch in raw:
        if quote:
            if ch == quote:
                quote = None
            buf += ch
        elif ch in "\"'":
            quote = ch
            buf += ch
        elif ch == ".":
            parts.append(buf.strip())
            buf = ""
        else:
            buf += ch
    parts.append(buf.strip())
    return ".".join(parts)


def _line_balance(text: str, depth: int, in_triple: str | None) -> tuple[int, str | None]:
    """Track bracket depth and triple-quoted strings across one line."""
    i = 0
    quote = None
    while i < len(text):
        ch = text[i]
        if in_triple:
            if text.startswith(in_triple, i):
                i += 3
                in_triple = None
                continue
            i += 1
            continue
        if quote:
            if ch == "\\" and quote == '"':
                i += 2
                continue
            if ch == quote:
                quote = None
            i += 1
            continue
        if text.startswith('"""', i) or text.startswith("'''", i):
            in_triple = text[i] * 3
            i += 3
            continue
        if ch in "\"'":
            quote = ch
        elif ch == "#":
            break
        elif ch in "[{":
            depth += 1
        elif ch in "]}":
            depth -= 1
        i += 1
    return depth, in_triple


@dataclass
class _Duplicate:
    table: str
    key: str
    span: tuple[int, int]  # [start, end] line indexes of the duplicate text


def _scan_duplicates(text: str) -> list[_Duplicate]:
    lines = text.split("\n")
    dups: list[_Duplicate] = []
    table = ""
    tables_seen: set[str] = set()
    keys_seen: dict[str, set[str]] = {"": set()}
    depth = 0
    in_triple: str | None = None
    i = 0
    while i < len(lines):
        line = lines[i]
        if depth > 0 or in_triple:
            depth, in_triple = _line_balance(line, depth, in_triple)
            i += 1
            continue
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            i += 1
            continue
        header = _HEADER_RE.match(line)
        if header:
            path = _split_header_path(header.group(2))
            if header.group(1) == "[[":
                # each [[...]] entry is a fresh key namespace
                table = path
                keys_seen[table] = set()
            else:
                if path in tables_seen:
                    start = i
                    # drop the whole redeclared section up to the next header
                    j = i + 1
                    d, t = 0, None
                    while j < len(lines):
                        if d == 0 and t is None and _HEADER_RE.match(lines[j]):
                            break
                        d, t = _line_balance(lines[j], d, t)
                        j += 1
                    dups.append(_Duplicate(path, "", (start, j - 1)))
                    i = j
                    continue
                tables_seen.add(path)
                table = path
                keys_seen.setdefault(table, set())
            i += 1
            continue
        m = _KEY_RE.match(line)
        if m:
            key = _split_header_path(m.group(1)).strip("\"'")
            start = i
            depth, in_triple = _line_balance(m.group(2), 0, None)
            while (depth > 0 or in_triple) and i + 1 < len(lines):
                i += 1
                depth, in_triple = _line_balance(lines[i], depth, in_triple)
            if key in keys_seen.setdefault(table, set()):
                dups.append(_Duplicate(table, key, (start, i)))
            else:
                keys_seen[table].add(key)
            i += 1
            continue
        # not a recognizable line; let the TOML parser complain
        i += 1
    return dups


def _strip_spans(text: str, spans: list[tuple[int, int]]) -> str:
    drop = set()
    for start, end in spans:
        drop.update(range(start, end + 1))
    lines = text.split("\n")
    return "\n".join(line for idx, line in enumerate(lines) if idx not in drop)


# --------------------------------------------------------------------------
# pattern machinery


def parse_pattern(pattern: str, where: str) -> list[tuple[str, str | None, int]]:
    """Split a pattern into (literal, placeholder, pad-width) pieces.

    Raises ManifestSyntaxError for stray braces or malformed placeholders.
    """
    pieces: list[tuple[str, str | None, int]] = []
    pos = 0
    for m in PLACEHOLDER_RE.finditer(pattern):
        literal = pattern[pos : m.start()]
        if "{" in literal or "}" in literal:
            raise ManifestSyntaxError(f"{where}: unbalanced braces in pattern {pattern!r}")
        width = int(m.group(2)) if m.group(2) else 0
        pieces.append((literal, m.group(1), width))
        pos = m.end()
    tail = pattern[pos:]
    if "{" in tail or "}" in tail:
        raise ManifestSyntaxError(f"{where}: unbalanced braces in pattern {pattern!r}")
    pieces.append((tail, None, 0))
    return pieces


def pattern_placeholders(pattern: str) -> list[str]:
    """Placeholder names in first-appearance order."""
    names: list[str] = []
    for m in PLACEHOLDER_RE.finditer(pattern):
        if m.group(1) not in names:
            names.append(m.group(1))
    return names


def expand_pattern(pattern: str, bindings: dict, where: str = "pattern") -> str:
    """Substitute every placeholder; normalize the resulting path."""
    out: list[str] = []
    for literal, name, width in parse_pattern(pattern, where):
        out.append(literal)
        if name is None:
            continue
        if name not in bindings:
            raise MissingBindingError(f"{where}: no binding for placeholder {{{name}}} in {pattern!r}")
        value = str(bindings[name])
        out.append(value.rjust(width, "0") if width else value)
    return posixpath.normpath("".join(out))


# --------------------------------------------------------------------------
# parsing


def parse_manifest(text: str) -> PipelineSpec:
    """Parse and fully validate a manifest document.

    Raises ManifestSyntaxError, DuplicateDefinitionError,
    UnknownReferenceError, MissingTargetsError or KindViolationError.
    """
    spec, issues = _parse(text, lenient=False)
    assert not issues
    return spec


def parse_manifest_lenient(text: str) -> tuple[PipelineSpec, list[ManifestIssue]]:
    """Parse tolerating single-definition, missing-target and kind defects.

    Used by the linter so guideline violations become findings instead of
    hard errors.  Structural problems (bad TOML, unknown references) still
    raise.
    """
    return _parse(text, lenient=True)


_ISSUE_ERRORS = {
    "duplicate": DuplicateDefinitionError,
    "missing_targets": MissingTargetsError,
    "kind_violation": KindViolationError,
}


def _parse(text: str, lenient: bool) -> tuple[PipelineSpec, list[ManifestIssue]]:
    issues: list[ManifestIssue] = []

    def issue(kind: str, subject: str, message: str) -> None:
        if not lenient:
            raise _ISSUE_ERRORS[kind](message)
        issues.append(ManifestIssue(kind, subject, message))

    dups = _scan_duplicates(text)
    for dup in dups:
        what = f"{dup.table}.{dup.key}" if dup.key else dup.table
        issue("duplicate", what, f"{what} is defined more than once (line {dup.span[0] + 1})")
    if dups:
        text = _strip_spans(text, [d.span for d in dups])

    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ManifestSyntaxError(f"invalid TOML: {exc}") from exc

    known = {"pipeline", "params", "host", "templates", "task"}
    for key in doc:
        if key not in known:
            raise ManifestSyntaxError(f"unknown top-level table [{key}]")

    name, recordings = _parse_pipeline_table(doc.get("pipeline"), issue)
    base_params = _parse_params_table(doc.get("params", {}), "params")
    host_params = _parse_host_tables(doc.get("host", {}))
    templates = _parse_templates(doc.get("templates", {}))
    tasks = _parse_tasks(doc.get("task", []), base_params, templates, issue)

    spec = PipelineSpec(
        name=name,
        recordings=recordings,
        base_params=base_params,
        host_params=host_params,
        templates=templates,
        tasks=tuple(tasks),
    )
    return spec, issues


def _parse_pipeline_table(table, issue) -> tuple[str, tuple[str, ...]]:
    if table is None:
        raise ManifestSyntaxError("missing [pipeline] table")
    if not isinstance(table, dict):
        raise ManifestSyntaxError("[pipeline] must be a table")
    for key in table:
        if key not in {"name", "recordings"}:
            raise ManifestSyntaxError(f"unknown key pipeline.{key}")
    name = table.get("name", "pipeline")
    if not isinstance(name, str):
        raise ManifestSyntaxError("pipeline.name must be a string")
    raw = table.get("recordings", [])
    if not isinstance(raw, list) or not all(isinstance(r, str) for r in raw):
        raise ManifestSyntaxError("pipeline.recordings must be an array of strings")
    seen: set[str] = set()
    for rec in raw:
        if not TOKEN_RE.match(rec):
            raise ManifestSyntaxError(f"recording id {rec!r} is not a token ([A-Za-z0-9_-]+)")
        if rec in seen:
            issue("duplicate", rec, f"recording {rec!r} listed twice")
        seen.add(rec)
    # lenient mode keeps the first occurrence only
    deduped = tuple(dict.fromkeys(raw))
    return name, deduped


def _check_param_value(name: str, value, where: str) -> None:
    if isinstance(value, _SCALAR_TYPES):
        return
    if isinstance(value, list):
        if value:
            first = type(value[0])
            if first not in _SCALAR_TYPES or not all(type(v) is first for v in value):
                raise ManifestSyntaxError(f"{where}.{name}: list values must be homogeneous scalars")
        return
    raise ManifestSyntaxError(f"{where}.{name}: unsupported value type {type(value).__name__}")


def _parse_params_table(table, where: str) -> dict:
    if not isinstance(table, dict):
        raise ManifestSyntaxError(f"[{where}] must be a table")
    out = {}
    for name, value in table.items():
        if not TOKEN_RE.match(name):
            raise ManifestSyntaxError(f"parameter name {name!r} is not a token")
        _check_param_value(name, value, where)
        out[name] = value
    return out


def _parse_host_tables(table) -> dict:
    if not isinstance(table, dict):
        raise ManifestSyntaxError("[host] must be a table of host tables")
    out = {}
    for hostname, sub in table.items():
        if not isinstance(sub, dict) or set(sub) != {"params"}:
            raise ManifestSyntaxError(f'host table [host."{hostname}"] must contain exactly a params table')
        out[hostname] = _parse_params_table(sub["params"], f'host."{hostname}".params')
    return out


def _parse_templates(table) -> dict:
    if not isinstance(table, dict):
        raise ManifestSyntaxError("[templates] must be a table")
    out = {}
    for alias, pattern in table.items():
        if not TOKEN_RE.match(alias):
            raise ManifestSyntaxError(f"template alias {alias!r} is not a token")
        if not isinstance(pattern, str):
            raise ManifestSyntaxError(f"templates.{alias} must be a string")
        if pattern.startswith("/"):
            raise ManifestSyntaxError(f"templates.{alias}: absolute paths are not allowed")
        parse_pattern(pattern, f"templates.{alias}")
        out[alias] = FileTemplate(alias=alias, pattern=pattern)
    return out


_TASK_KEYS = {"name", "kind", "command", "deps", "targets", "report", "no_report", "final", "params"}


def _string_list(entry: dict, key: str, task_name: str) -> tuple[str, ...]:
    raw = entry.get(key, [])
    if not isinstance(raw, list) or not all(isinstance(v, str) for v in raw):
        raise ManifestSyntaxError(f"task {task_name!r}: {key} must be an array of strings")
    return tuple(raw)


def _parse_tasks(entries, base_params: dict, templates: dict, issue) -> list[TaskSpec]:
    if not isinstance(entries, list):
        raise ManifestSyntaxError("[[task]] must be an array of tables")
    tasks: list[TaskSpec] = []
    names: set[str] = set()
    for entry in entries:
        if not isinstance(entry, dict):
            raise ManifestSyntaxError("[[task]] entries must be tables")
        for key in entry:
            if key not in _TASK_KEYS:
                raise ManifestSyntaxError(f"unknown task key {key!r}")
        name = entry.get("name")
        if not isinstance(name, str) or not TOKEN_RE.match(name):
            raise ManifestSyntaxError(f"task name {name!r} is not a token")
        if name in names:
            issue("duplicate", name, f"task {name!r} is defined more than once")
            continue  # keep the first definition
        names.add(name)

        kind = entry.get("kind")
        if kind not in (PER_RECORDING, AGGREGATE):
            raise ManifestSyntaxError(f"task {name!r}: kind must be \"per_recording\" or \"aggregate\"")
        command = entry.get("command")
        if not isinstance(command, str) or not command.strip():
            raise ManifestSyntaxError(f"task {name!r}: command must be a non-empty string")

        deps = _string_list(entry, "deps", name)
        targets = _string_list(entry, "targets", name)
        report = _string_list(entry, "report", name)
        no_report = entry.get("no_report", False)
        final = entry.get("final", False)
        if not isinstance(no_report, bool) or not isinstance(final, bool):
            raise ManifestSyntaxError(f"task {name!r}: no_report and final must be booleans")
        param_refs = _string_list(entry, "params", name)

        for ref in param_refs:
            if ref not in base_params:
                raise UnknownReferenceError(f"task {name!r} references unknown parameter {ref!r}")
        for m in COMMAND_PARAM_RE.finditer(command):
            if m.group(1) not in base_params:
                raise UnknownReferenceError(f"task {name!r} command references unknown parameter {m.group(1)!r}")
        if kind == AGGREGATE and "{recording}" in command:
            raise UnknownReferenceError(f"task {name!r}: aggregate command cannot use {{recording}}")

        task = TaskSpec(
            name=name,
            kind=kind,
            command=command,
            deps=deps,
            targets=targets,
            report=report,
            no_report=no_report,
            final=final,
            param_refs=param_refs,
            order_index=len(tasks),
        )
        _validate_task_patterns(task, templates)
        if not targets:
            issue("missing_targets", name, f"task {name!r} declares no targets; every step must save its results")
        _check_kind(task, templates, issue)
        tasks.append(task)
    return tasks


def _entry_pattern(templates: dict, entry: str) -> str:
    """Resolve a dep/target/report entry: alias if registered, else literal."""
    tpl = templates.get(entry)
    return tpl.pattern if tpl is not None else entry


def _validate_task_patterns(task: TaskSpec, templates: dict) -> None:
    for group, entries in (("deps", task.deps), ("targets", task.targets), ("report", task.report)):
        for entry in entries:
            pattern = _entry_pattern(templates, entry)
            where = f"task {task.name!r} {group}"
            if pattern.startswith("/"):
                raise ManifestSyntaxError(f"{where}: absolute paths are not allowed ({pattern!r})")
            parse_pattern(pattern, where)
            for placeholder in pattern_placeholders(pattern):
                if placeholder != RECORDING_PLACEHOLDER:
                    raise UnknownReferenceError(
                        f"{where}: placeholder {{{placeholder}}} has no binding at instantiation"
                    )


def _has_recording(pattern: str) -> bool:
    return RECORDING_PLACEHOLDER in pattern_placeholders(pattern)


def _check_kind(task: TaskSpec, templates: dict, issue) -> None:
    target_patterns = [_entry_pattern(templates, t) for t in task.targets]
    if task.kind == PER_RECORDING:
        if "{recording}" not in task.command and not any(_has_recording(p) for p in target_patterns):
            issue(
                "kind_violation",
                task.name,
                f"per-recording task {task.name!r} never mentions {{recording}} in command or targets",
            )
    else:
        for pattern in target_patterns:
            if _has_recording(pattern):
                issue(
                    "kind_violation",
                    task.name,
                    f"aggregate task {task.name!r} has per-recording target {pattern!r}",
                )
                break


# --------------------------------------------------------------------------
# spec operations


def resolve_params(spec: PipelineSpec, hostname: str) -> dict:
    """Base parameters overlaid by the host scope matching ``hostname``."""
    merged = dict(spec.base_params)
    merged.update(spec.host_params.get(hostname, {}))
    return merged


def expand_template(spec: PipelineSpec, alias: str, bindings: dict) -> str:
    """Expand one registered template; extra bindings are ignored."""
    tpl = spec.templates.get(alias)
    if tpl is None:
        raise UnknownAliasError(f"unknown template alias {alias!r}")
    return expand_pattern(tpl.pattern, bindings, where=f"template {alias!r}")


def enumerate_template(spec: PipelineSpec, alias: str, binding_lists: dict) -> list[str]:
    """Cartesian expansion of a template over lists of binding values.

    The first placeholder in the pattern varies slowest.  An empty binding
    list yields an empty result.
    """
    tpl = spec.templates.get(alias)
    if tpl is None:
        raise UnknownAliasError(f"unknown template alias {alias!r}")
    names = tpl.placeholders()
    for name in names:
        if name not in binding_lists:
            raise MissingBindingError(f"template {alias!r}: no binding list for {{{name}}}")
    value_lists = [binding_lists[name] for name in names]
    out = []
    for combo in itertools.product(*value_lists):
        out.append(expand_pattern(tpl.pattern, dict(zip(names, combo)), where=f"template {alias!r}"))
    return out


def _param_text(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return " ".join(_param_text(v) for v in value)
    return str(value)


def _resolve_command(command: str, recording: str | None, params: dict) -> str:
    cmd = COMMAND_PARAM_RE.sub(lambda m: _param_text(params[m.group(1)]), command)
    if recording is not None:
        cmd = cmd.replace("{recording}", recording)
    return cmd


def expand_group(spec: PipelineSpec, patterns: list[str], recording: str | None, where: str) -> tuple[str, ...]:
    """Expand patterns for one instance.

    For aggregate instances (recording is None) a ``{recording}``-bearing
    pattern expands once per recording, in recording order.
    """
    out: list[str] = []
    for pattern in patterns:
        if recording is not None:
            out.append(expand_pattern(pattern, {RECORDING_PLACEHOLDER: recording}, where))
        elif RECORDING_PLACEHOLDER in pattern_placeholders(pattern):
            for rec in spec.recordings:
                out.append(expand_pattern(pattern, {RECORDING_PLACEHOLDER: rec}, where))
        else:
            out.append(expand_pattern(pattern, {}, where))
    return tuple(out)


def instantiate_tasks(spec: PipelineSpec, params: dict) -> list[TaskInstance]:
    """Expand every task into concrete instances, in manifest order.

    Per-recording tasks yield one instance per recording (id
    ``name:recording``); aggregate tasks yield exactly one (id ``name``).
    """
    instances: list[TaskInstance] = []
    for task in spec.tasks:
        dep_patterns = [_entry_pattern(spec.templates, e) for e in task.deps]
        target_patterns = [_entry_pattern(spec.templates, e) for e in task.targets]
        report_patterns = [_entry_pattern(spec.templates, e) for e in task.report]
        where = f"task {task.name!r}"
        if task.kind == PER_RECORDING:
            for pos, rec in enumerate(spec.recordings):
                instances.append(
                    TaskInstance(
                        task=task,
                        recording=rec,
                        instance_id=f"{task.name}:{rec}",
                        expanded_deps=expand_group(spec, dep_patterns, rec, where),
                        expanded_targets=expand_group(spec, target_patterns, rec, where),
                        expanded_report_items=expand_group(spec, report_patterns, rec, where),
                        resolved_command=_resolve_command(task.command, rec, params),
                        recording_pos=pos,
                    )
                )
        else:
            instances.append(
                TaskInstance(
                    task=task,
                    recording=None,
                    instance_id=task.name,
                    expanded_deps=expand_group(spec, dep_patterns, None, where),
                    expanded_targets=expand_group(spec, target_patterns, None, where),
                    expanded_report_items=expand_group(spec, report_patterns, None, where),
                    resolved_command=_resolve_command(task.command, None, params),
                    recording_pos=0,
                )
            )
    return instances

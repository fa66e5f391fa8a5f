"""Per-recording visual record: one ordered HTML report per recording.

Figures are produced by the user's scripts; this module only collects the
declared figure paths and renders them (or a placeholder while missing)
in manifest task order.  Reports are rewritten whole on every run so they
never go stale.
"""

from __future__ import annotations

import html
import os
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .fsutil import atomic_write_text
from .manifest import AGGREGATE, PER_RECORDING, PipelineSpec, expand_group

AGGREGATE_REPORT = "aggregate"


@dataclass(frozen=True)
class ReportItem:
    task_name: str
    order_index: int
    path: str  # relative to the manifest directory
    exists: bool
    produced_at: str | None = None


@dataclass(frozen=True)
class ReportManifest:
    recording: str  # a recording id or "aggregate"
    items: tuple


def collect_report_items(spec: PipelineSpec, recording: str | None, root: Path) -> ReportManifest:
    """Expand report patterns for one recording (None = the aggregate view).

    Item order follows manifest task order; ``exists`` reflects the
    filesystem at call time.
    """
    root = Path(root)
    items = []
    for task in spec.tasks:
        if recording is not None and task.kind != PER_RECORDING:
            continue
        if recording is None and task.kind != AGGREGATE:
            continue
        patterns = [spec.templates[e].pattern if e in spec.templates else e for e in task.report]
        for path in expand_group(spec, patterns, recording, f"task {task.name!r} report"):
            target = root / path
            exists = target.is_file()
            produced_at = None
            if exists:
                mtime = target.stat().st_mtime
                produced_at = datetime.fromtimestamp(mtime, tz=timezone.utc).isoformat(timespec="seconds")
            items.append(ReportItem(task.name, task.order_index, path, exists, produced_at))
    items.sort(key=lambda item: (item.order_index, item.path))
    return ReportManifest(recording=recording if recording is not None else AGGREGATE_REPORT, items=tuple(items))


_STYLE = (
    "body{font-family:sans-serif;margin:2em;max-width:60em}"
    "h2{border-bottom:1px solid #ccc;padding-bottom:.2em}"
    "figure{margin:1em 0}img{max-width:100%}"
    "figcaption{color:#666;font-size:.85em}"
    ".missing{background:#fff3cd;border:1px solid #e0c878;padding:.6em;margin:1em 0}"
    ".generated{color:#888;font-size:.85em}"
)


def render_report(
    manifest: ReportManifest,
    pipeline_name: str,
    report_dir: Path,
    root: Path,
    now: datetime | None = None,
) -> str:
    """Render one report as a self-contained HTML5 document.

    Figure references are relative to the report directory; missing
    figures render as visible placeholders.  Output is deterministic for
    equal inputs and a fixed ``now``.
    """
    stamp = (now or datetime.now(timezone.utc)).isoformat(timespec="seconds").replace("+00:00", "Z")
    title = f"{pipeline_name} — {manifest.recording}"
    lines = [
        "<!DOCTYPE html>",
        '<html lang="en">',
        "<head>",
        '<meta charset="utf-8">',
        f"<title>{html.escape(title)}</title>",
        f"<style>{_STYLE}</style>",
        "</head>",
        "<body>",
        f"<h1>{html.escape(title)}</h1>",
        f'<p class="generated">generated {html.escape(stamp)}</p>',
    ]
    current_task = None
    for item in manifest.items:
        if item.task_name != current_task:
            lines.append(f"<h2>{html.escape(item.task_name)}</h2>")
            current_task = item.task_name
        src = _relative_src(item.path, report_dir, root)
        if item.exists:
            caption = item.path if item.produced_at is None else f"{item.path} · {item.produced_at}"
            lines.append("<figure>")
            lines.append(f'<img src="{html.escape(src, quote=True)}" alt="{html.escape(item.path, quote=True)}">')
            lines.append(f"<figcaption>{html.escape(caption)}</figcaption>")
            lines.append("</figure>")
        else:
            lines.append(f'<div class="missing">{html.escape(item.path)} — not yet produced</div>')
    lines.append("</body>")
    lines.append("</html>")
    return "\n".join(lines) + "\n"


def _relative_src(path: str, report_dir: Path, root: Path) -> str:
    figure = (Path(root) / path).resolve()
    rel = os.path.relpath(figure, start=Path(report_dir).resolve())
    return rel.replace(os.sep, "/")


def write_reports(
    spec: PipelineSpec,
    recordings,
    out_dir: Path,
    root: Path,
    now: datetime | None = None,
    include_aggregate: bool = True,
) -> list[Path]:
    """Write ``<recording>.html`` per recording plus ``aggregate.html``.

    Each file is rewritten whole via temp-then-rename.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    views: list[str | None] = list(recordings)
    if include_aggregate:
        views.append(None)
    for recording in views:
        manifest = collect_report_items(spec, recording, root)
        document = render_report(manifest, spec.name, out_dir, root, now=now)
        target = out_dir / f"{manifest.recording}.html"
        atomic_write_text(target, document)
        written.append(target)
    return written

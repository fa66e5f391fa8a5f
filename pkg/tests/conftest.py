"""Shared pipeline fixtures: builders for manifest + script directories."""

from __future__ import annotations

import random
import stat
import textwrap
from pathlib import Path

import pytest


def write_pipeline(root: Path, manifest: str, scripts: dict | None = None, data: dict | None = None) -> Path:
    """Materialize a pipeline directory: manifest, scripts/, data files."""
    root.mkdir(parents=True, exist_ok=True)
    (root / "pipeline.toml").write_text(textwrap.dedent(manifest), encoding="utf-8")
    for name, body in (scripts or {}).items():
        path = root / "scripts" / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(textwrap.dedent(body), encoding="utf-8")
        path.chmod(path.stat().st_mode | stat.S_IXUSR)
    for rel, body in (data or {}).items():
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(body, encoding="utf-8")
    for sub in ("out", "figures"):
        (root / sub).mkdir(exist_ok=True)
    return root


LINEAR_RECORDINGS = ("s1", "s2", "s3")

# 5 per-recording steps + 2 aggregate steps; with 3 recordings that is
# 5*3 + 2 = 17 instances.  Step 02 reads the `threshold` parameter.  The
# report figure of step 03 is deliberately never produced by its script.
_LINEAR_MANIFEST = """\
    [pipeline]
    name = "linear"
    recordings = [{recordings}]

    [params]
    n_jobs = 2
    threshold = {threshold}

    [templates]
    raw  = "data/{{recording}}.txt"
    out0 = "out/{{recording}}_0.dat"
    out1 = "out/{{recording}}_1.dat"
    out2 = "out/{{recording}}_2.dat"
    out3 = "out/{{recording}}_3.dat"
    out4 = "out/{{recording}}_4.dat"

    [[task]]
    name = "00_extract"
    kind = "per_recording"
    command = "sh scripts/00_extract.sh {{recording}}"
    deps = ["raw"]
    targets = ["out0"]
    report = ["figures/{{recording}}_0.png"]

    [[task]]
    name = "01_clean"
    kind = "per_recording"
    command = "sh scripts/01_clean.sh {{recording}}"
    deps = ["out0"]
    targets = ["out1"]
    report = ["figures/{{recording}}_1.png"]

    [[task]]
    name = "02_filter"
    kind = "per_recording"
    command = "sh scripts/02_filter.sh {{recording}}"
    deps = ["out1"]
    targets = ["out2"]
    report = ["figures/{{recording}}_2.png"]
    params = ["threshold"]

    [[task]]
    name = "03_transform"
    kind = "per_recording"
    command = "sh scripts/03_transform.sh {{recording}}"
    deps = ["out2"]
    targets = ["out3"]
    report = ["figures/{{recording}}_3.png"]

    [[task]]
    name = "04_summarize"
    kind = "per_recording"
    command = "sh scripts/04_summarize.sh {{recording}}"
    deps = ["out3"]
    targets = ["out4"]
    report = ["figures/{{recording}}_4.png"]

    [[task]]
    name = "05_grand"
    kind = "aggregate"
    command = "sh scripts/05_grand.sh"
    deps = ["out4"]
    targets = ["out/grand.dat"]
    report = ["figures/grand.png"]

    [[task]]
    name = "06_stats"
    kind = "aggregate"
    command = "sh scripts/06_stats.sh"
    deps = ["out/grand.dat"]
    targets = ["out/stats.dat"]
    report = ["figures/stats.png"]
    final = true
"""


def _step_script(step: int, write_figure: bool = True) -> str:
    prev = f"out/${{rec}}_{step - 1}.dat"
    src = f"data/${{rec}}.txt" if step == 0 else prev
    figure = f'printf "fig %s\\n" "$rec" > "figures/${{rec}}_{step}.png"\n' if write_figure else ""
    return (
        "#!/bin/sh\n"
        'rec="$1"\n'
        f'cat "{src}" > "out/${{rec}}_{step}.dat"\n'
        f'echo "step {step}" >> "out/${{rec}}_{step}.dat"\n'
        f"{figure}"
    )


def linear_scripts() -> dict:
    scripts = {
        "00_extract.sh": _step_script(0),
        "01_clean.sh": _step_script(1),
        "02_filter.sh": _step_script(2),
        "03_transform.sh": _step_script(3, write_figure=False),  # report figure stays missing
        "04_summarize.sh": _step_script(4),
        "05_grand.sh": (
            "#!/bin/sh\n"
            "cat out/*_4.dat > out/grand.dat\n"
            'printf "grand\\n" > figures/grand.png\n'
        ),
        "06_stats.sh": (
            "#!/bin/sh\n"
            "wc -l < out/grand.dat > out/stats.dat\n"
            'printf "stats\\n" > figures/stats.png\n'
        ),
    }
    return scripts


def make_linear_pipeline(root: Path, recordings=LINEAR_RECORDINGS, threshold: int = 1) -> Path:
    manifest = _LINEAR_MANIFEST.format(
        recordings=", ".join(f'"{r}"' for r in recordings),
        threshold=threshold,
    )
    data = {f"data/{rec}.txt": f"raw bytes for {rec}\n" for rec in recordings}
    return write_pipeline(root, manifest, linear_scripts(), data)


@pytest.fixture
def linear_pipeline(tmp_path):
    return make_linear_pipeline(tmp_path / "pipe")


# --------------------------------------------------------------------------
# the 18-task study-shaped fixture: 11 per-recording steps, 2 aggregate
# steps, 5 aggregate figure tasks


STUDY_STEP_NAMES = [
    "00_fetch",
    "01_anatomy",
    "02_filter",
    "03_ica",
    "04_epochs",
    "05_csd",
    "06_template_src",
    "07_forward",
    "08_select_vertices",
    "09_power",
    "10_connectivity",
]
STUDY_AGG_NAMES = ["11_grand_average", "12_statistics"]
STUDY_FIGURE_NAMES = [
    "figure_grand",
    "figure_stats",
    "figure_connectivity",
    "figure_brain",
    "figure_overview",
]


def study_manifest(n_recordings: int = 19) -> str:
    recordings = ", ".join(f'"sub{i:02d}"' for i in range(1, n_recordings + 1))
    parts = [
        "[pipeline]",
        'name = "study"',
        f"recordings = [{recordings}]",
        "",
        "[params]",
        "n_jobs = 1",
        "",
    ]
    prev = "data/{recording}_raw.fif"
    for idx, name in enumerate(STUDY_STEP_NAMES):
        target = f"out/{{recording}}_{idx:02d}.dat"
        parts += [
            "[[task]]",
            f'name = "{name}"',
            'kind = "per_recording"',
            f'command = "python scripts/{name}.py {{recording}}"',
            f'deps = ["{prev}"]',
            f'targets = ["{target}"]',
            f'report = ["figures/{{recording}}_{idx:02d}.png"]',
            "",
        ]
        prev = target
    parts += [
        "[[task]]",
        'name = "11_grand_average"',
        'kind = "aggregate"',
        'command = "python scripts/11_grand_average.py"',
        f'deps = ["{prev}"]',
        'targets = ["out/grand_11.dat"]',
        'report = ["figures/grand_11.png"]',
        "",
        "[[task]]",
        'name = "12_statistics"',
        'kind = "aggregate"',
        'command = "python scripts/12_statistics.py"',
        'deps = ["out/grand_11.dat"]',
        'targets = ["out/stats_12.dat"]',
        'report = ["figures/stats_12.png"]',
        "",
    ]
    figure_deps = {
        "figure_grand": "out/grand_11.dat",
        "figure_stats": "out/stats_12.dat",
        "figure_connectivity": "out/stats_12.dat",
        "figure_brain": "out/grand_11.dat",
        "figure_overview": "out/stats_12.dat",
    }
    for name in STUDY_FIGURE_NAMES:
        parts += [
            "[[task]]",
            f'name = "{name}"',
            'kind = "aggregate"',
            f'command = "python scripts/{name}.py"',
            f'deps = ["{figure_deps[name]}"]',
            f'targets = ["figures_pub/{name}.png"]',
            f'report = ["figures_pub/{name}.png"]',
            "final = true",
            "",
        ]
    return "\n".join(parts)


def make_study_pipeline(root: Path, n_recordings: int = 19) -> Path:
    scripts = {}
    rng = random.Random(7)
    for name in STUDY_STEP_NAMES + STUDY_AGG_NAMES + STUDY_FIGURE_NAMES:
        lines = ["# analysis step", "import sys", ""]
        for i in range(rng.randint(3, 9)):
            lines.append(f"value_{i} = {i}")
        scripts[f"{name}.py"] = "\n".join(lines) + "\n"
    return write_pipeline(root, study_manifest(n_recordings), scripts, {})


@pytest.fixture
def study_pipeline(tmp_path):
    return make_study_pipeline(tmp_path / "study")


# --------------------------------------------------------------------------
# random manifest corpus (for graph/plan verification against oracles)


def random_manifest(rng: random.Random) -> str:
    """A random well-formed manifest: <= 8 tasks, <= 3 recordings."""
    n_rec = rng.randint(1, 3)
    recordings = ", ".join(f'"r{i}"' for i in range(n_rec))
    parts = ["[pipeline]", 'name = "random"', f"recordings = [{recordings}]", ""]
    kinds = []
    n_tasks = rng.randint(1, 8)
    for i in range(n_tasks):
        kind = rng.choice(["per_recording", "aggregate"])
        kinds.append(kind)
        deps = []
        upstream = rng.sample(range(i), k=min(i, rng.randint(0, 2)))
        for j in sorted(upstream):
            if kinds[j] == "per_recording":
                deps.append(f"out/{{recording}}_t{j}.dat")
            else:
                deps.append(f"out/t{j}.dat")
        if not deps or rng.random() < 0.3:
            deps.append("data/{recording}.txt" if kind == "per_recording" else "data/shared.txt")
        target = f"out/{{recording}}_t{i}.dat" if kind == "per_recording" else f"out/t{i}.dat"
        deps_toml = ", ".join(f'"{d}"' for d in deps)
        parts += [
            "[[task]]",
            f'name = "t{i}"',
            f'kind = "{kind}"',
            f'command = "echo t{i}"' if kind == "aggregate" else f'command = "echo t{i} {{recording}}"',
            f"deps = [{deps_toml}]",
            f'targets = ["{target}"]',
            "",
        ]
    return "\n".join(parts)


def reachability_oracle(nodes, edges) -> dict:
    """Transitive closure by iterated expansion; independent of depgraph."""
    reach = {n: {c for p, c in edges if p == n} for n in nodes}
    changed = True
    while changed:
        changed = False
        for n in nodes:
            extra = set()
            for m in reach[n]:
                extra |= reach[m]
            if not extra <= reach[n]:
                reach[n] |= extra
                changed = True
    return reach

#!/usr/bin/env python3
"""Generate a small runnable demo pipeline in a fresh directory.

The demo mimics a study layout: numbered per-recording steps, two
aggregation steps and a figure task, all backed by tiny shell scripts
that produce real files.  Afterwards try:

    cd demo
    stepline run            # everything executes
    stepline run            # everything is up to date
    stepline graph          # dot text for the dependency graph
    stepline lint           # guideline conformance
    stepline stats          # line statistics of the official scripts
    open reports/sub01.html
"""

from __future__ import annotations

import argparse
import stat
from pathlib import Path

MANIFEST_TEMPLATE = """\
[pipeline]
name = "demo-study"
recordings = [{recordings}]

[params]
n_jobs = 2
bandpass_low = 0.5
bandpass_high = 40.0

[host."bigbox".params]
n_jobs = 16

[templates]
raw      = "data/{{recording}}_raw.csv"
filtered = "out/{{recording}}_filtered.csv"
epochs   = "out/{{recording}}_epochs.csv"
average  = "out/{{recording}}_average.csv"

[[task]]
name = "00_filter"
kind = "per_recording"
command = "sh scripts/00_filter.sh {{recording}}"
deps = ["raw"]
targets = ["filtered"]
report = ["figures/{{recording}}_filter.png"]
params = ["bandpass_low", "bandpass_high"]

[[task]]
name = "01_epochs"
kind = "per_recording"
command = "sh scripts/01_epochs.sh {{recording}}"
deps = ["filtered"]
targets = ["epochs"]
report = ["figures/{{recording}}_epochs.png"]

[[task]]
name = "02_average"
kind = "per_recording"
command = "sh scripts/02_average.sh {{recording}}"
deps = ["epochs"]
targets = ["average"]
report = ["figures/{{recording}}_average.png"]

[[task]]
name = "03_grand_average"
kind = "aggregate"
command = "sh scripts/03_grand_average.sh"
deps = ["average"]
targets = ["out/grand_average.csv"]
report = ["figures/grand_average.png"]

[[task]]
name = "04_statistics"
kind = "aggregate"
command = "sh scripts/04_statistics.sh"
deps = ["out/grand_average.csv"]
targets = ["out/statistics.csv"]
report = ["figures/statistics.png"]

[[task]]
name = "figure_overview"
kind = "aggregate"
command = "sh scripts/figure_overview.sh"
deps = ["out/statistics.csv"]
targets = ["figures_pub/overview.png"]
report = ["figures_pub/overview.png"]
final = true
"""

SCRIPTS = {
    "00_filter.sh": """\
#!/bin/sh
# band-pass "filter": keep every other line of the raw csv
rec="$1"
awk 'NR % 2 == 1' "data/${rec}_raw.csv" > "out/${rec}_filtered.csv"
printf 'filter plot for %s\\n' "$rec" > "figures/${rec}_filter.png"
""",
    "01_epochs.sh": """\
#!/bin/sh
rec="$1"
head -n 5 "out/${rec}_filtered.csv" > "out/${rec}_epochs.csv"
printf 'epochs plot for %s\\n' "$rec" > "figures/${rec}_epochs.png"
""",
    "02_average.sh": """\
#!/bin/sh
rec="$1"
awk -F, '{s += $2; n += 1} END {if (n) printf "%s,%.4f\\n", n, s / n}' \\
    "out/${rec}_epochs.csv" > "out/${rec}_average.csv"
printf 'average plot for %s\\n' "$rec" > "figures/${rec}_average.png"
""",
    "03_grand_average.sh": """\
#!/bin/sh
cat out/*_average.csv > out/grand_average.csv
printf 'grand average plot\\n' > figures/grand_average.png
""",
    "04_statistics.sh": """\
#!/bin/sh
wc -l < out/grand_average.csv > out/statistics.csv
printf 'statistics plot\\n' > figures/statistics.png
""",
    "figure_overview.sh": """\
#!/bin/sh
cat out/statistics.csv figures/grand_average.png > figures_pub/overview.png
""",
}


def build_demo(dest: Path, n_recordings: int) -> None:
    recordings = [f"sub{i:02d}" for i in range(1, n_recordings + 1)]
    dest.mkdir(parents=True, exist_ok=True)
    manifest = MANIFEST_TEMPLATE.format(recordings=", ".join(f'"{r}"' for r in recordings))
    (dest / "pipeline.toml").write_text(manifest, encoding="utf-8")

    scripts_dir = dest / "scripts"
    scripts_dir.mkdir(exist_ok=True)
    for name, body in SCRIPTS.items():
        path = scripts_dir / name
        path.write_text(body, encoding="utf-8")
        path.chmod(path.stat().st_mode | stat.S_IXUSR)

    for sub in ("out", "figures", "figures_pub", "data"):
        (dest / sub).mkdir(exist_ok=True)
    for idx, rec in enumerate(recordings, start=1):
        rows = "\n".join(f"{t},{(t * idx) % 17}" for t in range(20))
        (dest / "data" / f"{rec}_raw.csv").write_text(rows + "\n", encoding="utf-8")

    print(f"demo pipeline written to {dest}")
    print(f"next: cd {dest} && stepline run")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("dest", nargs="?", default="demo", type=Path)
    parser.add_argument("--recordings", type=int, default=3)
    args = parser.parse_args()
    build_demo(args.dest, args.recordings)


if __name__ == "__main__":
    main()

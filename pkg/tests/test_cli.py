"""Command-line surface: exit codes, selection, locking, output routing."""

from __future__ import annotations

import fcntl
import json
import os

from stepline.cli import dispatch
from stepline.engine import STATE_DIR

from test_conformance import make_seeded_pipeline


def run_cli(root, *argv):
    return dispatch(list(argv) + ["--manifest", str(root / "pipeline.toml")])


def snapshot(root):
    entries = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            entries[str(path)] = (path.stat().st_size, path.read_bytes())
    return entries


class TestRun:
    def test_run_twice_skips_everything(self, linear_pipeline, capsys):
        root = linear_pipeline
        assert run_cli(root, "run") == 0
        out = capsys.readouterr().out
        assert "17 executed, 0 up to date" in out

        assert run_cli(root, "run") == 0
        out = capsys.readouterr().out
        assert "0 executed, 17 up to date" in out

    def test_selection_task_and_recording(self, linear_pipeline, capsys):
        root = linear_pipeline
        assert run_cli(root, "run") == 0
        capsys.readouterr()
        # make 02_filter stale everywhere, then restrict to s1
        script = root / "scripts" / "02_filter.sh"
        script.write_text(script.read_text() + "# v2\n")
        assert run_cli(root, "run", "--task", "02_filter", "--recording", "s1") == 0
        err = capsys.readouterr().err
        started = [line.split()[1] for line in err.splitlines() if line.startswith("run  ")]
        assert "02_filter:s1" in started
        assert all(not sid.endswith(":s2") and not sid.endswith(":s3") for sid in started)

    def test_unknown_task_is_usage_error(self, linear_pipeline):
        assert run_cli(linear_pipeline, "run", "--task", "zz_nope") == 2

    def test_missing_manifest(self, tmp_path):
        assert dispatch(["run", "--manifest", str(tmp_path / "nope.toml")]) == 2

    def test_failure_exit_code_and_blocked(self, linear_pipeline, capsys):
        root = linear_pipeline
        script = root / "scripts" / "03_transform.sh"
        script.write_text("#!/bin/sh\nexit 9\n")
        assert run_cli(root, "run") == 1
        captured = capsys.readouterr()
        assert "failed" in captured.out
        assert "exit code 9" in captured.err

    def test_reports_written_after_run(self, linear_pipeline):
        root = linear_pipeline
        assert run_cli(root, "run") == 0
        for name in ("s1.html", "s2.html", "s3.html", "aggregate.html"):
            assert (root / "reports" / name).is_file()

    def test_report_regeneration_touches_only_affected_recordings(self, linear_pipeline):
        root = linear_pipeline
        assert run_cli(root, "run") == 0
        before = {p.name: p.stat().st_mtime_ns for p in (root / "reports").iterdir()}

        (root / "data" / "s2.txt").write_text("new bytes for s2\n")
        assert run_cli(root, "run") == 0
        after = {p.name: p.stat().st_mtime_ns for p in (root / "reports").iterdir()}
        # untouched recordings keep their report files as-is
        assert after["s1.html"] == before["s1.html"]
        assert after["s3.html"] == before["s3.html"]
        # s2 and the aggregate view were rewritten
        assert after["s2.html"] > before["s2.html"]
        assert after["aggregate.html"] > before["aggregate.html"]

    def test_jobs_flag_validation(self, linear_pipeline):
        assert run_cli(linear_pipeline, "run", "--jobs", "0") == 2


class TestStatus:
    def test_status_lists_all_instances(self, linear_pipeline, capsys):
        root = linear_pipeline
        assert run_cli(root, "status") == 0
        out = capsys.readouterr().out
        assert out.count("never_run") == 17
        assert run_cli(root, "run") == 0
        capsys.readouterr()
        assert run_cli(root, "status") == 0
        out = capsys.readouterr().out
        assert out.count("up_to_date") == 17

    def test_status_performs_no_writes(self, linear_pipeline):
        root = linear_pipeline
        before = snapshot(root)
        assert run_cli(root, "status") == 0
        assert snapshot(root) == before
        assert not (root / STATE_DIR).exists()

    def test_hostname_overlay_changes_params(self, linear_pipeline, capsys, monkeypatch):
        root = linear_pipeline
        manifest = root / "pipeline.toml"
        manifest.write_text(
            manifest.read_text().replace(
                "[templates]",
                '[host."bigbox".params]\nthreshold = 5\n\n[templates]',
            )
        )
        monkeypatch.setenv("STEPLINE_HOSTNAME", "laptop")
        assert run_cli(root, "run") == 0
        capsys.readouterr()
        # same host: everything stays up to date
        assert run_cli(root, "status") == 0
        assert "stale" not in capsys.readouterr().out
        # a host with an overlay shifts the parameter fingerprint of 02_filter
        monkeypatch.setenv("STEPLINE_HOSTNAME", "bigbox")
        assert run_cli(root, "status") == 0
        out = capsys.readouterr().out
        assert out.count("param_changed") == 3


class TestListGraph:
    def test_list_instances(self, linear_pipeline, capsys):
        assert run_cli(linear_pipeline, "list") == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 17
        assert "05_grand" in lines

    def test_graph_to_stdout_and_file(self, study_pipeline, capsys, tmp_path):
        root = study_pipeline
        assert run_cli(root, "graph") == 0
        dot = capsys.readouterr().out
        assert dot.count("[label=") == 18
        assert "×19" in dot

        target = tmp_path / "graph.dot"
        assert run_cli(root, "graph", "-o", str(target)) == 0
        assert target.read_text() == dot

    def test_graph_instances_variant(self, linear_pipeline, capsys):
        assert run_cli(linear_pipeline, "graph", "--instances") == 0
        dot = capsys.readouterr().out
        assert '"00_extract:s1" -> "01_clean:s1";' in dot


class TestLintStats:
    def test_lint_clean_exit_zero(self, linear_pipeline, capsys):
        assert run_cli(linear_pipeline, "lint") == 0
        assert capsys.readouterr().out == ""

    def test_lint_seeded_exit_three_and_format(self, tmp_path, capsys):
        root = make_seeded_pipeline(tmp_path / "seeded")
        assert run_cli(root, "lint") == 3
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 8
        assert lines[0].startswith("L1 ERROR scripts/helper.sh:")

        assert run_cli(root, "lint", "--format", "json") == 3
        payload = json.loads(capsys.readouterr().out)
        assert [f["rule_id"] for f in payload] == [f"L{i}" for i in range(1, 9)]

    def test_lint_warnings_only_exit_zero(self, linear_pipeline, capsys):
        root = linear_pipeline
        manifest = root / "pipeline.toml"
        # drop one report declaration: L5 is warning severity
        text = manifest.read_text().replace('report = ["figures/{recording}_1.png"]\n', "")
        manifest.write_text(text)
        assert run_cli(root, "lint") == 0
        out = capsys.readouterr().out
        assert out.startswith("L5 WARNING 01_clean")

    def test_stats_text_and_json(self, study_pipeline, capsys):
        root = study_pipeline
        assert run_cli(root, "stats") == 0
        text_out = capsys.readouterr().out
        assert "mean code" in text_out

        assert run_cli(root, "stats", "--format", "json") == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["total_files"] == 18
        assert set(payload["files"]) == {
            f"scripts/{name}" for name in os.listdir(root / "scripts")
        }


class TestForget:
    def test_forget_selection_then_rerun(self, linear_pipeline, capsys):
        root = linear_pipeline
        assert run_cli(root, "run") == 0
        capsys.readouterr()
        assert run_cli(root, "forget", "--task", "02_filter") == 0
        assert "forgot 3 instance records" in capsys.readouterr().out
        assert run_cli(root, "run") == 0
        out = capsys.readouterr().out
        # 02_filter re-runs for 3 recordings, plus descendants: 3+3+3+1+1
        assert "11 executed" in out


class TestLock:
    def test_concurrent_invocation_fails_fast(self, linear_pipeline):
        root = linear_pipeline
        lock_path = root / STATE_DIR / "lock"
        lock_path.parent.mkdir(exist_ok=True)
        fd = os.open(lock_path, os.O_RDWR | os.O_CREAT)
        fcntl.flock(fd, fcntl.LOCK_EX)
        try:
            assert run_cli(root, "run") == 2
            assert run_cli(root, "status") == 2  # shared lock also refused
        finally:
            os.close(fd)
        assert run_cli(root, "run") == 0

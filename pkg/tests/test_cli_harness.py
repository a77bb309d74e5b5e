import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

from rsfdi.cli_harness import (PipelineConfig, analysis_artifacts, exit_code, main, reproduce_artifacts,
                               simulation_artifacts, synthesis_artifacts, threshold_artifacts)
from rsfdi.errors import RSFDIError

SMALL = ["--n-trunc", "24", "--modes", "10", "--dt", "0.01", "--runs", "2"]


@pytest.fixture
def out(tmp_path):
    return tmp_path / "run"


def cli(*args, out):
    return main([*args, "--out", str(out), *SMALL])


def cfg_for(out, **kw):
    base = dict(out=str(out), n_trunc=24, modes=10, dt=0.01, runs=2)
    base.update(kw)
    return PipelineConfig(**base)


def read_all(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_text() for p in sorted(root.rglob("*")) if p.is_file()}


class TestThinShell:
    def test_analyze_matches_library(self, out):
        assert cli("analyze", "--allow-unverified", out=out) == 0
        files, undecided = analysis_artifacts(cfg_for(out, allow_unverified=True))
        assert read_all(out) == files
        assert undecided == [1, 2]

    def test_pipeline_matches_library(self, out):
        assert cli("analyze", "--allow-unverified", out=out) == 0
        assert cli("synthesize", out=out) == 0
        assert cli("thresholds", out=out) == 0
        assert cli("simulate", out=out) == 0
        cfg = cfg_for(out)
        disk = read_all(out)
        syn, filters = synthesis_artifacts(cfg)
        th_files, th = threshold_artifacts(cfg, filters=filters)
        sim, _ = simulation_artifacts(cfg, filters=filters, thresholds=list(th.values))
        for f in (syn, th_files, sim):
            for k, v in f.items():
                assert disk[k] == v, k

    def test_reproduce_matches_library(self, out):
        assert cli("reproduce-example", out=out) == 0
        assert read_all(out) == reproduce_artifacts(cfg_for(out))
        summary = json.loads((out / "summary.json").read_text())
        assert len(summary["severity_table"]) == 4
        assert summary["undecided_tail_faults"] == [1, 2]


class TestExitCodes:
    def test_unverified_tail_exits_3(self, out, capsys):
        assert cli("analyze", out=out) == 3
        err = json.loads(capsys.readouterr().err)
        assert err["command"] == "analyze" and err["error"]["code"] == "UNVERIFIED_TAIL"
        # the analysis is still written for inspection
        assert (out / "analysis" / "summary.txt").exists()

    def test_missing_upstream_exits_5(self, out, capsys):
        assert cli("synthesize", out=out) == 5
        assert json.loads(capsys.readouterr().err)["error"]["code"] == "IO"
        assert cli("simulate", out=out) == 5
        assert cli("thresholds", out=out) == 5

    def test_bad_system_exits_2(self, out, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert cli("analyze", "--system", str(bad), out=out) == 2
        assert json.loads(capsys.readouterr().err)["error"]["code"] == "INVALID"

    def test_missing_system_exits_5(self, out, tmp_path):
        assert cli("analyze", "--system", str(tmp_path / "absent.json"), out=out) == 5

    def test_bad_fault_index_exits_2(self, out):
        assert cli("analyze", "--allow-unverified", "--fault-index", "7", out=out) == 2

    def test_synthesis_errors_map_to_4(self):
        assert exit_code(RSFDIError("DECOUPLING_FAIL", "x")) == 4
        assert exit_code(RSFDIError("NONFINITE", "x")) == 4

    def test_module_entry_point(self, out):
        p = subprocess.run([sys.executable, "-m", "rsfdi", "synthesize", "--out", str(out)],
                           capture_output=True, text=True)
        assert p.returncode == 5
        assert json.loads(p.stderr)["error"]["code"] == "IO"


class TestOutputs:
    def test_summary_lines(self, out, capsys):
        assert cli("analyze", "--allow-unverified", out=out) == 0
        text = capsys.readouterr().out
        lines = text.strip().splitlines()
        assert len(lines) == 2
        assert lines[0].startswith("fault 1: S* = {fam1: [8, 16, 24]; fam2: ALL")
        assert "necessary condition OK" in lines[0] and "Case 1 OK" in lines[0]

    def test_fault_json_fields(self, out):
        cli("analyze", "--allow-unverified", "--fault-index", "2", out=out)
        rec = json.loads((out / "analysis" / "fault_2.json").read_text())
        assert rec["fault"] == 2 and rec["L_cap_S_dim"] == 0
        assert rec["verdicts"]["necessary"] == "NECESSARY_OK"
        assert not (out / "analysis" / "fault_1.json").exists()

    def test_trace_csv_columns(self, out):
        cli("analyze", "--allow-unverified", out=out)
        cli("synthesize", out=out)
        cli("simulate", out=out)
        rows = list(csv.reader(io.StringIO((out / "traces" / "trace.csv").read_text())))
        assert rows[0] == ["time", "y1", "y2", "r1", "r2", "flags"]
        assert len(rows) == 1001 + 1
        assert all(r[-1] == "0" for r in rows[1:])

    def test_thresholds_grow_with_runs(self, out):
        cli("analyze", "--allow-unverified", out=out)
        cli("synthesize", out=out)
        main(["thresholds", "--out", str(out), *SMALL[:-1], "1"])
        one = json.loads((out / "filters" / "thresholds.json").read_text())
        main(["thresholds", "--out", str(out), *SMALL[:-1], "5"])
        five = json.loads((out / "filters" / "thresholds.json").read_text())
        assert one["runs"] == 1 and five["runs"] == 5
        assert all(a <= b for a, b in zip(one["values"], five["values"]))
        assert five["per_run_max"][0] == one["per_run_max"][0]

    def test_corrupt_thresholds_rejected(self, out):
        cli("analyze", "--allow-unverified", out=out)
        cli("synthesize", out=out)
        (out / "filters" / "thresholds.json").write_text("[")
        assert cli("simulate", out=out) == 2

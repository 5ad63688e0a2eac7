import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from txflow.cli import main
from txflow.harness import SolverOptions, SweepSpec, compare, run_sweep
from txflow.nr import SolveStatus


def run(args, capsys):
    code = main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


class TestSolve:
    def test_plain_nr_two_bus(self, cases_dir, capsys):
        code, out, _ = run(["solve", cases_dir / "two_bus.json", "--method", "plain-nr"], capsys)
        doc = json.loads(out)
        assert code == 0 and doc["format"] == 1
        assert doc["report"]["status"] == "HighVoltage"
        assert doc["buses"][1]["vm"] == pytest.approx(0.99995, abs=1e-5)
        assert doc["buses"][1]["va_deg"] == pytest.approx(-0.5730, abs=1e-4)

    def test_tx_matches_plain(self, cases_dir, capsys):
        _, out_nr, _ = run(["solve", cases_dir / "two_bus.json", "--method", "plain-nr"], capsys)
        code, out_tx, _ = run(
            ["solve", cases_dir / "two_bus.json", "--method", "tx", "--init-mag", "0.6", "--init-ang", "50",
             "--start", "given"],
            capsys,
        )
        a, b = json.loads(out_nr), json.loads(out_tx)
        assert code == 0 and b["report"]["init_mode"] == "given"
        for x, y in zip(a["buses"], b["buses"]):
            assert abs(x["vr"] - y["vr"]) < 1e-6 and abs(x["vi"] - y["vi"]) < 1e-6

    def test_traces_written(self, cases_dir, tmp_path, capsys):
        code, _, _ = run(
            ["solve", cases_dir / "three_bus.json", "--out", tmp_path / "s.json", "--trace", tmp_path / "t.csv",
             "--stages", tmp_path / "st.csv"],
            capsys,
        )
        assert code == 0
        assert (tmp_path / "t.csv").read_text().startswith("iteration,lambda,zeta,max_dx,residual\n")
        assert (tmp_path / "st.csv").read_text().startswith("stage,lambda,iterations,status,max_residual\n")
        assert json.loads((tmp_path / "s.json").read_text())["report"]["final_lambda"] == 0.0

    def test_missing_file(self, capsys):
        code, _, err = run(["solve", "does_not_exist.json"], capsys)
        assert code == 1
        assert json.loads(err.strip().splitlines()[-1])["exit_code"] == 1

    def test_malformed_case(self, tmp_path, capsys):
        bad = tmp_path / "bad.m"
        bad.write_text("function mpc = bad\nmpc.baseMVA = 100;\nmpc.bus = [1 3 0;\n")
        assert run(["solve", bad], capsys)[0] == 1

    def test_validation_error(self, tmp_path, capsys):
        doc = {
            "buses": [{"id": 1, "type": "slack"}, {"id": 2, "type": "pq"}],
            "branches": [{"from": 1, "to": 2, "r": 0.0, "x": 0.0}],
        }
        path = tmp_path / "zero.json"
        path.write_text(json.dumps(doc))
        assert run(["solve", path], capsys)[0] == 2

    def test_usage_error(self, cases_dir, capsys):
        assert run(["solve", cases_dir / "two_bus.json", "--method", "newton"], capsys)[0] == 2
        assert run(["frobnicate"], capsys)[0] == 2

    def test_non_high_voltage_exit(self, tmp_path, capsys):
        doc = {
            "buses": [{"id": 1, "type": "slack"}, {"id": 2, "type": "pq"}],
            "loads": [{"bus": 2, "p": 10.0}],
            "branches": [{"from": 1, "to": 2, "x": 0.1}],
        }
        path = tmp_path / "heavy.json"
        path.write_text(json.dumps(doc))
        code, out, _ = run(["solve", path, "--method", "plain-nr"], capsys)
        assert code == 3
        assert json.loads(out)["report"]["status"] != "HighVoltage"

    def test_drop_gen(self, cases_dir, capsys):
        code, out, _ = run(["solve", cases_dir / "two_bus.m", "--drop-gen", "1"], capsys)
        assert code in (0, 2, 3)


class TestSweep:
    def test_single_cell(self, cases_dir, capsys):
        code, out, err = run(["sweep", cases_dir / "two_bus.json", "--grid", "1x1", "--mag-range", "1:1",
                              "--ang-range", "0:0"], capsys)
        rows = list(csv.reader(io.StringIO(out)))
        assert rows[0] == ["v_mag", "v_ang_deg", "status", "iters", "ms"]
        assert len(rows) == 2 and rows[1][2] == "HighVoltage"
        assert code == 0 and "HighVoltage=1" in err

    def test_grid_shape_and_determinism(self, cases_dir, capsys):
        args = ["sweep", cases_dir / "three_bus.json", "--grid", "3x4"]
        _, out1, _ = run(args, capsys)
        _, out2, _ = run(args, capsys)
        strip = lambda text: [r[:4] for r in csv.reader(io.StringIO(text))]  # noqa: E731
        assert len(strip(out1)) == 13
        assert strip(out1) == strip(out2)

    def test_sample_needs_seed(self, cases_dir, capsys):
        assert run(["sweep", cases_dir / "two_bus.json", "--mode", "sample"], capsys)[0] == 2

    def test_bad_grid(self, cases_dir, capsys):
        assert run(["sweep", cases_dir / "two_bus.json", "--grid", "0x3"], capsys)[0] == 2
        assert run(["sweep", cases_dir / "two_bus.json", "--mag-range", "1:0.5"], capsys)[0] == 2

    def test_parallel_matches_serial(self, three_bus):
        spec = SweepSpec(n_mag=2, n_ang=2)
        a = run_sweep(three_bus, spec, SolverOptions())
        b = run_sweep(three_bus, spec, SolverOptions(), jobs=2)
        assert [(c.status, c.iters) for c in a.cells] == [(c.status, c.iters) for c in b.cells]
        assert a.max_spread() < 1e-9


class TestSweepSpec:
    def test_line_mode(self):
        pts = SweepSpec(mode="line", n_points=10).points()
        assert len(pts) == 10
        mag, ang = pts[0]
        z = mag * np.exp(1j * np.radians(ang))
        assert z.real == pytest.approx(0.6) and z.imag == pytest.approx(0.4)
        z = pts[-1][0] * np.exp(1j * np.radians(pts[-1][1]))
        assert z.real == pytest.approx(1.1) and z.imag == pytest.approx(-0.1)

    def test_sample_reproducible(self):
        assert SweepSpec(mode="sample", seed=4).points() == SweepSpec(mode="sample", seed=4).points()

    def test_grid_count(self):
        assert len(SweepSpec(n_mag=5, n_ang=5).points()) == 25


class TestCompare:
    def test_table1_pattern(self, two_bus):
        rows = compare(two_bus, [(1.0, 0.0), (0.76, 23.0), (0.71, 45.0)], SolverOptions())
        assert all(r.tx.status is SolveStatus.HIGH_VOLTAGE for r in rows)

    def test_solution_fixed_point(self, two_bus):
        rows = compare(two_bus, [(0.999949993749, -0.572995999194)], SolverOptions())
        assert rows[0].plain.iters <= 2 and rows[0].tx.iters <= 2
        assert rows[0].plain.status is rows[0].tx.status is SolveStatus.HIGH_VOLTAGE

    def test_empty_inits(self, cases_dir, capsys):
        assert run(["compare", cases_dir / "two_bus.json"], capsys)[0] == 2
        with pytest.raises(ValueError):
            compare(None, [], SolverOptions())

    def test_csv_and_table(self, cases_dir, capsys):
        code, out, err = run(["compare", cases_dir / "two_bus.json", "--init", "1,0", "--init", "0.76,23"], capsys)
        assert code == 0
        assert out.splitlines()[0] == "v_mag,v_ang_deg,plain_status,plain_iters,tx_status,tx_iters"
        assert "Tx stepping" in err


def test_console_entry_point(cases_dir):
    proc = subprocess.run(
        [sys.executable, "-m", "txflow.cli", "solve", str(cases_dir / "two_bus.json")],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["report"]["status"] == "HighVoltage"


def test_log_env(cases_dir):
    proc = subprocess.run(
        [sys.executable, "-m", "txflow.cli", "solve", str(cases_dir / "two_bus.json")],
        capture_output=True, text=True, check=False, env={"TXFLOW_LOG": "info", "PATH": ""},
    )
    assert "HighVoltage after" in proc.stderr

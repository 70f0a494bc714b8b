"""Command-line entry points, exercised the way a shell would."""

import json
import subprocess
import sys

import pytest

import fedgraph as fg
from fedgraph.cli import main
from fedgraph.export import load_graph


def run_cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "fedgraph", *args],
        capture_output=True,
        text=True,
        timeout=120,
    )


class TestDemo:
    def test_default_prints_thirty(self):
        proc = run_cli("demo")
        assert proc.returncode == 0
        assert proc.stdout.strip() == "30"

    def test_scales_with_clients_and_input(self):
        proc = run_cli("demo", "--clients", "7", "--x", "1.5")
        assert proc.returncode == 0
        assert proc.stdout.strip() == "21"

    def test_json_lines(self):
        proc = run_cli("demo", "--json-lines")
        record = json.loads(proc.stdout.strip())
        assert record["result"] == 30.0
        assert record["clients"] == 3

    def test_zero_clients_is_usage_error(self):
        proc = run_cli("demo", "--clients", "0")
        assert proc.returncode == 2


class TestGradcheck:
    def test_passes_at_default_tolerance(self):
        proc = run_cli("gradcheck", "--trials", "5", "--clients", "3", "--dim", "4")
        assert proc.returncode == 0, proc.stderr
        assert "ok" in proc.stdout.lower()

    def test_json_record_reports_max_error(self):
        proc = run_cli("gradcheck", "--trials", "3", "--json-lines")
        record = json.loads(proc.stdout.strip())
        assert record["max_rel_err"] <= record["tol"]
        assert record["trials"] == 3

    def test_impossible_tolerance_fails(self):
        proc = run_cli("gradcheck", "--trials", "3", "--tol", "0.0")
        assert proc.returncode == 1


class TestExport:
    def test_text_listing_to_stdout(self):
        proc = run_cli("export", "--program", "loss")
        assert proc.returncode == 0
        assert proc.stdout.startswith("{ lambda")
        assert "mean_from_clients" in proc.stdout

    def test_grad_loss_listing_has_dual_comm(self):
        proc = run_cli("export", "--program", "grad-loss")
        assert "sum_from_clients" in proc.stdout

    def test_canonical_round_trips_through_file(self, tmp_path):
        path = tmp_path / "loss.fedgraph"
        proc = run_cli(
            "export", "--program", "loss", "--format", "canonical", "--out", str(path)
        )
        assert proc.returncode == 0, proc.stderr
        g = load_graph(str(path))
        assert fg.graph_equal(g, fg.loss_graph(2, 2))

    def test_canonical_needs_out_path(self):
        proc = run_cli("export", "--program", "loss", "--format", "canonical")
        assert proc.returncode == 2

    def test_unknown_program_rejected(self):
        proc = run_cli("export", "--program", "mystery")
        assert proc.returncode == 2

    def test_fedavg_program_exports(self, tmp_path):
        path = tmp_path / "round.fedgraph"
        proc = run_cli(
            "export", "--program", "fedavg", "--format", "canonical", "--out", str(path)
        )
        assert proc.returncode == 0
        g = load_graph(str(path))
        assert any(eq.primitive == "broadcast_clients" for eq in g.equations)


class TestTrain:
    def test_fedsgd_reaches_threshold(self):
        proc = run_cli(
            "train", "--steps", "80", "--clients", "2", "--dim", "4", "--seed", "1"
        )
        assert proc.returncode == 0, proc.stdout + proc.stderr
        lines = proc.stdout.strip().splitlines()
        assert len(lines) > 1
        assert "final" in lines[-1]

    def test_unreachable_threshold_exits_nonzero(self):
        proc = run_cli(
            "train", "--steps", "2", "--threshold", "1e-12", "--clients", "2",
            "--dim", "4",
        )
        assert proc.returncode == 1

    def test_fedavg_training_runs(self):
        proc = run_cli(
            "train", "--algo", "fedavg", "--steps", "60", "--clients", "2",
            "--dim", "4", "--local-steps", "2", "--threshold", "1e-2",
        )
        assert proc.returncode == 0, proc.stdout + proc.stderr

    def test_json_lines_stream(self):
        proc = run_cli(
            "train", "--steps", "3", "--threshold", "1.0", "--json-lines",
            "--clients", "2", "--dim", "4",
        )
        records = [json.loads(l) for l in proc.stdout.strip().splitlines()]
        steps = [r for r in records if "step" in r]
        assert len(steps) == 3
        assert steps[0]["loss"] >= steps[-1]["loss"]
        assert "final_loss" in records[-1]


class TestBench:
    def test_loop_baseline_row(self):
        proc = run_cli(
            "bench", "--model-dim", "8", "--clients-list", "2", "--rounds", "3",
            "--local-steps", "1", "--workers", "1", "--json-lines",
        )
        assert proc.returncode == 0, proc.stderr
        record = json.loads(proc.stdout.strip().splitlines()[-1])
        assert record["backend"] == "loop"
        assert record["workers"] == 1
        assert record["median_ms"] > 0

    def test_table_output_has_header(self):
        proc = run_cli(
            "bench", "--model-dim", "8", "--clients-list", "1,2", "--rounds", "3",
            "--local-steps", "1", "--workers", "1",
        )
        lines = proc.stdout.strip().splitlines()
        assert len(lines) == 3  # header plus one row per cohort size
        assert proc.returncode == 0

    def test_rounds_below_three_fails_at_runtime(self):
        proc = run_cli(
            "bench", "--rounds", "2", "--clients-list", "1", "--workers", "1",
            "--model-dim", "8",
        )
        assert proc.returncode == 1
        assert "repetitions" in proc.stderr

    def test_zero_rounds_is_usage_error(self):
        proc = run_cli("bench", "--rounds", "0", "--clients-list", "1")
        assert proc.returncode == 2


class TestMainInProcess:
    def test_main_returns_exit_code(self):
        assert main(["demo", "--clients", "2", "--x", "0.5"]) == 0

    def test_usage_error_exits_two(self):
        with pytest.raises(SystemExit) as info:
            main(["demo", "--clients", "-3"])
        assert info.value.code == 2

    def test_missing_command_exits_two(self):
        with pytest.raises(SystemExit) as info:
            main([])
        assert info.value.code == 2

"""
Tests for the command-line harness.

Validates:
- verb dispatch, output directory layout and manifest
- exit codes: 0 ok, 1 violation, 2 config, 3 bracket
- deterministic outputs for a fixed seed
- sweep error isolation, bisection arithmetic and the monotonicity audit
- worker pool ordering, isolation and per-cell logs
- small linear-analysis runs end to end
- the suppression contrast at reduced resolution (slow)
"""

from __future__ import annotations

import json
import logging

import pytest

from app.cli import commands
from app.cli.commands import EXIT_BRACKET, EXIT_CONFIG, EXIT_OK, EXIT_VIOLATION, monotonicity_audit
from app.cli.workers import parallel_map
from app.config import load_config
from app.linanalysis import TimeSpaceReport
from app.main import main
from app.models import Classification, RunSummary, Termination
from app.store import verify_manifest

LIN_SMALL = "ny_lin = 24\nny_max = 48\nmu_points = 21\npoints_per_regime = 10\ndecay_samples = 21\n"


def fake_summary(classification: Classification) -> RunSummary:
    return RunSummary(
        termination=Termination.COMPLETED if classification is Classification.BOUNDED else Termination.BLOW_UP,
        t_final=0.01,
        samples=3,
        n1_linf_initial=1.0,
        n2_linf_initial=1.0,
        n1_linf_max=1.0,
        n2_linf_max=1.0,
        mass_drift=0.0,
        energy_final=1.0,
        classification=classification,
        dt_final=1e-3,
    )


def read_json(path) -> dict:
    return json.loads(path.read_text(encoding="utf-8"))


class TestSimulate:
    """pksflow simulate."""

    def test_zero_horizon_run(self, write_config, tmp_path, capsys):
        """t_end = 0 writes the full directory with one sample."""
        out = tmp_path / "out"
        code = main(["simulate", "--config", str(write_config(t_end=0.0)), "--out", str(out)])

        assert code == EXIT_OK
        assert capsys.readouterr().out.strip() == str(out.resolve())
        for name in ("config.json", "diagnostics.csv", "summary.json", "zero_modes.json", "energy.json"):
            assert (out / name).is_file()
        assert (out / "checkpoint" / "checkpoint.json").is_file()
        assert read_json(out / "summary.json")["samples"] == 1
        assert read_json(out / "summary.json")["mass_correction"] == 0.0
        assert verify_manifest(out) == []

    def test_fixed_seed_is_reproducible(self, write_config, tmp_path):
        """Two runs with the same seed write byte-identical diagnostics."""
        config = str(write_config(t_end=0.01))
        main(["simulate", "--config", config, "--out", str(tmp_path / "a"), "--seed", "11"])
        main(["simulate", "--config", config, "--out", str(tmp_path / "b"), "--seed", "11"])

        first = (tmp_path / "a" / "diagnostics.csv").read_bytes()
        assert first == (tmp_path / "b" / "diagnostics.csv").read_bytes()
        assert first.count(b"\n") == 4

    def test_missing_required_key(self, write_config, tmp_path, capsys):
        """A config without params.A exits with 2 and names the key."""
        path = write_config(text="[grid]\nnx = 16\n")
        code = main(["simulate", "--config", str(path), "--out", str(tmp_path / "out")])

        assert code == EXIT_CONFIG
        assert "params.A" in capsys.readouterr().err

    def test_invalid_initial_data(self, write_config, tmp_path):
        """A negative mass is a configuration error."""
        text = write_config().read_text(encoding="utf-8").replace("mass1 = 2.0", "mass1 = -2.0")
        path = write_config(text=text, name="neg.toml")

        assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_CONFIG

    def test_restart_continues_from_checkpoint(self, write_config, tmp_path):
        """initial.restart resumes at the checkpoint time."""
        first = tmp_path / "first"
        main(["simulate", "--config", str(write_config(t_end=0.005)), "--out", str(first)])
        text = write_config(t_end=0.01).read_text(encoding="utf-8").replace(
            "[initial]\n", f'[initial]\nrestart = "{(first / "checkpoint").as_posix()}"\n'
        )
        second = tmp_path / "second"
        code = main(["simulate", "--config", str(write_config(text=text, name="restart.toml")), "--out", str(second)])

        assert code == EXIT_OK
        rows = (second / "diagnostics.csv").read_text(encoding="utf-8").splitlines()
        assert float(rows[1].split(",")[0]) == pytest.approx(0.005)

    def test_bad_thread_count(self, write_config):
        """--threads must be positive."""
        assert main(["simulate", "--config", str(write_config()), "--threads", "0"]) == EXIT_CONFIG


class TestVerify:
    """pksflow verify."""

    def test_random_states_pass(self, write_config, tmp_path):
        """A handful of random states satisfy every inequality."""
        out = tmp_path / "verify"
        code = main(["verify", "--config", str(write_config(experiment="n_states = 5")), "--out", str(out)])

        summary = read_json(out / "verify.json")
        assert code == EXIT_OK
        assert summary["ok"] is True
        assert summary["states"] == 5
        assert (out / "verify.csv").is_file()

    def test_injected_fault_exits_with_violation(self, write_config, tmp_path):
        """The flipped Poincare inequality is reported with exit code 1."""
        out = tmp_path / "verify"
        config = write_config(experiment='n_states = 3\ninject_fault = "flip_poincare"')
        code = main(["verify", "--config", str(config), "--out", str(out)])

        assert code == EXIT_VIOLATION
        assert read_json(out / "verify.json")["violations"]


class TestSweep:
    """pksflow sweep."""

    def test_failing_cell_is_isolated(self, write_config, tmp_path):
        """A negative mass fails its own cell only; the sweep still exits 0."""
        out = tmp_path / "sweep"
        config = write_config(t_end=0.005, experiment="mass_values = [1.0, -1.0]")
        code = main(["sweep", "--config", str(config), "--out", str(out), "--threads", "2"])

        summary = read_json(out / "sweep.json")
        assert code == EXIT_OK
        assert summary["failed"] == 1
        assert "summary" in summary["cells"][0]
        assert "ConfigurationError" in summary["cells"][1]["error"]
        assert (out / "cells" / "1.log").is_file()
        rows = (out / "sweep.csv").read_text(encoding="utf-8").splitlines()
        assert rows[0].startswith("index,value,A,mass1,chi1,classification")
        assert len(rows) == 3

    def test_single_value_is_rejected(self, write_config, tmp_path):
        """A sweep needs at least two values."""
        config = write_config(experiment="A_values = [10.0]")

        assert main(["sweep", "--config", str(config), "--out", str(tmp_path / "s")]) == EXIT_CONFIG


class TestBisect:
    """pksflow bisect with a stubbed nonlinear run."""

    def test_threshold_is_bracketed(self, write_config, tmp_path, monkeypatch):
        """With a threshold at A = 37 the final interval contains it and is narrower than tol."""
        monkeypatch.setattr(
            commands,
            "run_cell",
            lambda config, cell: fake_summary(
                Classification.BLOW_UP_FLAGGED if cell.value < 37.0 else Classification.BOUNDED
            ),
        )
        out = tmp_path / "bisect"
        config = write_config(experiment="A_lo = 0.0\nA_hi = 100.0\ntol = 5.0")
        code = main(["bisect", "--config", str(config), "--out", str(out)])

        summary = read_json(out / "bisect.json")
        lo, hi = summary["interval"]
        assert code == EXIT_OK
        assert lo < 37.0 <= hi
        assert hi - lo <= 5.0
        assert summary["converged"] is True
        assert summary["iterations"] == 5
        assert summary["monotonicity_violations"] == []
        assert [item["A"] for item in summary["evaluations"]][:3] == [0.0, 100.0, 50.0]

    def test_same_class_endpoints(self, write_config, tmp_path, monkeypatch, capsys):
        """Endpoints in one class exit with 3 and print both summaries."""
        monkeypatch.setattr(commands, "run_cell", lambda config, cell: fake_summary(Classification.BOUNDED))
        config = write_config(experiment="A_lo = 10.0\nA_hi = 20.0\ntol = 5.0")
        code = main(["bisect", "--config", str(config), "--out", str(tmp_path / "bisect")])

        assert code == EXIT_BRACKET
        err = capsys.readouterr().err
        assert "A_lo" in err and "A_hi" in err
        assert read_json(tmp_path / "bisect" / "bisect.json")["error"] == "same_class"

    def test_inconclusive_endpoint_is_rejected(self, write_config, tmp_path, monkeypatch):
        """An inconclusive/bounded pair is not a bracket and exits with 3."""
        monkeypatch.setattr(
            commands,
            "run_cell",
            lambda config, cell: fake_summary(
                Classification.INCONCLUSIVE if cell.value < 50.0 else Classification.BOUNDED
            ),
        )
        config = write_config(experiment="A_lo = 10.0\nA_hi = 100.0\ntol = 5.0")
        code = main(["bisect", "--config", str(config), "--out", str(tmp_path / "bisect")])

        assert code == EXIT_BRACKET
        assert read_json(tmp_path / "bisect" / "bisect.json")["error"] == "not_bracketing"

    def test_inconclusive_midpoint_stops_the_search(self, write_config, tmp_path, monkeypatch):
        """An inconclusive mid-point never becomes an endpoint; the search stops there."""

        def classify_by_A(config, cell):
            if cell.value < 20.0:
                return fake_summary(Classification.BLOW_UP_FLAGGED)
            if cell.value < 60.0:
                return fake_summary(Classification.INCONCLUSIVE)
            return fake_summary(Classification.BOUNDED)

        monkeypatch.setattr(commands, "run_cell", classify_by_A)
        out = tmp_path / "bisect"
        config = write_config(experiment="A_lo = 0.0\nA_hi = 100.0\ntol = 5.0")
        code = main(["bisect", "--config", str(config), "--out", str(out)])

        summary = read_json(out / "bisect.json")
        assert code == EXIT_OK
        assert summary["interval"] == [0.0, 100.0]
        assert summary["inconclusive_at"] == 50.0
        assert summary["converged"] is False
        assert summary["iterations"] == 1
        assert summary["classes"] == {"lo": "blow_up_flagged", "hi": "bounded"}

    def test_monotonicity_audit(self):
        """A low-class value above a past-threshold value is flagged."""
        evaluations = [(30.0, "blow_up_flagged"), (10.0, "blow_up_flagged"), (20.0, "bounded")]

        assert monotonicity_audit(evaluations, "blow_up_flagged") == [
            {"A_above": 20.0, "class_above": "bounded", "A_low_class": 30.0}
        ]
        assert monotonicity_audit([(1.0, "x"), (2.0, "y")], "x") == []


class TestWorkers:
    """Bounded thread pool for independent cells."""

    def test_order_is_preserved(self):
        """Outcomes follow the input order regardless of thread count."""
        outcomes = parallel_map(lambda x: x * x, list(range(20)), threads=4)

        assert [o.value for o in outcomes] == [x * x for x in range(20)]
        assert [o.index for o in outcomes] == list(range(20))

    def test_errors_are_isolated(self):
        """One raising cell is recorded; the others complete."""

        def work(x: int) -> int:
            if x == 2:
                raise ValueError("bad cell")
            return x

        outcomes = parallel_map(work, [0, 1, 2, 3], threads=2)

        assert [o.ok for o in outcomes] == [True, True, False, True]
        assert outcomes[2].error == "ValueError: bad cell"
        assert outcomes[3].value == 3

    def test_per_cell_logs(self, tmp_path):
        """Each cell writes <index>.log with its own messages only."""

        def work(x: int) -> int:
            logging.getLogger("pksflow.test").warning("cell value %d", x)
            return x

        parallel_map(work, [7, 8], threads=2, log_dir=tmp_path, offset=5)

        assert "cell value 7" in (tmp_path / "5.log").read_text(encoding="utf-8")
        assert "cell value 7" not in (tmp_path / "6.log").read_text(encoding="utf-8")


class TestLinearAnalysis:
    """resolvent / decay / timespace on tiny grids."""

    def test_resolvent(self, write_config, tmp_path):
        """resolvent.csv, psi.csv and per-k fits are written."""
        out = tmp_path / "res"
        config = write_config(experiment="A_values = [10.0, 100.0]\n" + LIN_SMALL)
        code = main(["resolvent", "--config", str(config), "--out", str(out), "--threads", "2"])

        summary = read_json(out / "summary.json")
        assert code == EXIT_OK
        assert (out / "resolvent.csv").read_text(encoding="utf-8").startswith("A,k,lambda,sigma_min,regime\n")
        assert (out / "psi.csv").is_file()
        assert len(summary["cells"]) + len(summary["failures"]) == 2
        assert verify_manifest(out) == []

    def test_decay_local_and_nonlocal(self, write_config, tmp_path):
        """Both operators are measured and c' is estimated from the local one."""
        out = tmp_path / "decay"
        config = write_config(experiment="A_values = [10.0, 100.0]\nnonlocal = true\n" + LIN_SMALL)
        code = main(["decay", "--config", str(config), "--out", str(out)])

        summary = read_json(out / "summary.json")
        operators = {cell["nonlocal"] for cell in summary["cells"]}
        assert code == EXIT_OK
        assert operators == {False, True}
        assert summary["c_prime_estimate"] > 0.0
        assert summary["a_rate_suggestion"] == pytest.approx(summary["c_prime_estimate"] / 2.0)
        assert len((out / "decay.csv").read_text(encoding="utf-8").splitlines()) == 1 + 4 * 21

    def test_timespace(self, write_config, tmp_path):
        """The ratio is reported per A and a_rate derives from the estimated c'."""
        out = tmp_path / "ts"
        body = "A_values = [10.0, 100.0]\ntimespace_horizon = 5.0\ntimespace_steps = 40\n" + LIN_SMALL
        code = main(["timespace", "--config", str(write_config(experiment=body)), "--out", str(out)])

        summary = read_json(out / "summary.json")
        assert code == EXIT_OK
        assert summary["a_rate"] == pytest.approx(0.5 * summary["c_prime"])
        assert all(cell["ratio"] >= 1.0 for cell in summary["cells"])
        assert "1/local" in summary["uniformity"]

    def test_timespace_uniformity_uses_factor_two(self, write_config, tmp_path, monkeypatch):
        """A 2.5x spread of the ratio across A is not uniform."""

        def fake_timespace(A, k, forcing, a_rate, **kwargs):
            numerator = 1.0 if A < 50.0 else 2.5
            return TimeSpaceReport(A, k, False, a_rate, numerator, 1.0, -1.0, False)

        monkeypatch.setattr(commands, "verify_timespace", fake_timespace)
        out = tmp_path / "ts"
        body = "A_values = [10.0, 100.0]\nc_prime = 1.0\n" + LIN_SMALL
        code = main(["timespace", "--config", str(write_config(experiment=body)), "--out", str(out)])

        uniformity = read_json(out / "summary.json")["uniformity"]["1/local"]
        assert code == EXIT_OK
        assert uniformity["spread"] == pytest.approx(2.5)
        assert uniformity["uniform"] is False


@pytest.mark.slow
class TestSuppressionContrast:
    """The suppression_contrast preset at half resolution."""

    def test_shear_off_diverges_and_strong_shear_stays_bounded(self):
        """A = 0 is flagged with |n1|_inf growth >= 100; A = 1e4 stays within twice the initial peak."""
        config = load_config("suppression_contrast", environ={"PKSFLOW_GRID_NX": "64", "PKSFLOW_GRID_NY": "64"})
        assert config.experiment.A_values == (0.0, 10000.0)

        off = commands.run_cell(config, commands.make_run_cell(config, "A", 0.0))
        strong = commands.run_cell(config, commands.make_run_cell(config, "A", 10000.0))

        assert off.classification is Classification.BLOW_UP_FLAGGED
        assert off.n1_linf_max >= 100.0 * off.n1_linf_initial
        assert strong.classification is Classification.BOUNDED
        assert strong.n1_linf_max <= 2.0 * strong.n1_linf_initial

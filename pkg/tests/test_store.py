"""
Tests for run directories, CSV/JSON writers and checkpoints.

Validates:
- manifest checksums and tamper detection
- deterministic cell formatting and column checks
- checkpoint save/load in both field formats, version and missing-file errors
"""

from __future__ import annotations

import json

import numpy as np
import pytest

from app.dynamics import make_initial
from app.models import SimParams
from app.store import (
    CHECKPOINT_NAME,
    MANIFEST_NAME,
    CheckpointVersionError,
    RunDirectory,
    StoreError,
    dump_json,
    format_cell,
    load_checkpoint,
    read_csv,
    save_checkpoint,
    sha256_of,
    verify_manifest,
    write_csv,
)


class TestRunDirectory:
    """Every emitted file is listed in manifest.json."""

    def test_manifest_lists_checksums(self, tmp_path):
        """sha256 and size of each registered file are recorded."""
        run = RunDirectory(tmp_path / "out", "simulate")
        run.write_json("summary.json", {"ok": True})
        run.write_csv("table.csv", ["a", "b"], [(1, 2.5)])
        manifest_path = run.finalize({"exit_code": 0})

        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        paths = [entry["path"] for entry in manifest["files"]]
        assert paths == ["summary.json", "table.csv"]
        assert manifest["verb"] == "simulate"
        assert manifest["exit_code"] == 0
        for entry in manifest["files"]:
            target = run.root / entry["path"]
            assert entry["sha256"] == sha256_of(target)
            assert entry["bytes"] == target.stat().st_size
        assert verify_manifest(run.root) == []

    def test_tampering_is_detected(self, tmp_path):
        """Editing or deleting a file breaks the manifest."""
        run = RunDirectory(tmp_path, "verify")
        run.write_json("a.json", [1, 2])
        run.write_json("b.json", [3])
        run.finalize()

        (tmp_path / "a.json").write_text("[1, 3]\n", encoding="utf-8")
        (tmp_path / "b.json").unlink()
        assert verify_manifest(tmp_path) == ["a.json", "b.json"]

    def test_register_missing_file(self, tmp_path):
        """Only existing files can be registered."""
        run = RunDirectory(tmp_path, "simulate")

        with pytest.raises(StoreError):
            run.register("ghost.csv")

    def test_register_tree(self, tmp_path):
        """Nested files are registered with posix paths."""
        run = RunDirectory(tmp_path, "sweep")
        (tmp_path / "cells" / "0").mkdir(parents=True)
        (tmp_path / "cells" / "0" / "cell.log").write_text("ok\n", encoding="utf-8")
        run.register_tree("cells")
        run.register_tree("absent")

        manifest = json.loads(run.finalize().read_text(encoding="utf-8"))
        assert [entry["path"] for entry in manifest["files"]] == ["cells/0/cell.log"]
        assert MANIFEST_NAME not in [entry["path"] for entry in manifest["files"]]


class TestWriters:
    """Deterministic text output."""

    @pytest.mark.parametrize(
        "value, text",
        [(True, "true"), (False, "false"), (0.1, "0.1"), (np.float64(1e-20), "1e-20"), (3, "3"), (np.int64(7), "7"), (None, ""), ("x", "x")],
    )
    def test_format_cell(self, value, text):
        """Floats use repr(); booleans are lower-case."""
        assert format_cell(value) == text

    def test_csv_round_trip(self, tmp_path):
        """Header first, LF line endings, cells read back as text."""
        path = tmp_path / "t.csv"
        write_csv(path, ["t", "flag"], [(0.0, True), (0.5, False)])

        assert path.read_bytes() == b"t,flag\n0.0,true\n0.5,false\n"
        assert read_csv(path) == (["t", "flag"], [["0.0", "true"], ["0.5", "false"]])

    def test_csv_column_mismatch(self, tmp_path):
        """A short row is rejected."""
        with pytest.raises(StoreError):
            write_csv(tmp_path / "bad.csv", ["a", "b"], [(1,)])

    def test_empty_csv(self, tmp_path):
        """Reading a file without a header fails."""
        path = tmp_path / "empty.csv"
        path.write_text("", encoding="utf-8")

        with pytest.raises(StoreError):
            read_csv(path)

    def test_json_non_finite(self):
        """NaN and inf are written as strings so the output stays valid JSON."""
        payload = json.loads(dump_json({"a": float("nan"), "b": [np.inf, 1.5], "c": np.int64(2)}))

        assert payload == {"a": "nan", "b": ["inf", 1.5], "c": 2}


class TestCheckpoint:
    """Restartable state snapshots."""

    @pytest.mark.parametrize("fmt", ["binary", "csv"])
    def test_round_trip(self, tmp_path, grid16, wide_bumps, fmt):
        """Fields, time, mean flow and parameters come back unchanged."""
        state = make_initial(grid16, wide_bumps).with_fields(t=0.25)
        params = SimParams(A=10.0, dt=5e-4, scheme="sbdf2")
        save_checkpoint(tmp_path / "ckpt", state, params, fmt, step=7)

        loaded, loaded_params = load_checkpoint(tmp_path / "ckpt")
        assert loaded.t == 0.25
        assert loaded.bc is state.bc
        np.testing.assert_array_equal(loaded.n1.values, state.n1.values)
        np.testing.assert_array_equal(loaded.omega.values, state.omega.values)
        np.testing.assert_array_equal(loaded.u01, state.u01)
        assert loaded_params == params
        meta = json.loads((tmp_path / "ckpt" / CHECKPOINT_NAME).read_text(encoding="utf-8"))
        assert meta["step"] == 7

    def test_version_mismatch(self, tmp_path, grid16, wide_bumps):
        """A checkpoint from another format version is refused."""
        directory = tmp_path / "ckpt"
        save_checkpoint(directory, make_initial(grid16, wide_bumps), SimParams(A=10.0))
        meta = directory / CHECKPOINT_NAME
        payload = json.loads(meta.read_text(encoding="utf-8"))
        payload["format_version"] = 99
        meta.write_text(json.dumps(payload), encoding="utf-8")

        with pytest.raises(CheckpointVersionError):
            load_checkpoint(directory)

    def test_missing_checkpoint(self, tmp_path):
        """No checkpoint.json is a store error."""
        with pytest.raises(StoreError):
            load_checkpoint(tmp_path / "nowhere")

    def test_missing_field_file(self, tmp_path, grid16, wide_bumps):
        """A deleted field file is reported."""
        directory = tmp_path / "ckpt"
        save_checkpoint(directory, make_initial(grid16, wide_bumps), SimParams(A=10.0))
        (directory / "n2.bin").unlink()

        with pytest.raises(StoreError):
            load_checkpoint(directory)

    def test_unknown_format(self, tmp_path, grid16, wide_bumps):
        """Only binary and csv field formats exist."""
        with pytest.raises(StoreError):
            save_checkpoint(tmp_path, make_initial(grid16, wide_bumps), SimParams(A=10.0), fmt="hdf5")

    def test_run_directory_registers_checkpoint(self, tmp_path, grid16, wide_bumps):
        """write_checkpoint lists the fields and metadata in the manifest."""
        run = RunDirectory(tmp_path, "simulate")
        run.write_checkpoint("checkpoint", make_initial(grid16, wide_bumps), SimParams(A=10.0))

        manifest = json.loads(run.finalize().read_text(encoding="utf-8"))
        assert {entry["path"] for entry in manifest["files"]} == {
            "checkpoint/n1.bin",
            "checkpoint/n2.bin",
            "checkpoint/omega.bin",
            f"checkpoint/{CHECKPOINT_NAME}",
        }

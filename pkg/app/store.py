from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .grid import (
    ChannelGrid,
    FieldFormatError,
    PhysField,
    read_field_binary,
    read_field_csv,
    write_field_binary,
    write_field_csv,
)
from .models import DensityBC, SimParams, utc_now_iso
from .state import SimState

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
CHECKPOINT_NAME = "checkpoint.json"
FIELD_NAMES = ("n1", "n2", "omega")
_SUFFIX = {"binary": ".bin", "csv": ".csv"}


class StoreError(Exception):
    """Base class for run-directory and checkpoint problems."""


class CheckpointVersionError(StoreError):
    """Raised when a checkpoint was written by an incompatible format version."""


class RunDirectory:
    """
    Output directory of one CLI invocation.

    Every emitted file goes through this class so that manifest.json can list
    it with its sha256 and size.
    """

    def __init__(self, root: Path, verb: str) -> None:
        self._root = Path(root)
        self._verb = verb
        self._files: dict[str, Path] = {}
        try:
            self._root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StoreError(f"出力ディレクトリを作成できません: {self._root}") from exc

    @property
    def root(self) -> Path:
        return self._root

    # Public API ---------------------------------------------------------
    def path(self, name: str) -> Path:
        target = self._root / name
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def register(self, name: str) -> Path:
        target = self._root / name
        if not target.is_file():
            raise StoreError(f"登録しようとしたファイルが存在しません: {target}")
        self._files[name] = target
        return target

    def write_json(self, name: str, payload: Any) -> Path:
        target = self.path(name)
        target.write_text(dump_json(payload), encoding="utf-8")
        return self.register(name)

    def write_csv(self, name: str, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        target = self.path(name)
        write_csv(target, columns, rows)
        return self.register(name)

    def write_field(self, name: str, field: PhysField, fmt: str = "binary") -> Path:
        stem = f"{name}{_SUFFIX[fmt]}"
        target = self.path(stem)
        if fmt == "binary":
            write_field_binary(field, target)
        else:
            write_field_csv(field, target)
        return self.register(stem)

    def write_checkpoint(self, name: str, state: SimState, params: SimParams, fmt: str = "binary", **extra) -> Path:
        directory = self._root / name
        for written in save_checkpoint(directory, state, params, fmt, **extra):
            self.register(written.relative_to(self._root).as_posix())
        return directory

    def register_tree(self, name: str) -> None:
        """Register every file below a subdirectory (e.g. per-cell logs)."""

        base = self._root / name
        if not base.is_dir():
            return
        for target in sorted(base.rglob("*")):
            if target.is_file():
                self.register(target.relative_to(self._root).as_posix())

    def finalize(self, extra: dict | None = None) -> Path:
        entries = []
        for name in sorted(self._files):
            target = self._files[name]
            entries.append({"path": name, "sha256": sha256_of(target), "bytes": target.stat().st_size})
        payload = {
            "format_version": FORMAT_VERSION,
            "verb": self._verb,
            "created_at": utc_now_iso(),
            "files": entries,
        }
        if extra:
            payload.update(extra)
        target = self._root / MANIFEST_NAME
        target.write_text(dump_json(payload), encoding="utf-8")
        return target


# Writers ---------------------------------------------------------------------
def format_cell(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value is None:
        return ""
    return str(value)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            if len(row) != len(columns):
                raise StoreError(f"{path.name}: 列数 {len(row)} がヘッダ {len(columns)} と一致しません")
            writer.writerow([format_cell(value) for value in row])


def read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            columns = next(reader)
        except StopIteration as exc:
            raise StoreError(f"{path}: 空の CSV です") from exc
        return columns, [row for row in reader if row]


def dump_json(payload: Any) -> str:
    return json.dumps(_jsonable(payload), ensure_ascii=False, indent=2) + "\n"


def sha256_of(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def verify_manifest(root: Path) -> list[str]:
    """Paths whose checksum no longer matches (or that vanished)."""

    manifest = json.loads((root / MANIFEST_NAME).read_text(encoding="utf-8"))
    broken = []
    for entry in manifest["files"]:
        target = root / entry["path"]
        if not target.is_file() or sha256_of(target) != entry["sha256"]:
            broken.append(entry["path"])
    return broken


# Checkpoints -----------------------------------------------------------------
def save_checkpoint(directory: Path, state: SimState, params: SimParams, fmt: str = "binary", **extra) -> list[Path]:
    if fmt not in _SUFFIX:
        raise StoreError(f"未知のフィールド形式です: {fmt}")
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    files = {}
    for name in FIELD_NAMES:
        target = directory / f"{name}{_SUFFIX[fmt]}"
        field = getattr(state, name)
        if fmt == "binary":
            write_field_binary(field, target)
        else:
            write_field_csv(field, target)
        files[name] = target.name
        written.append(target)
    payload = {
        "format_version": FORMAT_VERSION,
        "t": state.t,
        "bc": state.bc.value,
        "grid": {"nx": state.grid.nx, "ny": state.grid.ny, "dealias": state.grid.dealias},
        "params": params.to_dict(),
        "u01": [float(value) for value in state.u01],
        "files": files,
        **extra,
    }
    meta = directory / CHECKPOINT_NAME
    meta.write_text(dump_json(payload), encoding="utf-8")
    written.append(meta)
    return written


def load_checkpoint(directory: Path) -> tuple[SimState, SimParams]:
    meta = Path(directory) / CHECKPOINT_NAME
    try:
        payload = json.loads(meta.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise StoreError(f"チェックポイントが見つかりません: {meta}") from exc
    except json.JSONDecodeError as exc:
        raise StoreError(f"チェックポイントが壊れています: {meta}") from exc

    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"チェックポイントの形式バージョン {version} は未対応です（期待値 {FORMAT_VERSION}）")

    grid = ChannelGrid(**payload["grid"])
    fields = {}
    for name in FIELD_NAMES:
        target = Path(directory) / payload["files"][name]
        try:
            field = read_field_binary(target) if target.suffix == ".bin" else read_field_csv(target)
        except FileNotFoundError as exc:
            raise StoreError(f"チェックポイントのフィールドがありません: {target}") from exc
        except FieldFormatError as exc:
            raise StoreError(str(exc)) from exc
        if field.grid != grid:
            raise StoreError(f"{target.name} の格子がチェックポイントと一致しません")
        fields[name] = field
    state = SimState(
        grid=grid,
        t=float(payload["t"]),
        n1=fields["n1"],
        n2=fields["n2"],
        omega=fields["omega"],
        u01=np.asarray(payload["u01"], dtype=float),
        bc=DensityBC(payload["bc"]),
    )
    return state, SimParams.from_dict(payload["params"])


# Internal helpers ------------------------------------------------------------
def _jsonable(value: Any) -> Any:
    # NaN / inf は JSON にできないので文字列にする
    if isinstance(value, dict):
        return {str(key): _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(item) for item in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else repr(value)
    if isinstance(value, Path):
        return str(value)
    if hasattr(value, "value") and isinstance(getattr(value, "value"), str):
        return value.value
    return value

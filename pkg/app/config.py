from __future__ import annotations

import math
import os
import re
import sys

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # Python 3.10: API-identical backport
    import tomli as tomllib

from .grid import ChannelGrid, GridError
from .models import BumpSpec, InitialSpec, ParameterError, SimParams
from .resources import resource_path

ENV_PREFIX = "PKSFLOW_"
MODES = ("simulate", "sweep", "bisect", "resolvent", "decay", "timespace", "verify")
SNAPSHOT_POLICIES = ("none", "final", "samples")
SNAPSHOT_FORMATS = ("binary", "csv")
FORCING_PROFILES = ("layer", "smooth")


class ConfigError(Exception):
    """Schema or value error in an experiment config, with a file/line reference."""

    def __init__(self, message: str, location: str = "") -> None:
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


@dataclass(frozen=True)
class AppPaths:
    """Centralized paths used across the application."""

    root: Path = field(default_factory=lambda: Path.cwd().resolve())
    runs_dir: Path = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "runs_dir", self.root / "runs")

    def default_output(self, verb: str) -> Path:
        # 出力先が未指定なら runs/<verb> を使う（作成は書き込み時）
        return (self.runs_dir / verb).resolve()


# Schema ----------------------------------------------------------------------
@dataclass(frozen=True)
class _Key:
    kind: str
    default: Any = None
    required: bool = False


_SCHEMA: dict[str, dict[str, _Key]] = {
    "grid": {
        "nx": _Key("int", 64),
        "ny": _Key("int", 64),
        "dealias": _Key("bool", True),
    },
    "params": {
        "A": _Key("float", required=True),
        "chi1": _Key("float", 1.0),
        "chi2": _Key("float", 1.0),
        "bc": _Key("str", "neumann"),
        "a_rate": _Key("float", 0.25),
        "dt": _Key("float", 1e-3),
        "t_end": _Key("float", 1.0),
        "cfl_safety": _Key("float", 0.5),
        "blowup_factor": _Key("float", 1e4),
        "scheme": _Key("str", "euler"),
        "buoyancy": _Key("bool", True),
        "max_halvings": _Key("int", 20),
    },
    "initial": {
        "seed": _Key("int", 0),
        "mass1": _Key("float", 1.0),
        "mass2": _Key("float", 1.0),
        "noise": _Key("float", 0.0),
        "bump_species": _Key("list[int]", [1, 2]),
        "bump_x": _Key("list[float]", [math.pi, math.pi]),
        "bump_y": _Key("list[float]", [0.0, 0.0]),
        "bump_width": _Key("list[float]", [0.3, 0.3]),
        "omega_amplitude": _Key("float", 0.0),
        "omega_mode": _Key("int", 1),
        "u01_amplitude": _Key("float", 0.0),
        "restart": _Key("str", ""),
    },
    "experiment": {
        "mode": _Key("str", "simulate"),
        "A_values": _Key("list[float]", []),
        "mass_values": _Key("list[float]", []),
        "chi1_values": _Key("list[float]", []),
        "match_physical_time": _Key("bool", False),
        "A_lo": _Key("float", 0.0),
        "A_hi": _Key("float", 1000.0),
        "tol": _Key("float", 10.0),
        "max_iter": _Key("int", 40),
        "k_values": _Key("list[int]", [1]),
        "lambda_neg": _Key("float", 1.0),
        "lambda_pos": _Key("float", 1.0),
        "points_per_regime": _Key("int", 12),
        "mu_points": _Key("int", 81),
        "ny_lin": _Key("int", 128),
        "ny_max": _Key("int", 512),
        "converge": _Key("bool", False),
        "decay_horizon": _Key("float", 25.0),
        "decay_samples": _Key("int", 101),
        "nonlocal": _Key("bool", False),
        "forcing_amplitude": _Key("float", 0.0),
        "forcing_profile": _Key("str", "layer"),
        "timespace_horizon": _Key("float", 40.0),
        "timespace_steps": _Key("int", 2000),
        "c_prime": _Key("float", 0.0),
        "uniformity_factor": _Key("float", 3.0),
        "timespace_uniformity_factor": _Key("float", 2.0),
        "n_states": _Key("int", 100),
        "inject_fault": _Key("str", ""),
    },
    "output": {
        "directory": _Key("str", ""),
        "sample_every": _Key("float", 0.05),
        "snapshots": _Key("str", "none"),
        "snapshot_format": _Key("str", "binary"),
    },
}


# Blocks ----------------------------------------------------------------------
@dataclass(frozen=True)
class GridBlock:
    nx: int = 64
    ny: int = 64
    dealias: bool = True

    def build(self) -> ChannelGrid:
        return ChannelGrid(nx=self.nx, ny=self.ny, dealias=self.dealias)


@dataclass(frozen=True)
class ExperimentBlock:
    """Mode-specific ranges; only the keys of the selected mode are used."""

    mode: str = "simulate"
    A_values: tuple[float, ...] = ()
    mass_values: tuple[float, ...] = ()
    chi1_values: tuple[float, ...] = ()
    match_physical_time: bool = False
    A_lo: float = 0.0
    A_hi: float = 1000.0
    tol: float = 10.0
    max_iter: int = 40
    k_values: tuple[int, ...] = (1,)
    lambda_neg: float = 1.0
    lambda_pos: float = 1.0
    points_per_regime: int = 12
    mu_points: int = 81
    ny_lin: int = 128
    ny_max: int = 512
    converge: bool = False
    decay_horizon: float = 25.0
    decay_samples: int = 101
    nonlocal_term: bool = False
    forcing_amplitude: float = 0.0
    forcing_profile: str = "layer"
    timespace_horizon: float = 40.0
    timespace_steps: int = 2000
    c_prime: float = 0.0
    uniformity_factor: float = 3.0
    timespace_uniformity_factor: float = 2.0
    n_states: int = 100
    inject_fault: str = ""

    @property
    def sweep_axis(self) -> tuple[str, tuple[float, ...]]:
        axes = [(name, getattr(self, f"{name}_values")) for name in ("A", "mass", "chi1")]
        chosen = [(name, values) for name, values in axes if values]
        if len(chosen) != 1:
            raise ConfigError("sweep には A_values / mass_values / chi1_values のうち 1 つだけを指定してください")
        return chosen[0]


@dataclass(frozen=True)
class OutputBlock:
    directory: str = ""
    sample_every: float = 0.05
    snapshots: str = "none"
    snapshot_format: str = "binary"


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; every field is in rescaled units."""

    grid: GridBlock
    params: SimParams
    initial: InitialSpec
    experiment: ExperimentBlock
    output: OutputBlock
    restart: str = ""
    source: str = ""

    @property
    def mode(self) -> str:
        return self.experiment.mode

    @property
    def seed(self) -> int:
        return self.initial.seed

    def with_mode(self, mode: str) -> "ExperimentConfig":
        if mode not in MODES:
            raise ConfigError(f"未知のモードです: {mode}")
        return replace(self, experiment=replace(self.experiment, mode=mode))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, initial=replace(self.initial, seed=seed))

    def with_output_directory(self, directory: str | Path) -> "ExperimentConfig":
        return replace(self, output=replace(self.output, directory=str(directory)))

    def output_directory(self, paths: AppPaths | None = None) -> Path:
        if self.output.directory:
            return Path(self.output.directory).expanduser().resolve()
        return (paths or AppPaths()).default_output(self.mode)

    def to_dict(self) -> dict:
        return {
            "grid": asdict(self.grid),
            "params": self.params.to_dict(),
            "initial": self.initial.to_dict(),
            "experiment": asdict(self.experiment),
            "output": asdict(self.output),
            "restart": self.restart,
            "source": self.source,
        }


# Public API ------------------------------------------------------------------
def resolve_config_path(name: str | Path) -> Path:
    """A path to an existing file, or a bundled preset name under data/configs/."""

    path = Path(name).expanduser()
    if path.exists():
        return path.resolve()
    text = str(name)
    if "/" not in text and os.sep not in text:
        preset = resource_path("data", "configs", f"{Path(text).stem}.toml")
        if preset.exists():
            return preset
    raise ConfigError(f"設定ファイルが見つかりません: {name}")


def load_config(name: str | Path, environ: dict[str, str] | None = None) -> ExperimentConfig:
    path = resolve_config_path(name)
    return parse_config(path.read_text(encoding="utf-8"), source=str(path), environ=environ)


def parse_config(text: str, source: str = "<config>", environ: dict[str, str] | None = None) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML の構文エラー: {exc}", source) from exc

    lines = _line_index(text)

    def where(section: str, key: str | None = None) -> str:
        line = lines.get((section, key)) or lines.get((section, None))
        return f"{source}:{line}" if line else source

    for section, table in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(f"未知のセクションです: [{section}]", where(section))
        if not isinstance(table, dict):
            raise ConfigError(f"[{section}] はテーブルである必要があります", where(section))
        for key in table:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"未知のキーです: {section}.{key}", where(section, key))

    env = os.environ if environ is None else environ
    values: dict[str, dict[str, Any]] = {}
    for section, keys in _SCHEMA.items():
        table = raw.get(section, {})
        resolved: dict[str, Any] = {}
        for key, spec in keys.items():
            env_name = f"{ENV_PREFIX}{section.upper()}_{key.upper()}"
            if env_name in env:
                value, location = _parse_env_value(env[env_name]), f"env:{env_name}"
            elif key in table:
                value, location = table[key], where(section, key)
            elif spec.required:
                raise ConfigError(f"必須キーがありません: {section}.{key}", where(section))
            else:
                resolved[key] = spec.default
                continue
            resolved[key] = _coerce(value, spec.kind, f"{section}.{key}", location)
        values[section] = resolved

    return _build(values, source, where)


# Internal helpers ------------------------------------------------------------
_SECTION_RE = re.compile(r"^\s*\[\s*([A-Za-z0-9_]+)\s*\]")
_KEY_RE = re.compile(r"^\s*([A-Za-z0-9_]+)\s*=")


def _line_index(text: str) -> dict[tuple[str, str | None], int]:
    # tomllib は位置情報を返さないので、キーとセクションの行番号を自前で拾う
    index: dict[tuple[str, str | None], int] = {}
    section = ""
    for number, line in enumerate(text.splitlines(), start=1):
        header = _SECTION_RE.match(line)
        if header:
            section = header.group(1)
            index.setdefault((section, None), number)
            continue
        key = _KEY_RE.match(line)
        if key:
            index.setdefault((section, key.group(1)), number)
    return index


def _parse_env_value(raw: str) -> Any:
    try:
        return tomllib.loads(f"value = {raw}")["value"]
    except tomllib.TOMLDecodeError:
        return raw


def _coerce(value: Any, kind: str, name: str, location: str) -> Any:
    def fail() -> ConfigError:
        return ConfigError(f"{name} の型が不正です（{kind} を期待）: {value!r}", location)

    if kind == "bool":
        if not isinstance(value, bool):
            raise fail()
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise fail()
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise fail()
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise fail()
        return value
    if kind.startswith("list["):
        if not isinstance(value, list):
            raise fail()
        inner = kind[5:-1]
        return [_coerce(item, inner, name, location) for item in value]
    raise ConfigError(f"スキーマの型指定が不正です: {kind}")


def _build(values: dict[str, dict[str, Any]], source: str, where) -> ExperimentConfig:
    try:
        grid = GridBlock(**values["grid"])
        grid.build()
    except GridError as exc:
        raise ConfigError(str(exc), where("grid")) from exc

    try:
        params = SimParams.from_dict(values["params"])
    except (ParameterError, ValueError) as exc:
        raise ConfigError(str(exc), where("params")) from exc

    initial_values = values["initial"]
    bump_lists = [initial_values[f"bump_{name}"] for name in ("species", "x", "y", "width")]
    if len({len(items) for items in bump_lists}) != 1:
        raise ConfigError("bump_species / bump_x / bump_y / bump_width の長さが一致しません", where("initial"))
    try:
        bumps = tuple(
            BumpSpec(species=species, x=x, y=y, width=width) for species, x, y, width in zip(*bump_lists)
        )
    except ParameterError as exc:
        raise ConfigError(str(exc), where("initial")) from exc
    initial = InitialSpec(
        mass1=initial_values["mass1"],
        mass2=initial_values["mass2"],
        bumps=bumps,
        seed=initial_values["seed"],
        noise=initial_values["noise"],
        omega_amplitude=initial_values["omega_amplitude"],
        omega_mode=initial_values["omega_mode"],
        u01_amplitude=initial_values["u01_amplitude"],
    )

    exp_values = dict(values["experiment"])
    exp_values["nonlocal_term"] = exp_values.pop("nonlocal")
    for name in ("A_values", "mass_values", "chi1_values", "k_values"):
        exp_values[name] = tuple(exp_values[name])
    experiment = ExperimentBlock(**exp_values)
    _check_experiment(experiment, where)

    output = OutputBlock(**values["output"])
    if output.snapshots not in SNAPSHOT_POLICIES:
        raise ConfigError(f"snapshots は {SNAPSHOT_POLICIES} のいずれかです: {output.snapshots}", where("output", "snapshots"))
    if output.snapshot_format not in SNAPSHOT_FORMATS:
        raise ConfigError(
            f"snapshot_format は {SNAPSHOT_FORMATS} のいずれかです: {output.snapshot_format}",
            where("output", "snapshot_format"),
        )
    if output.sample_every <= 0.0:
        raise ConfigError("sample_every は正である必要があります", where("output", "sample_every"))

    return ExperimentConfig(
        grid=grid,
        params=params,
        initial=initial,
        experiment=experiment,
        output=output,
        restart=initial_values["restart"],
        source=source,
    )


def _check_experiment(exp: ExperimentBlock, where) -> None:
    def fail(message: str, key: str) -> ConfigError:
        return ConfigError(message, where("experiment", key))

    if exp.mode not in MODES:
        raise fail(f"mode は {MODES} のいずれかです: {exp.mode}", "mode")
    for A in exp.A_values:
        if A != 0.0 and A < 1.0:
            raise fail(f"A_values の各値は 0 または 1 以上です: {A}", "A_values")
    if exp.A_lo != 0.0 and exp.A_lo < 1.0:
        raise fail(f"A_lo は 0 または 1 以上です: {exp.A_lo}", "A_lo")
    if exp.A_hi <= exp.A_lo:
        raise fail("A_hi は A_lo より大きい必要があります", "A_hi")
    if exp.tol <= 0.0 or (exp.A_lo == 0.0 and exp.tol < 2.0):
        # A_lo = 0 では中点が (0, 1) に落ちないよう tol >= 2 を要求する
        raise fail(f"tol が不正です: {exp.tol}", "tol")
    if exp.max_iter < 1:
        raise fail("max_iter は 1 以上です", "max_iter")
    if not exp.k_values or any(k == 0 for k in exp.k_values):
        raise fail("k_values は 0 を含まない空でないリストです", "k_values")
    if exp.points_per_regime < 10:
        raise fail("points_per_regime は 10 以上です", "points_per_regime")
    if exp.mu_points < 5:
        raise fail("mu_points は 5 以上です", "mu_points")
    if exp.ny_lin < 8 or exp.ny_max < exp.ny_lin:
        raise fail("ny_lin は 8 以上かつ ny_max 以下です", "ny_lin")
    if exp.decay_samples < 6:
        raise fail("decay_samples は 6 以上です", "decay_samples")
    if exp.forcing_profile not in FORCING_PROFILES:
        raise fail(f"forcing_profile は {FORCING_PROFILES} のいずれかです", "forcing_profile")
    if exp.timespace_steps < 1:
        raise fail("timespace_steps は 1 以上です", "timespace_steps")
    if exp.c_prime < 0.0:
        raise fail("c_prime は 0 以上です（0 は推定）", "c_prime")
    if exp.timespace_uniformity_factor < 1.0:
        raise fail("timespace_uniformity_factor は 1 以上です", "timespace_uniformity_factor")
    if exp.uniformity_factor < 1.0:
        raise fail("uniformity_factor は 1 以上です", "uniformity_factor")
    if exp.n_states < 1:
        raise fail("n_states は 1 以上です", "n_states")

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from enum import Enum


def utc_now_iso() -> str:
    # タイムゾーン付き ISO 文字列（秒精度）で現在時刻を取得するユーティリティ
    return datetime.now(tz=timezone.utc).replace(microsecond=0).isoformat()


class DensityBC(str, Enum):
    """Boundary condition family shared by n1, n2 and c."""

    DIRICHLET = "dirichlet"
    NEUMANN = "neumann"


class Scheme(str, Enum):
    EULER = "euler"
    SBDF2 = "sbdf2"


class Termination(str, Enum):
    COMPLETED = "completed"
    BLOW_UP = "blow_up"
    NUMERICAL_INSTABILITY = "numerical_instability"


class Classification(str, Enum):
    BOUNDED = "bounded"
    BLOW_UP_FLAGGED = "blow_up_flagged"
    INCONCLUSIVE = "inconclusive"


class ParameterError(ValueError):
    """Raised when a parameter record violates its own invariants."""


@dataclass(frozen=True)
class SimParams:
    """
    Physical and step-control parameters of the rescaled system.

    A = 0 switches the shear (and the nonlocal vorticity term) off and runs in
    unrescaled time with unit diffusion; otherwise A >= 1.
    """

    A: float
    chi1: float = 1.0
    chi2: float = 1.0
    bc: DensityBC = DensityBC.NEUMANN
    a_rate: float = 0.25
    dt: float = 1e-3
    t_end: float = 1.0
    cfl_safety: float = 0.5
    blowup_factor: float = 1e4
    scheme: Scheme = Scheme.EULER
    buoyancy: bool = True
    max_halvings: int = 20

    def __post_init__(self) -> None:
        # 文字列で渡された場合も Enum に正規化しておく
        object.__setattr__(self, "bc", DensityBC(self.bc))
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        for name in ("A", "chi1", "chi2", "a_rate", "dt", "t_end", "cfl_safety", "blowup_factor"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ParameterError(f"{name} は有限の実数である必要があります: {value}")
        if self.A != 0.0 and self.A < 1.0:
            raise ParameterError(f"A は 0（シア無し）または 1 以上である必要があります: {self.A}")
        if self.a_rate <= 0.0:
            raise ParameterError(f"a_rate は正である必要があります: {self.a_rate}")
        if self.dt <= 0.0:
            raise ParameterError(f"dt は正である必要があります: {self.dt}")
        if self.t_end < 0.0:
            raise ParameterError(f"t_end は 0 以上である必要があります: {self.t_end}")
        if not 0.0 < self.cfl_safety <= 1.0:
            raise ParameterError(f"cfl_safety は (0, 1] の範囲で指定してください: {self.cfl_safety}")
        if self.blowup_factor <= 1.0:
            raise ParameterError(f"blowup_factor は 1 より大きい必要があります: {self.blowup_factor}")
        if self.max_halvings < 0:
            raise ParameterError(f"max_halvings は 0 以上である必要があります: {self.max_halvings}")

    @property
    def shear(self) -> float:
        return 1.0 if self.A > 0.0 else 0.0

    @property
    def nu(self) -> float:
        """Diffusion coefficient of the evolved system (1/A, or 1 when the shear is off)."""

        return 1.0 / self.A if self.A > 0.0 else 1.0

    @property
    def A_eff(self) -> float:
        # X_a の重みに使う A。シア無しでは 1 として扱う
        return self.A if self.A > 0.0 else 1.0

    def chi(self, species: int) -> float:
        return self.chi1 if species == 1 else self.chi2

    def replace(self, **changes) -> "SimParams":
        payload = self.to_dict()
        payload.update(changes)
        return SimParams.from_dict(payload)

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["bc"] = self.bc.value
        payload["scheme"] = self.scheme.value
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "SimParams":
        known = {f.name for f in fields(cls)}
        return cls(**{key: value for key, value in payload.items() if key in known})


@dataclass(frozen=True)
class BumpSpec:
    """A Gaussian bump assigned to one density species."""

    species: int
    x: float
    y: float
    width: float

    def __post_init__(self) -> None:
        if self.species not in (1, 2):
            raise ParameterError(f"bump の species は 1 または 2 です: {self.species}")
        if not -1.0 < self.y < 1.0:
            raise ParameterError(f"bump の y は (-1, 1) の範囲で指定してください: {self.y}")
        if self.width <= 0.0:
            raise ParameterError(f"bump の width は正である必要があります: {self.width}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "BumpSpec":
        return cls(
            species=int(payload["species"]),
            x=float(payload["x"]),
            y=float(payload["y"]),
            width=float(payload["width"]),
        )


@dataclass(frozen=True)
class InitialSpec:
    """Descriptor for the initial densities, vorticity and mean flow."""

    mass1: float = 1.0
    mass2: float = 1.0
    bumps: tuple[BumpSpec, ...] = (
        BumpSpec(species=1, x=math.pi, y=0.0, width=0.3),
        BumpSpec(species=2, x=math.pi, y=0.0, width=0.3),
    )
    seed: int = 0
    noise: float = 0.0
    omega_amplitude: float = 0.0
    omega_mode: int = 1
    u01_amplitude: float = 0.0

    def to_dict(self) -> dict:
        return {
            "mass1": self.mass1,
            "mass2": self.mass2,
            "bumps": [bump.to_dict() for bump in self.bumps],
            "seed": self.seed,
            "noise": self.noise,
            "omega_amplitude": self.omega_amplitude,
            "omega_mode": self.omega_mode,
            "u01_amplitude": self.u01_amplitude,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "InitialSpec":
        bumps = tuple(BumpSpec.from_dict(item) for item in payload.get("bumps", []))
        return cls(
            mass1=float(payload.get("mass1", 1.0)),
            mass2=float(payload.get("mass2", 1.0)),
            bumps=bumps,
            seed=int(payload.get("seed", 0)),
            noise=float(payload.get("noise", 0.0)),
            omega_amplitude=float(payload.get("omega_amplitude", 0.0)),
            omega_mode=int(payload.get("omega_mode", 1)),
            u01_amplitude=float(payload.get("u01_amplitude", 0.0)),
        )


@dataclass(frozen=True)
class DiagRecord:
    """Per-sample norms of a state; one CSV row."""

    t: float
    dt: float
    n1_zero_l2: float
    n1_nonzero_l2: float
    n1_linf: float
    n1_min: float
    n2_zero_l2: float
    n2_nonzero_l2: float
    n2_linf: float
    n2_min: float
    omega_zero_l2: float
    omega_nonzero_l2: float
    domega0_dy_l2: float
    u01_linf: float
    u01_l2: float
    mass1: float
    mass2: float
    grad_c_l4: float

    @classmethod
    def columns(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def row(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in self.columns())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "DiagRecord":
        return cls(**{name: float(payload[name]) for name in cls.columns()})


@dataclass
class RunSummary:
    """Summary JSON of one simulation run (mutable while the run is collected)."""

    termination: Termination
    t_final: float
    samples: int
    n1_linf_initial: float
    n2_linf_initial: float
    n1_linf_max: float
    n2_linf_max: float
    mass_drift: float
    energy_final: float
    classification: Classification
    dt_final: float
    # Neumann の質量補正で消した差の合計
    mass_correction: float = 0.0
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["termination"] = self.termination.value
        payload["classification"] = self.classification.value
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "RunSummary":
        return cls(
            termination=Termination(payload["termination"]),
            t_final=float(payload["t_final"]),
            samples=int(payload["samples"]),
            n1_linf_initial=float(payload["n1_linf_initial"]),
            n2_linf_initial=float(payload["n2_linf_initial"]),
            n1_linf_max=float(payload["n1_linf_max"]),
            n2_linf_max=float(payload["n2_linf_max"]),
            mass_drift=float(payload["mass_drift"]),
            energy_final=float(payload["energy_final"]),
            classification=Classification(payload["classification"]),
            dt_final=float(payload["dt_final"]),
            mass_correction=float(payload.get("mass_correction", 0.0)),
            notes=list(payload.get("notes", [])),
        )

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np
from scipy.integrate import trapezoid

from .grid import (
    ChannelGrid,
    PhysField,
    ddx,
    ddy,
    gradient_l2,
    laplacian,
    lp_norm,
    profile_l2,
    project_nonzero,
    project_zero,
    zero_profile,
)
from .models import Classification, DensityBC, DiagRecord, Termination
from .state import SimState

if TYPE_CHECKING:
    from .dynamics import Trajectory

logger = logging.getLogger(__name__)

ABSOLUTE_SLACK = 1e-14
RELATIVE_SLACK = 1e-9
BOUNDED_FACTOR = 2.0


class DiagnosticsError(Exception):
    """Base class for diagnostics errors."""


class XaUsageError(DiagnosticsError):
    """Raised on time regression or when accumulators cannot be combined."""


# X_a bookkeeping -------------------------------------------------------------
@dataclass(frozen=True)
class XaAccumulator:
    """
    Running pieces of the time-weighted norm with weight exp(a A^{-1/2} t).

    sup_weighted   sup of e^{2bt} |f|^2
    int_weighted   trapezoid integral of e^{2bt} |f|^2
    int_gradient   trapezoid integral of e^{2bt} |grad f|^2
    """

    a_rate: float
    A: float
    t_last: float | None = None
    samples: int = 0
    sup_weighted: float = 0.0
    int_weighted: float = 0.0
    int_gradient: float = 0.0
    last_weighted: float = 0.0
    last_gradient: float = 0.0

    @property
    def growth(self) -> float:
        return self.a_rate / math.sqrt(self.A)

    def weight(self, t: float) -> float:
        return math.exp(2.0 * self.growth * t)

    @property
    def squared(self) -> float:
        return self.sup_weighted + self.int_weighted / math.sqrt(self.A) + self.int_gradient / self.A

    @property
    def value(self) -> float:
        return math.sqrt(self.squared)

    def to_dict(self) -> dict:
        return {
            "a_rate": self.a_rate,
            "A": self.A,
            "t_last": self.t_last,
            "samples": self.samples,
            "sup_weighted": self.sup_weighted,
            "int_weighted": self.int_weighted,
            "int_gradient": self.int_gradient,
            "xa": self.value,
        }


def update_xa_values(acc: XaAccumulator, t: float, l2_squared: float, grad_squared: float) -> XaAccumulator:
    if acc.t_last is not None and t < acc.t_last:
        raise XaUsageError(f"時刻が逆行しています: {t} < {acc.t_last}")
    weight = acc.weight(t)
    weighted = weight * l2_squared
    weighted_grad = weight * grad_squared
    int_weighted = acc.int_weighted
    int_gradient = acc.int_gradient
    if acc.t_last is not None:
        # 台形則で時間積分を進める
        span = t - acc.t_last
        int_weighted += 0.5 * span * (acc.last_weighted + weighted)
        int_gradient += 0.5 * span * (acc.last_gradient + weighted_grad)
    return replace(
        acc,
        t_last=t,
        samples=acc.samples + 1,
        sup_weighted=max(acc.sup_weighted, weighted),
        int_weighted=int_weighted,
        int_gradient=int_gradient,
        last_weighted=weighted,
        last_gradient=weighted_grad,
    )


def update_xa(acc: XaAccumulator, t: float, f: PhysField) -> XaAccumulator:
    return update_xa_values(acc, t, lp_norm(f, 2) ** 2, gradient_l2(f) ** 2)


def energy_E(acc_n1: XaAccumulator, acc_n2: XaAccumulator, acc_omega: XaAccumulator) -> float:
    """Sum of the three X_a values; the accumulators must share a_rate, A and sample grid."""

    accs = (acc_n1, acc_n2, acc_omega)
    first = accs[0]
    for acc in accs[1:]:
        if (acc.a_rate, acc.A, acc.t_last, acc.samples) != (first.a_rate, first.A, first.t_last, first.samples):
            raise XaUsageError("X_a アキュムレータの a_rate / A / サンプル時刻が一致しません")
    return sum(acc.value for acc in accs)


# Records ---------------------------------------------------------------------
def record(state: SimState, dt: float = 0.0) -> DiagRecord:
    grid = state.grid
    c = state.c
    grad_c_l4 = float(
        np.sum(grid.quadrature * (ddx(c).values ** 2 + ddy(c).values ** 2) ** 2) ** 0.25
    )
    omega0 = zero_profile(state.omega)
    return DiagRecord(
        t=state.t,
        dt=dt,
        n1_zero_l2=lp_norm(project_zero(state.n1), 2),
        n1_nonzero_l2=lp_norm(project_nonzero(state.n1), 2),
        n1_linf=state.n1.max_abs(),
        n1_min=float(np.min(state.n1.values)),
        n2_zero_l2=lp_norm(project_zero(state.n2), 2),
        n2_nonzero_l2=lp_norm(project_nonzero(state.n2), 2),
        n2_linf=state.n2.max_abs(),
        n2_min=float(np.min(state.n2.values)),
        omega_zero_l2=lp_norm(project_zero(state.omega), 2),
        omega_nonzero_l2=lp_norm(project_nonzero(state.omega), 2),
        domega0_dy_l2=math.sqrt(2.0 * math.pi) * profile_l2(grid, grid.D1 @ omega0),
        u01_linf=float(np.max(np.abs(state.u01))),
        u01_l2=math.sqrt(2.0 * math.pi) * profile_l2(grid, state.u01),
        mass1=state.mass(1),
        mass2=state.mass(2),
        grad_c_l4=grad_c_l4,
    )


# Inequality checks -----------------------------------------------------------
@dataclass(frozen=True)
class InequalityCheck:
    name: str
    lhs: float
    rhs: float
    kind: str  # "constant" | "empirical"
    constant: float | None = None

    @property
    def holds(self) -> bool:
        if self.kind == "empirical":
            return True
        return self.lhs <= self.rhs * (1.0 + RELATIVE_SLACK) + ABSOLUTE_SLACK

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def ratio(self) -> float:
        if self.rhs == 0.0:
            return 0.0 if self.lhs == 0.0 else math.inf
        return self.lhs / self.rhs

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "constant": self.constant,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "slack": self.slack,
            "ratio": self.ratio,
            "holds": self.holds,
        }


@dataclass(frozen=True)
class InequalityReport:
    checks: tuple[InequalityCheck, ...]

    @property
    def violations(self) -> list[InequalityCheck]:
        return [check for check in self.checks if not check.holds]

    @property
    def ok(self) -> bool:
        return not self.violations

    def get(self, name: str) -> InequalityCheck:
        for check in self.checks:
            if check.name == name:
                return check
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"ok": self.ok, "checks": [check.to_dict() for check in self.checks]}


FAULT_FLIP_POINCARE = "flip_poincare"
KNOWN_FAULTS = ("", FAULT_FLIP_POINCARE)


def verify_inequalities(state: SimState, fault: str = "") -> InequalityReport:
    """
    Evaluate the elliptic, Poincare and velocity inequalities on one state.

    Constant-carrying checks are "constant" entries; the rest report an
    empirical constant (lhs / base) and never fail.
    """

    if fault not in KNOWN_FAULTS:
        raise DiagnosticsError(f"未知の故障注入です: {fault}")

    c = state.c
    c0 = project_zero(c)
    c_nz = project_nonzero(c)
    n1_0, n2_0 = project_zero(state.n1), project_zero(state.n2)
    n1_nz, n2_nz = project_nonzero(state.n1), project_nonzero(state.n2)
    omega_nz = project_nonzero(state.omega)
    u1_nz, u2_nz = state.u1_nonzero, state.u2_nonzero

    checks: list[InequalityCheck] = []

    # ゼロモードの楕円型評価（定数 2）
    dy_c0 = ddy(c0)
    lhs = lp_norm(ddy(dy_c0), 2) + lp_norm(dy_c0, 2)
    base0 = lp_norm(n1_0, 2) + lp_norm(n2_0, 2)
    checks.append(InequalityCheck("zero_mode_chemo_bound", lhs, 2.0 * base0, "constant", 2.0))
    checks.append(InequalityCheck("zero_mode_chemo_linf", dy_c0.max_abs(), 2.0 * base0, "constant", 2.0))
    checks.append(InequalityCheck("zero_mode_chemo_l4", lp_norm(dy_c0, 4), base0, "empirical"))

    # 非ゼロモードの楕円型評価（定数 2）
    grad_x, grad_y = ddx(c_nz), ddy(c_nz)
    grad_l2 = math.sqrt(lp_norm(grad_x, 2) ** 2 + lp_norm(grad_y, 2) ** 2)
    base = lp_norm(n1_nz, 2) + lp_norm(n2_nz, 2)
    lhs = lp_norm(laplacian(c_nz), 2) + grad_l2
    checks.append(InequalityCheck("nonzero_mode_chemo_bound", lhs, 2.0 * base, "constant", 2.0))

    grad_l4 = float(np.sum(state.grid.quadrature * (grad_x.values**2 + grad_y.values**2) ** 2) ** 0.25)
    checks.append(InequalityCheck("nonzero_grad_c_l4_bound", grad_l4, base, "empirical"))

    # x 方向 Poincare 不等式（定数 1）
    for name, f in (("n1", n1_nz), ("n2", n2_nz), ("omega", omega_nz)):
        lhs, rhs = lp_norm(f, 2), lp_norm(ddx(f), 2)
        if fault == FAULT_FLIP_POINCARE:
            lhs, rhs = rhs, lhs
        checks.append(InequalityCheck(f"x_poincare_{name}", lhs, rhs, "constant", 1.0))

    # 速度の評価
    omega_l2 = lp_norm(omega_nz, 2)
    u_l2 = math.sqrt(lp_norm(u1_nz, 2) ** 2 + lp_norm(u2_nz, 2) ** 2)
    checks.append(InequalityCheck("velocity_l2_bound", u_l2, omega_l2, "constant", 1.0))

    grad_u = math.sqrt(gradient_l2(u1_nz) ** 2 + gradient_l2(u2_nz) ** 2)
    checks.append(InequalityCheck("velocity_gradient_bound", grad_u, omega_l2, "empirical"))

    u_sup = max(u1_nz.max_abs(), u2_nz.max_abs())
    interp = lp_norm(ddx(omega_nz), 2) ** 0.2 * omega_l2**0.8
    checks.append(InequalityCheck("velocity_sup_interpolation", u_sup, interp, "empirical"))

    return InequalityReport(tuple(checks))


@dataclass
class InequalitySuite:
    """Aggregates reports of many states: worst slack and empirical constants per inequality."""

    states: int = 0
    violations: list[dict] = field(default_factory=list)
    worst_ratio: dict[str, float] = field(default_factory=dict)
    worst_slack: dict[str, float] = field(default_factory=dict)
    kinds: dict[str, str] = field(default_factory=dict)

    def add(self, report: InequalityReport, index: int) -> None:
        self.states += 1
        for check in report.checks:
            self.kinds[check.name] = check.kind
            self.worst_ratio[check.name] = max(self.worst_ratio.get(check.name, 0.0), check.ratio)
            self.worst_slack[check.name] = min(self.worst_slack.get(check.name, math.inf), check.slack)
            if not check.holds:
                self.violations.append({"state": index, **check.to_dict()})

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "states": self.states,
            "inequalities": {
                name: {
                    "kind": self.kinds[name],
                    "worst_ratio": self.worst_ratio[name],
                    "worst_slack": self.worst_slack[name],
                }
                for name in sorted(self.kinds)
            },
            "violations": self.violations,
        }


def random_state(grid: ChannelGrid, rng: np.random.Generator, bc: DensityBC = DensityBC.NEUMANN) -> SimState:
    """Smooth band-limited state: nonnegative BC-compatible densities, wall-free vorticity."""

    bc = DensityBC(bc)
    X, Y = grid.meshgrid()
    kmax = min(4, grid.nx // 3)

    def smooth(basis) -> np.ndarray:
        values = np.zeros(grid.shape)
        for k in range(kmax + 1):
            for m in range(4):
                amp = rng.normal() / (1.0 + k + m)
                phase = rng.uniform(0.0, 2.0 * np.pi)
                values += amp * np.cos(k * X + phase) * basis(m, Y)
        return values

    def density() -> PhysField:
        # Neumann: cos(m pi y) は壁で微分が 0、Dirichlet: (1-y^2) を掛けて壁で 0
        values = smooth(lambda m, y: np.cos(m * np.pi * y))
        values = values - values.min() + rng.uniform(0.1, 1.0)
        values *= rng.uniform(0.5, 5.0) / values.max()
        if bc is DensityBC.DIRICHLET:
            values = values * (1.0 - Y**2)
        return PhysField(grid, values)

    n1 = density()
    n2 = density()
    omega = smooth(lambda m, y: np.sin((m + 1) * np.pi * y))
    omega[:, 0] = 0.0
    omega[:, -1] = 0.0
    return SimState(grid=grid, t=0.0, n1=n1, n2=n2, omega=PhysField(grid, omega), u01=np.zeros(grid.ny + 1), bc=bc)


# Trajectory reports ----------------------------------------------------------
@dataclass(frozen=True)
class ZeroModeReport:
    """Empirical zero-mode quantities and their initial-data-only templates."""

    density_sup: float
    vorticity_bound: float
    mean_flow_sup: float
    density_template: float
    vorticity_template: float
    mean_flow_template: float
    density_argmax_t: float

    @property
    def empirical(self) -> tuple[float, float, float]:
        return (self.density_sup, self.vorticity_bound, self.mean_flow_sup)

    @property
    def ratios(self) -> tuple[float, float, float]:
        templates = (self.density_template, self.vorticity_template, self.mean_flow_template)
        return tuple(emp / tpl if tpl > 0 else 0.0 for emp, tpl in zip(self.empirical, templates))

    def to_dict(self) -> dict:
        return {
            "density_sup": self.density_sup,
            "vorticity_bound": self.vorticity_bound,
            "mean_flow_sup": self.mean_flow_sup,
            "density_template": self.density_template,
            "vorticity_template": self.vorticity_template,
            "mean_flow_template": self.mean_flow_template,
            "density_argmax_t": self.density_argmax_t,
            "ratios": list(self.ratios),
        }


def zero_mode_report(traj: "Trajectory") -> ZeroModeReport:
    records: Sequence[DiagRecord] = traj.records
    if not records:
        return ZeroModeReport(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    params = traj.params

    density = [r.n1_zero_l2**2 + r.n2_zero_l2**2 for r in records]
    argmax = int(np.argmax(density))

    # ||omega_0||_{L^inf L^2} + A^{-1/2} ||d_y omega_0||_{L^2 L^2}
    times = np.array([r.t for r in records])
    dissipation = np.array([r.domega0_dy_l2**2 for r in records])
    integral = float(trapezoid(dissipation, times)) if len(records) > 1 else 0.0
    vorticity = max(r.omega_zero_l2 for r in records) + math.sqrt(integral / params.A_eff)

    mean_flow = max(r.u01_linf for r in records)

    first = records[0]
    chi_sq = max(params.chi1**2, params.chi2**2, 1.0)
    density_template = chi_sq * (first.n1_zero_l2**2 + first.n2_zero_l2**2 + first.mass1**4 + first.mass2**4 + 1.0)
    return ZeroModeReport(
        density_sup=density[argmax],
        vorticity_bound=vorticity,
        mean_flow_sup=mean_flow,
        density_template=density_template,
        vorticity_template=first.omega_zero_l2 + 1.0,
        mean_flow_template=first.u01_l2 + first.omega_zero_l2 + 1.0,
        density_argmax_t=records[argmax].t,
    )


def classify(traj: "Trajectory") -> Classification:
    if traj.termination is Termination.BLOW_UP:
        return Classification.BLOW_UP_FLAGGED
    if traj.termination is not Termination.COMPLETED:
        return Classification.INCONCLUSIVE
    initial = traj.initial_linf
    for species in (1, 2):
        # サンプル間のピークも含める
        peak = max(traj.linf_peak[species - 1], max_linf(traj.records, species))
        if peak > BOUNDED_FACTOR * initial[species - 1]:
            return Classification.INCONCLUSIVE
    return Classification.BOUNDED


def max_linf(records: Iterable[DiagRecord], species: int) -> float:
    attr = "n1_linf" if species == 1 else "n2_linf"
    return max((getattr(r, attr) for r in records), default=0.0)
